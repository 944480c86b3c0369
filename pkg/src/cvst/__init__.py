"""Semantic video transmission over MIMO links with toy trainable transforms.

The package is organised bottom-up:

``numerics``    seeded RNG streams, complex SVD, reverse-mode autodiff, parameters
``mimo``        Rayleigh channels, SVD precoding, pilots and LS estimation
``latent``      channel groups, checkerboard lattices, rate modulation
``corrmap``     group/subchannel correlation map
``entropy``     hyperprior and multi-reference checkerboard entropy model
``allocator``   Hungarian assignment, eta and bandwidth ledger
``transceiver`` rate-adaptive conditioning, group projection, codewords
``pipeline``    the end-to-end model, motion, and GoP simulation
``training``    two-stage training, optimizer and checkpoints
``experiment``  configs, metric rows and reports; ``cli`` wraps it
"""

from .errors import (
    ConfigError,
    ContractViolation,
    CorruptCodeword,
    CvstError,
    GatherMismatch,
    InvalidInput,
    InvalidModulation,
    InvalidRate,
    MissingReference,
    NotDivisible,
    NumericalFailure,
    ShapeMismatch,
    SingularPilotMatrix,
    SubchannelDegenerate,
)
from .pipeline import LAMBDA_SET, SNR_SET_DB, CvstModel, GopConfig, ModelConfig, run_gop
from .training import Schedule, load_checkpoint, save_checkpoint, train_model
from .video import ClipSpec, psnr, synth_video

__version__ = "0.1.0"

__all__ = [
    "LAMBDA_SET",
    "SNR_SET_DB",
    "ClipSpec",
    "ConfigError",
    "ContractViolation",
    "CorruptCodeword",
    "CvstError",
    "CvstModel",
    "GatherMismatch",
    "GopConfig",
    "InvalidInput",
    "InvalidModulation",
    "InvalidRate",
    "MissingReference",
    "ModelConfig",
    "NotDivisible",
    "NumericalFailure",
    "Schedule",
    "ShapeMismatch",
    "SingularPilotMatrix",
    "SubchannelDegenerate",
    "load_checkpoint",
    "psnr",
    "run_gop",
    "save_checkpoint",
    "synth_video",
    "train_model",
]
