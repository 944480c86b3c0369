"""Feature-map structure: channel groups, checkerboard lattice, quantization, modulation.

Feature maps are plain arrays shaped ``(..., L, H', W')``; leading batch axes
pass through untouched.  Modulation helpers also accept autodiff tensors so the
same code serves training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GatherMismatch, InvalidModulation, NotDivisible, ShapeMismatch
from .numerics import Tensor, where


@dataclass(frozen=True)
class GroupPartition:
    channels: int
    m: int
    n_tx: int | None = None

    def __post_init__(self):
        if self.m < 1 or self.channels % self.m:
            raise NotDivisible(f"group size {self.m} does not divide {self.channels} channels")
        if self.n_tx is not None and self.groups % self.n_tx:
            raise GatherMismatch(f"{self.n_tx} subchannels do not divide {self.groups} groups")

    @property
    def groups(self) -> int:
        return self.channels // self.m

    @property
    def gathers(self) -> int:
        return self.groups // (self.n_tx or self.groups)

    def channel_slice(self, i) -> slice:
        return slice(i * self.m, (i + 1) * self.m)

    def group_of_channel(self) -> np.ndarray:
        return np.arange(self.channels) // self.m


def split_groups(f, part: GroupPartition):
    """Channel groups ``[i*m, (i+1)*m)`` in order."""
    f = np.asarray(f)
    if f.shape[-3] != part.channels:
        raise ShapeMismatch(f"map has {f.shape[-3]} channels, partition expects {part.channels}")
    return [f[..., part.channel_slice(i), :, :] for i in range(part.groups)]


def anchor_mask(height: int, width: int) -> np.ndarray:
    """True on the anchored lattice ``(h + w) % 2 == 0``."""
    h = np.arange(height)[:, None]
    w = np.arange(width)[None, :]
    return (h + w) % 2 == 0


def checkerboard_split(f):
    """Split spatial positions into (anchored, non-anchored) value arrays.

    Returns arrays of shape ``(..., L, n_anchored)`` and ``(..., L, n_non_anchored)``
    holding the positions in row-major order.
    """
    f = np.asarray(f)
    mask = anchor_mask(*f.shape[-2:])
    flat = f.reshape(*f.shape[:-2], -1)
    idx = mask.ravel()
    return flat[..., idx], flat[..., ~idx]


def checkerboard_merge(anchored, non_anchored, height: int, width: int):
    """Inverse of :func:`checkerboard_split`."""
    anchored = np.asarray(anchored)
    non_anchored = np.asarray(non_anchored)
    mask = anchor_mask(height, width).ravel()
    if (anchored.shape[:-1] != non_anchored.shape[:-1]
            or anchored.shape[-1] != mask.sum() or non_anchored.shape[-1] != (~mask).sum()):
        raise ShapeMismatch(
            f"halves {anchored.shape} / {non_anchored.shape} do not tile a {height}x{width} grid")
    out = np.empty(anchored.shape[:-1] + (height * width,), dtype=np.result_type(anchored, non_anchored))
    out[..., mask] = anchored
    out[..., ~mask] = non_anchored
    return out.reshape(*anchored.shape[:-1], height, width)


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_or_noise(f, mode: str, rng=None):
    """Hard rounding (``"round"``) or the additive U[-1/2, 1/2) training proxy (``"noise"``)."""
    if mode == "round":
        return round_half_away(f)
    if mode == "noise":
        f = np.asarray(f, dtype=np.float64)
        return f + rng.uniform(-0.5, 0.5, f.shape)
    raise ValueError(f"unknown quantization mode {mode!r}")


@dataclass(frozen=True)
class ModulationTerm:
    """Per-rate scaling ``q = r_global * r`` for each checkerboard lattice."""

    r_global: float
    r_a: np.ndarray
    r_na: np.ndarray

    def __post_init__(self):
        r_a = np.asarray(self.r_a, dtype=np.float64)
        r_na = np.asarray(self.r_na, dtype=np.float64)
        object.__setattr__(self, "r_a", r_a)
        object.__setattr__(self, "r_na", r_na)
        if r_a.shape != r_na.shape or r_a.ndim != 1:
            raise InvalidModulation("r_a and r_na must be vectors of equal length")
        if not (self.r_global > 0 and np.all(r_a > 0) and np.all(r_na > 0)):
            raise InvalidModulation("modulation entries must be positive")

    @property
    def q_a(self) -> np.ndarray:
        return self.r_global * self.r_a

    @property
    def q_na(self) -> np.ndarray:
        return self.r_global * self.r_na

    @classmethod
    def identity(cls, channels: int) -> "ModulationTerm":
        return cls(1.0, np.ones(channels), np.ones(channels))


def modulation_field(q_a, q_na, height: int, width: int):
    """Broadcastable ``(..., L, H', W')`` divisor placing q_a on anchored positions.

    ``q_a``/``q_na`` have shape ``(..., L)``; tensors stay tensors.
    """
    mask = anchor_mask(height, width)
    if isinstance(q_a, Tensor) or isinstance(q_na, Tensor):
        qa = q_a.reshape(*q_a.shape, 1, 1) if isinstance(q_a, Tensor) else np.asarray(q_a)[..., None, None]
        qn = q_na.reshape(*q_na.shape, 1, 1) if isinstance(q_na, Tensor) else np.asarray(q_na)[..., None, None]
        return where(mask, qa, qn)
    return np.where(mask, np.asarray(q_a)[..., None, None], np.asarray(q_na)[..., None, None])


def _check_q(q: ModulationTerm, channels):
    if q.r_a.size != channels:
        raise ShapeMismatch(f"modulation has {q.r_a.size} channels, map has {channels}")


def modulate(f, q: ModulationTerm):
    """Divide anchored positions by ``q_a`` and non-anchored by ``q_na`` (per channel)."""
    f = np.asarray(f, dtype=np.float64)
    _check_q(q, f.shape[-3])
    a, na = checkerboard_split(f)
    return checkerboard_merge(a / q.q_a[:, None], na / q.q_na[:, None], *f.shape[-2:])


def demodulate(f, q: ModulationTerm):
    f = np.asarray(f, dtype=np.float64)
    _check_q(q, f.shape[-3])
    a, na = checkerboard_split(f)
    return checkerboard_merge(a * q.q_a[:, None], na * q.q_na[:, None], *f.shape[-2:])
