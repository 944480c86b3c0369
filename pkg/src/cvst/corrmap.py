"""Context-channel correlation map.

Context channel groups and SVD subchannels are embedded into a shared unit
sphere; temperature-scaled cosine similarities are normalised over the groups
of each gather, so every subchannel column is a distribution over the ``N_t``
groups it may be paired with.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GatherMismatch
from .latent import GroupPartition
from .mimo import SvdPrecoder
from .numerics import ParamStore, SeededRng, Tensor, no_grad, softmax

TAU_DEFAULT = 0.07
TAU_RANGE = (0.01, 1.0)


@dataclass(frozen=True)
class CorrelationMap:
    scores: np.ndarray  # (L/m, N_t)
    n_tx: int
    tau: float

    @property
    def gathers(self) -> np.ndarray:
        G = self.scores.shape[0]
        return self.scores.reshape(G // self.n_tx, self.n_tx, self.n_tx)


def canonical_csi_features(precoder: SvdPrecoder) -> np.ndarray:
    """Per-subchannel feature ``[lam_j, Re/Im of V[:, j] interleaved]``.

    Each column of ``V`` is rotated so its largest entry is real positive, which
    removes the SVD's per-column phase freedom.
    """
    V = precoder.V
    lead = V[np.argmax(np.abs(V), axis=0), np.arange(V.shape[1])]
    V = V * (np.abs(lead) / np.where(lead == 0, 1.0, lead))
    inter = np.empty((V.shape[1], 2 * V.shape[0]))
    inter[:, 0::2] = V.real.T
    inter[:, 1::2] = V.imag.T
    return np.concatenate([precoder.lam[:, None], inter], axis=1)


def _unit(x):
    return x / ((x * x).sum(axis=-1, keepdims=True) + 1e-12).sqrt()


class EmbeddingHead:
    """Trainable group and subchannel encoders plus the temperature.

    Parameters live in ``params`` under ``prefix``.
    """

    def __init__(self, params: ParamStore, part: GroupPartition, n_tx: int, embed_dim=16,
                 rng: SeededRng | None = None, prefix="map."):
        if part.groups % n_tx:
            raise GatherMismatch(f"{n_tx} subchannels do not divide {part.groups} groups")
        rng = rng or SeededRng(0)
        self.part, self.n_tx, self.prefix = part, n_tx, prefix
        csi_dim = 1 + 2 * n_tx
        p = prefix
        self.w_c = params.add(p + "w_c", rng.normal(0, 1 / np.sqrt(part.m), (part.m, embed_dim)))
        self.b_c = params.add(p + "b_c", rng.normal(0, 0.1, embed_dim))
        self.w_h = params.add(p + "w_h", rng.normal(0, 1 / np.sqrt(csi_dim), (csi_dim, embed_dim)))
        self.b_h = params.add(p + "b_h", rng.normal(0, 0.1, embed_dim))
        self.tau = params.add(p + "tau", TAU_DEFAULT)

    def group_embeddings(self, c):
        """``c``: (B, P, L) tensor -> (B, G, d_e) unit vectors."""
        B, P, L = c.shape
        pooled = c.mean(axis=1).reshape(B, self.part.groups, self.part.m)
        return _unit(pooled @ self.w_c + self.b_c)

    def csi_embeddings(self, csi):
        """``csi``: (B, N_t, 1 + 2 N_t) features -> (B, N_t, d_e) unit vectors."""
        return _unit(Tensor(csi) @ self.w_h + self.b_h)

    def temperature(self):
        return self.tau.clamp(*TAU_RANGE)

    def scores(self, c, csi, csi_embed=None):
        """(B, G, N_t) scores; softmax over the groups of each gather."""
        e_c = self.group_embeddings(c)
        e_h = self.csi_embeddings(csi) if csi_embed is None else csi_embed
        logits = (e_c @ e_h.transpose(0, 2, 1)) / self.temperature()
        B, G, n = logits.shape
        gathered = logits.reshape(B, G // n, n, n)
        return softmax(gathered, axis=2).reshape(B, G, n)


def build_map(c, H, precoder: SvdPrecoder, heads: EmbeddingHead, tau=None) -> CorrelationMap:
    """Correlation map for one frame.

    ``c`` is the context as an (L, H', W') array; ``H`` is kept for interface
    symmetry, the subchannel features come from ``precoder``.  ``tau``
    overrides the head's learned temperature when given.
    """
    c = np.asarray(c, dtype=np.float64)
    L = c.shape[0]
    if (L // heads.part.m) % heads.n_tx or L % heads.part.m:
        raise GatherMismatch(f"{heads.n_tx} subchannels do not divide the {L // heads.part.m} groups")
    with no_grad():
        ct = Tensor(c.reshape(L, -1).T[None])
        saved = heads.tau.data
        try:
            if tau is not None:
                heads.tau.data = np.asarray(float(tau))
            s = heads.scores(ct, canonical_csi_features(precoder)[None])
            t = float(heads.temperature().data)
        finally:
            heads.tau.data = saved
    return CorrelationMap(s.data[0], heads.n_tx, t)
