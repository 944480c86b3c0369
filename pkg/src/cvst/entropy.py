"""Multi-reference checkerboard entropy model.

Each channel group is coded in two passes.  The anchored lattice is predicted
from the correlation-map rows of groups ``<= i``, a pooled summary of groups
``< i`` and the decoded hyperprior; the non-anchored lattice additionally sees
the anchored values of its own group.  Code lengths are analytic
(``-log2 p``), never an actual bitstream.

Internally features use a position-major layout ``(B, P, C)`` with ``P = H' W'``
so that per-position channel mixing is a plain matmul.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MissingReference
from .latent import GroupPartition, anchor_mask, round_half_away
from .numerics import ParamStore, SeededRng, Tensor, concat, no_grad, where

P_FLOOR = 1e-12
SCALE_FLOOR = 1e-4
LN2 = float(np.log(2.0))


def _exp_neg(t, scale):
    return (-(t.abs() / scale)).exp()


def laplace_likelihood(x, mu, b):
    """P(round value == x) under Laplace(mu, b) convolved with U(-1/2, 1/2).

    Tensor in, tensor out.  The interval is mirrored onto the left tail so the
    difference of CDFs never cancels catastrophically.
    """
    a = (x - mu).abs()
    hi = 0.5 - a
    lo = -0.5 - a
    e_hi = _exp_neg(hi, b)
    f_hi = where(hi.data < 0, e_hi * 0.5, 1.0 - e_hi * 0.5)
    f_lo = _exp_neg(lo, b) * 0.5
    return (f_hi - f_lo).clamp(P_FLOOR, None)


def _sigmoid_stable(t):
    e = (-t.abs()).exp()
    return where(t.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def logistic_likelihood(x, loc, scale):
    """Logistic(loc, scale) mass on ``[x - 1/2, x + 1/2]``."""
    d = (x - loc).abs()
    return (_sigmoid_stable((0.5 - d) / scale) - _sigmoid_stable((-0.5 - d) / scale)).clamp(P_FLOOR, None)


def discrete_likelihood(xq, mu, b):
    """Numpy convenience wrapper around :func:`laplace_likelihood`."""
    b = np.maximum(np.asarray(b, dtype=np.float64), SCALE_FLOOR)
    with no_grad():
        return laplace_likelihood(Tensor(xq), Tensor(mu), Tensor(b)).data


def factorized_likelihood(zq, loc, scale):
    scale = np.maximum(np.asarray(scale, dtype=np.float64), SCALE_FLOOR)
    with no_grad():
        return logistic_likelihood(Tensor(zq), Tensor(loc), Tensor(scale)).data


def bits(p):
    """Code length in bits of probabilities ``p`` (tensor)."""
    return -(p.log() * (1.0 / LN2))


@dataclass
class LaplaceParams:
    mu: Tensor
    b: Tensor


@dataclass
class ReferenceBundle:
    phi_m: Tensor
    phi_ch: Tensor
    phi_z: Tensor
    phi_lc: Tensor | None = None


def _pool_matrix(height, width):
    """(P_z, P) averaging of 2x2 blocks; edge blocks of odd maps average what exists."""
    hz, wz = -(-height // 2), -(-width // 2)
    M = np.zeros((hz * wz, height * width))
    for h in range(height):
        for w in range(width):
            M[(h // 2) * wz + w // 2, h * width + w] = 1.0
    return M / M.sum(axis=1, keepdims=True)


def _upsample_matrix(height, width):
    wz = -(-width // 2)
    hz = -(-height // 2)
    U = np.zeros((height * width, hz * wz))
    for h in range(height):
        for w in range(width):
            U[h * width + w, (h // 2) * wz + w // 2] = 1.0
    return U


def _neighbour_matrix(height, width):
    """(P, P) mean over the 4-neighbours of each position (all anchored for non-anchored targets)."""
    N = np.zeros((height * width, height * width))
    for h in range(height):
        for w in range(width):
            for dh, dw in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                hh, ww = h + dh, w + dw
                if 0 <= hh < height and 0 <= ww < width:
                    N[h * width + w, hh * width + ww] = 1.0
    return N / N.sum(axis=1, keepdims=True)


class EntropyModel:
    """Hyperprior plus per-group anchored/non-anchored Laplace parameter prediction."""

    PARTS = {"anchored": 0, "non_anchored": 1}

    def __init__(self, params: ParamStore, part: GroupPartition, n_tx: int, height: int, width: int,
                 hyper_channels=4, hidden=8, rng: SeededRng | None = None, prefix="ent."):
        rng = rng or SeededRng(0)
        L, m, G = part.channels, part.m, part.groups
        self.part, self.n_tx, self.height, self.width = part, n_tx, height, width
        self.hyper_channels = hyper_channels
        self.hyper_shape = (-(-height // 2), -(-width // 2))
        self._pool = _pool_matrix(height, width)
        self._up = _upsample_matrix(height, width)
        self._neigh = _neighbour_matrix(height, width)
        self._anchor = anchor_mask(height, width).ravel()
        self._anchor_col = self._anchor[:, None].astype(np.float64)

        def add(name, value):
            return params.add(prefix + name, value)

        s = 0.3
        self.h_w = add("h_w", rng.normal(0, s / np.sqrt(2 * L), (2 * L, hyper_channels)))
        self.h_b = add("h_b", np.zeros(hyper_channels))
        self.f_loc = add("f_loc", np.zeros(hyper_channels))
        self.f_logscale = add("f_logscale", np.zeros(hyper_channels))
        self.gz_w = add("gz_w", rng.normal(0, s / np.sqrt(hyper_channels), (hyper_channels, hidden)))
        self.gm_w = add("gm_w", rng.normal(0, s / np.sqrt(G * n_tx), (G * n_tx, hidden)))
        self.gch_w = add("gch_w", rng.normal(0, s / np.sqrt(2 * L), (2 * L, hidden)))
        self.glc_w = add("glc_w", rng.normal(0, s / np.sqrt(2 * m), (2 * m, hidden)))
        self.ep_b = add("ep_b", np.zeros((2, hidden)))
        self.ep_w = add("ep_w", rng.normal(0, s / np.sqrt(hidden), (2, G, hidden, 2 * m)))
        self.ep_o = add("ep_o", np.zeros((2, G, 2 * m)))

    # -- hyperprior ------------------------------------------------------

    def analysis(self, y):
        """(B, P, L) -> z of shape (B, P_z, L_z), P_z = ceil(H'/2) ceil(W'/2)."""
        feats = concat([y, y.abs()], axis=-1)
        return (Tensor(self._pool) @ feats) @ self.h_w + self.h_b

    def synthesis(self, z_tilde):
        return (Tensor(self._up) @ z_tilde) @ self.gz_w

    def hyper_scale(self):
        return self.f_logscale.exp().clamp(SCALE_FLOOR, None)

    def hyper_bits(self, z_tilde):
        p = logistic_likelihood(z_tilde, self.f_loc, self.hyper_scale())
        return bits(p).sum(axis=(1, 2))

    def hyper_transform(self, y, mode="round", noise=None):
        """Return ``(z, z_tilde, phi_z)`` for a (B, P, L) input.

        ``mode="round"`` quantizes z; ``"noise"`` adds the given U(-1/2, 1/2) draw.
        """
        z = self.analysis(y)
        if mode == "round":
            zt = Tensor(round_half_away(z.data))
        elif mode == "noise":
            zt = z + noise
        else:
            raise ValueError(mode)
        return z, zt, self.synthesis(zt)

    # -- per-group prediction -------------------------------------------

    def references(self, y_tilde, phi_z, scores, i, part, disable=()):
        """Reference features for group ``i``; ``scores`` is the (B, G, N_t) map."""
        B, P, L = y_tilde.shape
        m, G = self.part.m, self.part.groups
        hidden = self.gz_w.shape[1]
        rows = (np.arange(G) <= i).astype(np.float64)[:, None]
        phi_m = ((scores * rows).reshape(B, 1, G * self.n_tx)) @ self.gm_w
        if "ch" in disable or i == 0:
            phi_ch = Tensor(np.zeros((B, 1, hidden)))
        else:
            chmask = np.tile(np.arange(L) < i * m, 2).astype(np.float64)
            pooled = concat([y_tilde.mean(axis=1), y_tilde.abs().mean(axis=1)], axis=-1) * chmask
            phi_ch = pooled.reshape(B, 1, 2 * L) @ self.gch_w
        phi_lc = None
        if part == "non_anchored":
            if "lc" in disable:
                phi_lc = Tensor(np.zeros((B, P, hidden)))
            else:
                anchored = y_tilde[:, :, i * m:(i + 1) * m] * self._anchor_col
                nb = Tensor(self._neigh) @ anchored
                phi_lc = concat([nb, nb.abs()], axis=-1) @ self.glc_w
        return ReferenceBundle(phi_m, phi_ch, phi_z, phi_lc)

    def predict_params(self, refs: ReferenceBundle, part: str, i: int) -> LaplaceParams:
        k = self.PARTS[part]
        act = refs.phi_m + refs.phi_ch + refs.phi_z + self.ep_b[k]
        if part == "non_anchored":
            if refs.phi_lc is None:
                raise MissingReference("non-anchored prediction needs the local anchored reference")
            act = act + refs.phi_lc
        out = act.tanh() @ self.ep_w[k, i] + self.ep_o[k, i]
        m = self.part.m
        return LaplaceParams(out[..., :m], out[..., m:].exp().clamp(SCALE_FLOOR, None))

    def group_bits(self, y_group, pa: LaplaceParams, pna: LaplaceParams):
        """(anchored bits, non-anchored bits), each of shape (B,)."""
        ba = bits(laplace_likelihood(y_group, pa.mu, pa.b)) * self._anchor_col
        bna = bits(laplace_likelihood(y_group, pna.mu, pna.b)) * (1.0 - self._anchor_col)
        return ba.sum(axis=(1, 2)), bna.sum(axis=(1, 2))

    def rates(self, y_tilde, phi_z, scores, disable=()):
        """Per-group bits (B, G), split into anchored and non-anchored parts."""
        m = self.part.m
        r_a, r_na = [], []
        for i in range(self.part.groups):
            yi = y_tilde[:, :, i * m:(i + 1) * m]
            pa = self.predict_params(self.references(y_tilde, phi_z, scores, i, "anchored", disable),
                                     "anchored", i)
            pna = self.predict_params(self.references(y_tilde, phi_z, scores, i, "non_anchored", disable),
                                      "non_anchored", i)
            a, na = self.group_bits(yi, pa, pna)
            r_a.append(a.reshape(-1, 1))
            r_na.append(na.reshape(-1, 1))
        return concat(r_a, axis=1), concat(r_na, axis=1)
