"""Contextual video codec around the transceiver.

Frames are ``(3, H, W)`` arrays in [0, 1].  Inside the model every latent uses
the position-major layout ``(B, P, L)`` (``P = H' W'``, row-major positions) so
that per-position channel mixing is a matmul; the public helpers accept and
return the ``(L, H', W')`` layout.

A P-frame goes through the steps of the transmission loop:

1. semantic encoding of the current frame,
2. block-matching motion against the *decoded* reference, lifted to L channels,
3. context generation from the current latent and the motion-compensated reference,
4. correlation map, Hungarian assignment and eta per group,
5. multi-reference entropy model -> bits -> symbol counts k,
6. MRA conditioning, truncated projection, MIMO transmission, decoding,
7. context regeneration, frame reconstruction and refinement.

Discrete decisions (motion field, assignment, eta, k) are recorded in an optional
``frozen`` dictionary so a repeated forward pass — e.g. finite differences —
sees the same piecewise-smooth function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .allocator import EtaConfig, assign_groups, bandwidth_cost, compute_eta, ledger
from .corrmap import EmbeddingHead, canonical_csi_features
from .entropy import EntropyModel
from .errors import ContractViolation, InvalidInput, ShapeMismatch
from .latent import GroupPartition, ModulationTerm, anchor_mask, round_half_away
from .mimo import ChannelSpec, NoiseSpec, SvdPrecoder, ls_estimate, orthogonal_pilots, sample_rayleigh, send_pilots
from .numerics import ParamStore, SeededRng, Tensor, concat, no_grad, where
from .transceiver import ChannelState, ConditioningInputs, GroupProjection, MraLayer, transceive_coefficients

LAMBDA_SET = (0.015, 0.06, 0.12, 0.20, 0.32)
SNR_SET_DB = (0, 2, 4, 6, 8, 10, 12, 14)


@dataclass(frozen=True)
class ModelConfig:
    """Sizes and knobs of the desk model; defaults match the CI configuration."""

    height: int = 32
    width: int = 32
    s: int = 4
    channels: int = 8
    m: int = 2
    n_tx: int = 2
    n_rx: int = 2
    radius: int = 2
    embed_dim: int = 16
    hyper_channels: int = 4
    hidden: int = 8
    mra_hidden: int = 8
    refine_hidden: int = 8
    lambdas: tuple = LAMBDA_SET
    snr_range: tuple = (0.0, 14.0)
    eta: EtaConfig = field(default_factory=EtaConfig)
    projection: str = "dct"
    latent_gain: float = 8.0
    q_exponent: float = 0.6
    distortion_scale: float = 4 * 255.0**2
    motion_bias: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.s not in (2, 4):
            raise InvalidInput(f"latent factor s must be 2 or 4, got {self.s}")
        if self.height % self.s or self.width % self.s:
            raise ShapeMismatch(f"{self.height}x{self.width} frame is not divisible by s={self.s}")
        GroupPartition(self.channels, self.m, self.n_tx)

    @classmethod
    def micro(cls, **overrides) -> "ModelConfig":
        """A sub-500-parameter model for gradient verification."""
        base = dict(height=4, width=4, s=2, channels=4, m=2, n_tx=2, n_rx=2, radius=1, embed_dim=2,
                    hyper_channels=1, hidden=2, mra_hidden=1, refine_hidden=1, lambdas=(0.12,))
        base.update(overrides)
        return cls(**base)

    @property
    def hp(self) -> int:
        return self.height // self.s

    @property
    def wp(self) -> int:
        return self.width // self.s

    @property
    def positions(self) -> int:
        return self.hp * self.wp

    @property
    def groups(self) -> int:
        return self.channels // self.m

    @property
    def partition(self) -> GroupPartition:
        return GroupPartition(self.channels, self.m, self.n_tx)

    @property
    def patch_dim(self) -> int:
        return 3 * self.s * self.s


@dataclass(frozen=True)
class GopConfig:
    frames: int = 12
    s: int = 4
    channels: int = 8
    radius: int = 2

    def __post_init__(self):
        if self.frames < 2:
            raise InvalidInput("a GoP needs at least two frames")
        if self.s not in (2, 4):
            raise InvalidInput("s must be 2 or 4")


# -- layout helpers ------------------------------------------------------------


def to_positions(f):
    """(..., L, H', W') -> (..., P, L)."""
    f = np.asarray(f)
    L = f.shape[-3]
    return np.swapaxes(f.reshape(*f.shape[:-2], -1), -1, -2).reshape(*f.shape[:-3], -1, L)


def from_positions(f, height, width):
    """(..., P, L) -> (..., L, H', W')."""
    f = np.asarray(f)
    return np.swapaxes(f, -1, -2).reshape(*f.shape[:-2], f.shape[-1], height, width)


def patchify(x, s):
    """(B, 3, H, W) -> (B, P, 3 s^2) non-overlapping patches in row-major order."""
    x = np.asarray(x, dtype=np.float64)
    B, C, H, W = x.shape
    if H % s or W % s:
        raise ShapeMismatch(f"{H}x{W} is not divisible by {s}")
    p = x.reshape(B, C, H // s, s, W // s, s).transpose(0, 2, 4, 1, 3, 5)
    return p.reshape(B, (H // s) * (W // s), C * s * s)


def unpatchify(p, height, width, s):
    """Tensor inverse of :func:`patchify`."""
    B = p.shape[0]
    t = p.reshape(B, height // s, width // s, 3, s, s).transpose(0, 3, 1, 4, 2, 5)
    return t.reshape(B, 3, height, width)


def _patch_basis(s, channels, rng: SeededRng | None = None):
    """(3 s^2, L) init: per-colour DC, then luma DCT frequencies (orthonormal).

    Channels beyond those ``3 + s^2 - 1`` columns get seeded random unit vectors.
    """
    from .transceiver import _dct_matrix

    D = _dct_matrix(s)
    cols = []
    for c in range(3):
        v = np.zeros((3, s, s))
        v[c] = 1.0 / s
        cols.append(v.ravel())
    freqs = sorted(((u, w) for u in range(s) for w in range(s) if (u, w) != (0, 0)),
                   key=lambda t: (t[0] + t[1], t[0]))
    for u, w in freqs:
        spatial = np.outer(D[u], D[w])
        cols.append(np.stack([spatial] * 3).ravel() / np.sqrt(3.0))
    extra = channels - len(cols)
    if extra > 0:
        rnd = (rng or SeededRng(0)).normal(0.0, 1.0, (3 * s * s, extra))
        cols.extend((rnd / np.linalg.norm(rnd, axis=0)).T)
    return np.stack(cols[:channels], axis=1)


# -- motion --------------------------------------------------------------------


def _shift_index(height, width, dy, dx):
    """Flat gather index implementing replicate-padded ``f(p + d)``."""
    h = np.clip(np.arange(height) + dy, 0, height - 1)
    w = np.clip(np.arange(width) + dx, 0, width - 1)
    return (h[:, None] * width + w[None, :]).ravel()


def candidate_shifts(radius):
    """(0, 0) first, then every other displacement in lexicographic order."""
    rest = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1) if (dy, dx) != (0, 0)]
    return [(0, 0)] + rest


def _box3(err, height, width):
    """Sum over the 3x3 neighbourhood (positions outside the grid contribute nothing)."""
    e = err.reshape(*err.shape[:-1], height, width)
    pad = np.pad(e, [(0, 0)] * (e.ndim - 2) + [(1, 1), (1, 1)])
    out = sum(pad[..., i:i + height, j:j + width] for i in range(3) for j in range(3))
    return out.reshape(err.shape)


def motion_estimate(f_cur, f_ref, radius=2, bias=0.0):
    """Integer motion field ``v`` with ``f_cur(p) ~ f_ref(p + v(p))``.

    Inputs are ``(L, H', W')`` maps (or batched ``(..., L, H', W')``); the result
    is ``(..., 2, H', W')`` integer (dy, dx).  Each position minimizes the
    channel-summed squared error over its 3x3 neighbourhood, scaled by
    ``1 + bias * (|dy| + |dx|)`` so that a displacement must beat standing still
    by a margin; ties go to (0, 0) and then to the lexicographically smallest
    displacement.
    """
    f_cur = np.asarray(f_cur, dtype=np.float64)
    f_ref = np.asarray(f_ref, dtype=np.float64)
    if f_cur.shape != f_ref.shape:
        raise ShapeMismatch(f"{f_cur.shape} vs {f_ref.shape}")
    height, width = f_cur.shape[-2:]
    v = _estimate_positions(to_positions(f_cur), to_positions(f_ref), height, width, radius, bias)
    return from_positions(v, height, width).astype(int)


def _estimate_positions(cur, ref, height, width, radius, bias=0.0):
    """Position-major core: (..., P, L) -> (..., P, 2) integer field."""
    cands = candidate_shifts(radius)
    costs = np.stack([_box3(((cur - ref[..., _shift_index(height, width, dy, dx), :]) ** 2).sum(-1),
                            height, width) * (1.0 + bias * (abs(dy) + abs(dx))) for dy, dx in cands], axis=-1)
    best = np.argmin(costs, axis=-1)  # first minimum wins -> tie-break order of ``cands``
    return np.asarray(cands)[best]


def motion_compensate(f_ref, v):
    """Gather ``f_ref`` at ``p + v(p)`` with replicate border padding.

    ``f_ref`` is ``(..., L, H', W')``, ``v`` is ``(..., 2, H', W')`` integer.
    """
    f_ref = np.asarray(f_ref, dtype=np.float64)
    v = np.asarray(v)
    height, width = f_ref.shape[-2:]
    out = _compensate_positions(to_positions(f_ref), to_positions(v).astype(int), height, width)
    return from_positions(out, height, width)


def _compensate_positions(ref, v, height, width):
    hh, ww = np.divmod(np.arange(height * width), width)
    h = np.clip(hh + v[..., 0], 0, height - 1)
    w = np.clip(ww + v[..., 1], 0, width - 1)
    idx = h * width + w  # (..., P)
    return np.take_along_axis(ref, idx[..., None], axis=-2)


def shift_stack(ref, height, width, radius):
    """(B, P, L) -> (B, P, K, L) with every candidate shift of the reference (constant)."""
    shifts = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    return np.stack([ref[:, _shift_index(height, width, dy, dx), :] for dy, dx in shifts], axis=2)


def soft_compensate(ref, v, height, width, radius):
    """Bilinear compensation along a continuous field (tensor ``v`` of shape (B, P, 2)).

    Weights are triangle kernels ``max(0, 1 - |v - d|)`` over the integer
    displacements ``d`` in ``[-R, R]``; ``v`` is clamped to that range, so for
    integer fields this reduces to :func:`motion_compensate`.
    """
    B, P, L = ref.shape
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    v = v.clamp(-radius, radius)
    wy = (1.0 - (v[:, :, 0:1] - d).abs()).clamp(0.0, None)  # (B, P, K1)
    wx = (1.0 - (v[:, :, 1:2] - d).abs()).clamp(0.0, None)
    K1 = d.size
    w = wy.reshape(B, P, K1, 1) * wx.reshape(B, P, 1, K1)
    stack = shift_stack(ref, height, width, radius)  # (B, P, K1*K1, L)
    return (w.reshape(B, P, 1, K1 * K1) @ stack).reshape(B, P, L)


# -- channel states ------------------------------------------------------------


def channel_state(rng: SeededRng, spec: ChannelSpec, csi="perfect", pilot_length=None) -> ChannelState:
    """Draw one frame's channel; with ``csi="ls"`` the precoder comes from noisy pilots."""
    H = sample_rayleigh(rng.spawn("H"), spec)
    noise = spec.noise()
    if csi == "perfect":
        return ChannelState(H, SvdPrecoder.from_channel(H), noise, True)
    if csi == "ls":
        P = orthogonal_pilots(spec.n_tx, pilot_length)
        Y = send_pilots(H, P, noise, rng.spawn("pilots"))
        return ChannelState(H, SvdPrecoder.from_channel(ls_estimate(P, Y, noise)), noise, False)
    raise InvalidInput(f"csi must be 'perfect' or 'ls', got {csi!r}")


def noiseless(state: ChannelState) -> ChannelState:
    return replace(state, noise=NoiseSpec(0.0))


# -- model ---------------------------------------------------------------------


@dataclass
class FrameOutput:
    """Everything one P-frame forward pass produces (batched over B)."""

    x_hat: Tensor
    f_hat: Tensor
    x_ntc: Tensor | None
    k_c: np.ndarray  # (B, G)
    k_v: np.ndarray
    k_cz: np.ndarray  # (B,)
    k_vz: np.ndarray
    rate_c: Tensor  # (B, G) bits
    rate_v: Tensor
    rate_cz: Tensor  # (B,)
    rate_vz: Tensor
    eta_c: np.ndarray
    eta_v: np.ndarray
    assignment: np.ndarray  # (B, G)
    motion: np.ndarray  # (B, P, 2)
    scores: np.ndarray  # (B, G, N_t)
    codewords: list
    reference: np.ndarray  # the (B, P, L) reference actually used by the encoder

    def surrogate_symbols(self, eta_cfg: EtaConfig):
        """Continuous stand-in for the symbol total: sum of eta * bits (eta frozen)."""
        k = (self.rate_c * self.eta_c).sum(axis=1) + (self.rate_v * self.eta_v).sum(axis=1)
        return k + self.rate_cz * eta_cfg.eta_d_c + self.rate_vz * eta_cfg.eta_d_v

    def ledgers(self, height, width):
        return [ledger(self.k_c[b], self.k_v[b], self.k_cz[b], self.k_vz[b], height, width,
                       side_info_bits=self.codewords[b].header_bits() if self.codewords else 0)
                for b in range(self.k_c.shape[0])]


def _decide(frozen, key, fn):
    if frozen is None:
        return fn()
    if key not in frozen:
        frozen[key] = fn()
    return frozen[key]


class CvstModel:
    """All trainable pieces of the desk codec, sharing one :class:`ParamStore`."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), params: ParamStore | None = None):
        self.cfg = cfg
        self.params = params or ParamStore()
        p = self.params
        rng = SeededRng(cfg.seed, 0xC0DEC)
        L, m, n_tx = cfg.channels, cfg.m, cfg.n_tx
        part = cfg.partition

        basis = _patch_basis(cfg.s, L, rng.spawn("basis"))
        self.enc_w = p.add("sem.enc_w", basis * cfg.latent_gain)
        self.enc_b = p.add("sem.enc_b", np.zeros(L))
        self.dec_w = p.add("sem.dec_w", basis.T / cfg.latent_gain)
        self.dec_b = p.add("sem.dec_b", np.zeros(cfg.patch_dim))

        eye = np.eye(L)
        self.ctx_w1 = p.add("ctx.w1", eye.copy())
        self.ctx_w2 = p.add("ctx.w2", -eye)
        self.dctx_w1 = p.add("dctx.w1", eye.copy())
        self.dctx_w2 = p.add("dctx.w2", np.zeros((L, L)))
        self.rec_w3 = p.add("rec.w3", eye.copy())
        self.rec_w4 = p.add("rec.w4", eye.copy())
        self.rec_r1 = p.add("rec.r1", rng.spawn("r1").normal(0, 1 / np.sqrt(2 * L), (2 * L, cfg.refine_hidden)))
        self.rec_r2 = p.add("rec.r2", np.zeros((cfg.refine_hidden, L)))

        n_lam = len(cfg.lambdas)
        ref_lam = float(np.exp(np.mean(np.log(cfg.lambdas))))
        log_rg = cfg.q_exponent * np.log(ref_lam / np.asarray(cfg.lambdas, dtype=np.float64))
        self.mod_rg = p.add("mod.log_rg", log_rg)
        self.mod_ra = p.add("mod.log_ra", np.zeros((n_lam, L)))
        self.mod_rna = p.add("mod.log_rna", np.zeros((n_lam, L)))

        self.heads = EmbeddingHead(p, part, n_tx, cfg.embed_dim, rng.spawn("map"), prefix="map.")
        self.ent_c = EntropyModel(p, part, n_tx, cfg.hp, cfg.wp, cfg.hyper_channels, cfg.hidden,
                                  rng.spawn("ent_c"), prefix="ent_c.")
        self.ent_v = EntropyModel(p, part, n_tx, cfg.hp, cfg.wp, cfg.hyper_channels, cfg.hidden,
                                  rng.spawn("ent_v"), prefix="ent_v.")
        self.mra = {name: MraLayer(p, L, m, n_tx, cfg.mra_hidden, rng.spawn("mra", name), prefix=f"mra_{name}.")
                    for name in ("enc_c", "dec_c", "enc_v", "dec_v")}

        self.projection = GroupProjection.build(cfg.groups, m, cfg.hp, cfg.wp, cfg.projection, rng.spawn("proj"))
        self.lift = np.zeros((2, L))
        self.lift[np.arange(L) % 2, np.arange(L)] = 1.0
        self._anchor_col = anchor_mask(cfg.hp, cfg.wp).ravel()[:, None]
        self.stage1_done = False

    # -- modulation ------------------------------------------------------

    def lam_index(self, lam) -> int:
        for i, v in enumerate(self.cfg.lambdas):
            if math.isclose(lam, v, rel_tol=1e-9):
                return i
        raise InvalidInput(f"lambda {lam} is not one of the trained values {self.cfg.lambdas}")

    def q_tensors(self, lam_index):
        """(q_a, q_na) tensors of length L for a trained rate point."""
        rg = self.mod_rg[lam_index]
        return (rg + self.mod_ra[lam_index]).exp(), (rg + self.mod_rna[lam_index]).exp()

    def modulation(self, lam) -> ModulationTerm:
        """The rate point for ``lam``; geometric interpolation between trained values."""
        lams = np.asarray(self.cfg.lambdas, dtype=np.float64)
        rg = self.mod_rg.data
        ra, rna = self.mod_ra.data, self.mod_rna.data
        x = np.log(np.clip(lam, lams.min(), lams.max()))
        xs = np.log(lams)
        order = np.argsort(xs)

        def interp(table):
            table = np.asarray(table)
            if table.ndim == 1:
                return np.interp(x, xs[order], table[order])
            return np.array([np.interp(x, xs[order], table[order, c]) for c in range(table.shape[1])])

        return ModulationTerm(float(np.exp(interp(rg))), np.exp(interp(ra)), np.exp(interp(rna)))

    def _divisor(self, q_a, q_na):
        return where(self._anchor_col, q_a.reshape(1, -1), q_na.reshape(1, -1))

    # -- transforms ------------------------------------------------------

    def encode(self, x):
        """(B, 3, H, W) frames -> (B, P, L) latent tensor."""
        return Tensor(patchify(x, self.cfg.s)) @ self.enc_w + self.enc_b

    def decode(self, f):
        """(B, P, L) latent tensor -> (B, 3, H, W) frames clamped to [0, 1]."""
        cfg = self.cfg
        return unpatchify(f @ self.dec_w + self.dec_b, cfg.height, cfg.width, cfg.s).clamp(0.0, 1.0)

    def context(self, cur, pred):
        return cur @ self.ctx_w1 + pred @ self.ctx_w2

    def decoder_context(self, received, pred):
        return received @ self.dctx_w1 + pred @ self.dctx_w2

    def reconstruct(self, ctx, pred):
        refine = (concat([ctx, pred], axis=-1) @ self.rec_r1).tanh() @ self.rec_r2
        return ctx @ self.rec_w3 + pred @ self.rec_w4 + refine

    # -- group projection in tensor form ----------------------------------

    def _to_coefs(self, y):
        """(B, P, L) -> list of (B, d_g) basis coefficients per group."""
        cfg = self.cfg
        B = y.shape[0]
        out = []
        for g in range(cfg.groups):
            grp = y[:, :, g * cfg.m:(g + 1) * cfg.m].transpose(0, 2, 1).reshape(B, cfg.m * cfg.positions)
            out.append(grp @ self.projection.bases[g])
        return out

    def _from_coefs(self, coefs):
        cfg = self.cfg
        B = coefs[0].shape[0]
        groups = [(c @ self.projection.bases[g].T).reshape(B, cfg.m, cfg.positions).transpose(0, 2, 1)
                  for g, c in enumerate(coefs)]
        return concat(groups, axis=-1)

    # -- I frame ---------------------------------------------------------

    def i_frame_tensor(self, x, states, rngs):
        """Differentiable full-rate stand-in for the first frame.

        Group ``g`` rides subchannel ``g mod N_t`` with ``k = k_max``.  Returns the
        decoded latent and frame tensors plus the codewords.
        """
        cfg = self.cfg
        x = np.asarray(x, dtype=np.float64)
        B = x.shape[0]
        coefs = self._to_coefs(self.encode(x))
        k = np.full((B, cfg.groups), self.projection.k_max)
        sub = np.tile(np.arange(cfg.groups) % cfg.n_tx, (B, 1))
        recv, cws = transceive_coefficients(coefs, k, sub, states, [r.spawn("iframe") for r in rngs])
        f_hat = self._from_coefs(recv)
        return f_hat, self.decode(f_hat), cws

    def i_frame(self, x, states, rngs):
        """Array front-end of :meth:`i_frame_tensor`: latents, frames and per-sample ledgers."""
        cfg = self.cfg
        with no_grad():
            f_hat, x_hat, cws = self.i_frame_tensor(x, states, rngs)
        leds = [ledger(cw.ks, [0], 0, 0, cfg.height, cfg.width, side_info_bits=cw.header_bits()) for cw in cws]
        return f_hat.data, x_hat.data, leds

    # -- P frame ---------------------------------------------------------

    def p_frame(self, x_cur, f_ref, lam_index, snr_db, states, rngs, mode="round", frozen=None,
                stage=2, with_ntc=False, disable=(), full_rate=False):
        """One P-frame through encoder, channel and decoder.

        Parameters
        ----------
        x_cur : (B, 3, H, W) frames to send.
        f_ref : (B, P, L) decoded reference latents (what the receiver holds).
        lam_index : which trained rate point to use.
        states, rngs : per-sample ChannelState and random streams.
        mode : "noise" (training proxy) or "round" (evaluation).
        stage : 1 disables modulation and MRA and forces full rate.
        """
        cfg = self.cfg
        x_cur = np.asarray(x_cur, dtype=np.float64)
        f_ref = np.asarray(f_ref, dtype=np.float64)
        B, P, L = x_cur.shape[0], cfg.positions, cfg.channels
        G = cfg.groups
        full_rate = full_rate or stage == 1

        f_cur = self.encode(x_cur)
        v = _decide(frozen, "motion", lambda: _estimate_positions(f_cur.data, f_ref, cfg.hp, cfg.wp, cfg.radius,
                                                                        cfg.motion_bias))
        pred_enc = _compensate_positions(f_ref, v, cfg.hp, cfg.wp)
        c = self.context(f_cur, Tensor(pred_enc))

        if stage == 1:
            q_a = q_na = Tensor(np.ones(L))
        else:
            q_a, q_na = self.q_tensors(lam_index)
        y_c = c / self._divisor(q_a, q_na)
        y_v = Tensor(v.astype(np.float64) @ self.lift)

        def quantize(y, label):
            if mode == "noise":
                return y + Tensor(rngs_stack(rngs, label, y.shape[1:]))
            if mode == "round":
                return Tensor(round_half_away(y.data))
            raise InvalidInput(f"unknown mode {mode!r}")

        yq_c = quantize(y_c, "u_c")
        yq_v = quantize(y_v, "u_v")

        csi = np.stack([canonical_csi_features(s.precoder) for s in states])
        scores = self.heads.scores(c, csi)

        def allocate():
            assign = np.stack([assign_groups(scores.data[b], cfg.n_tx) for b in range(B)])
            eta_c = np.stack([compute_eta(scores.data[b], cfg.eta, "context", assign[b]) for b in range(B)])
            eta_v = np.stack([compute_eta(scores.data[b], cfg.eta, "motion", assign[b]) for b in range(B)])
            return assign, eta_c, eta_v

        assign, eta_c, eta_v = _decide(frozen, "allocation", allocate)

        hz = (cfg.hp + 1) // 2 * ((cfg.wp + 1) // 2)
        zshape = (hz, cfg.hyper_channels)
        _, zt_c, phi_c = self.ent_c.hyper_transform(
            y_c, "noise" if mode == "noise" else "round",
            Tensor(rngs_stack(rngs, "z_c", zshape)) if mode == "noise" else None)
        _, zt_v, phi_v = self.ent_v.hyper_transform(
            y_v, "noise" if mode == "noise" else "round",
            Tensor(rngs_stack(rngs, "z_v", zshape)) if mode == "noise" else None)
        ra_c, rna_c = self.ent_c.rates(yq_c, phi_c, scores, disable)
        ra_v, rna_v = self.ent_v.rates(yq_v, phi_v, scores, disable)
        rate_c, rate_v = ra_c + rna_c, ra_v + rna_v
        rate_cz, rate_vz = self.ent_c.hyper_bits(zt_c), self.ent_v.hyper_bits(zt_v)

        k_max = self.projection.k_max
        hyper_cap = max(hz * cfg.hyper_channels // 2, 1)

        def sizes():
            if full_rate:
                kc = np.full((B, G), k_max)
                kv = np.full((B, G), k_max)
            else:
                kc = np.atleast_2d(bandwidth_cost(rate_c.data, eta_c, k_max))
                kv = np.atleast_2d(bandwidth_cost(rate_v.data, eta_v, k_max))
            kcz = np.atleast_1d(bandwidth_cost(rate_cz.data, cfg.eta.eta_d_c, hyper_cap))
            kvz = np.atleast_1d(bandwidth_cost(rate_vz.data, cfg.eta.eta_d_v, hyper_cap))
            return kc, kv, kcz, kvz

        k_c, k_v, k_cz, k_vz = _decide(frozen, "sizes", sizes)

        use_mra = stage != 1
        cond_c = ConditioningInputs(snr_db, scores, q_a, q_na, cfg.snr_range)
        ones = np.ones(L)
        cond_v = ConditioningInputs(snr_db, scores, ones, ones, cfg.snr_range)
        t_c = self.mra["enc_c"](yq_c, cond_c) if use_mra else yq_c
        t_v = self.mra["enc_v"](yq_v, cond_v) if use_mra else yq_v

        coefs = self._to_coefs(t_c) + self._to_coefs(t_v)
        ks = np.concatenate([k_c, k_v], axis=1)
        subs = np.concatenate([assign, assign], axis=1)
        recv, codewords = transceive_coefficients(coefs, ks, subs, states, [r.spawn("channel") for r in rngs])
        for cw in codewords:
            cw.lam_index = int(lam_index)
        r_c = self._from_coefs(recv[:G])
        r_v = self._from_coefs(recv[G:])

        def receiver(rc, rv):
            if use_mra:
                rc = self.mra["dec_c"](rc, cond_c)
                rv = self.mra["dec_v"](rv, cond_v)
            c_rec = rc * self._divisor(q_a, q_na)
            v_hat = rv @ (self.lift.T / (L / 2))
            pred = soft_compensate(f_ref, v_hat, cfg.hp, cfg.wp, cfg.radius)
            f_hat = self.reconstruct(self.decoder_context(c_rec, pred), pred)
            return f_hat, self.decode(f_hat)

        f_hat, x_hat = receiver(r_c, r_v)
        x_ntc = None
        if with_ntc:
            # no transmission channel: the quantized latents go straight to the receiver
            _, x_ntc = receiver(t_c, t_v)

        return FrameOutput(x_hat, f_hat, x_ntc, k_c, k_v, k_cz, k_vz, rate_c, rate_v, rate_cz, rate_vz,
                           eta_c, eta_v, assign, v, scores.data, codewords, f_ref)


def rngs_stack(rngs, label, shape):
    """U(-1/2, 1/2) draws of ``shape`` per sample, from each sample's ``label`` stream."""
    return np.stack([r.spawn(label).uniform(-0.5, 0.5, shape) for r in rngs])


# -- array front-ends ----------------------------------------------------------


def semantic_codec(data, direction, model: CvstModel):
    """Encode a (3, H, W) frame to an (L, H', W') latent, or decode a latent to a frame."""
    cfg = model.cfg
    with no_grad():
        if direction == "encode":
            x = np.asarray(data, dtype=np.float64)
            if x.shape[-2] % cfg.s or x.shape[-1] % cfg.s:
                raise ShapeMismatch(f"{x.shape} is not divisible by s={cfg.s}")
            f = model.encode(x[None]).data[0]
            return from_positions(f, x.shape[-2] // cfg.s, x.shape[-1] // cfg.s)
        if direction == "decode":
            f = np.asarray(data, dtype=np.float64)
            return model.decode(Tensor(to_positions(f)[None])).data[0]
    raise InvalidInput(f"direction must be 'encode' or 'decode', got {direction!r}")


def generate_context(pred, cur=None, model: CvstModel | None = None, side="encoder", received=None):
    """Context from the current latent and the prediction (encoder), or from the
    received context and the prediction (decoder, which must never see ``cur``)."""
    pred = np.asarray(pred, dtype=np.float64)
    L, h, w = pred.shape
    with no_grad():
        if side == "encoder":
            if cur is None:
                raise InvalidInput("the encoder context needs the current latent")
            out = model.context(Tensor(to_positions(cur)[None]), Tensor(to_positions(pred)[None]))
        elif side == "decoder":
            if cur is not None:
                raise ContractViolation("the decoder cannot read the current frame's latent")
            if received is None:
                raise InvalidInput("the decoder context needs the received context")
            out = model.decoder_context(Tensor(to_positions(received)[None]), Tensor(to_positions(pred)[None]))
        else:
            raise InvalidInput(f"side must be 'encoder' or 'decoder', got {side!r}")
    return from_positions(out.data[0], h, w)


def reconstruct_frame(c_received, pred, model: CvstModel):
    """Regenerated latent ``W3 c + W4 pred + refinement`` in (L, H', W') layout."""
    pred = np.asarray(pred, dtype=np.float64)
    L, h, w = pred.shape
    with no_grad():
        out = model.reconstruct(Tensor(to_positions(c_received)[None]), Tensor(to_positions(pred)[None]))
    return from_positions(out.data[0], h, w)


# -- GoP loop ------------------------------------------------------------------


@dataclass
class GopResult:
    frames: np.ndarray  # (T, 3, H, W) reconstructions
    ledgers: list
    references: list  # latents the encoder used as reference for frames 1..T-1
    decoded_latents: list  # receiver latents for frames 0..T-1
    outputs: list = field(default_factory=list)


def run_gop(frames, model: CvstModel, lam, snr_db, rng: SeededRng, csi="perfect", n_rx=None,
            gop: GopConfig | None = None, pilot_length=None, noise_free=False) -> GopResult:
    """Transmit a clip frame by frame with the decoded-reference loop.

    Frame 0 uses the I-frame stand-in; each later frame is predicted from the
    receiver's reconstruction of its predecessor.
    """
    cfg = model.cfg
    frames = np.asarray(frames, dtype=np.float64)
    T = frames.shape[0]
    if gop is not None and gop.frames != T:
        raise InvalidInput(f"clip has {T} frames, GoP config expects {gop.frames}")
    if T < 2:
        raise InvalidInput("a GoP needs at least two frames")
    spec = ChannelSpec(cfg.n_tx, n_rx or cfg.n_rx, snr_db)
    li = model.lam_index(lam)

    def state(t):
        st = channel_state(rng.spawn("frame", t), spec, csi, pilot_length)
        return noiseless(st) if noise_free else st

    f_hat, x_hat, leds = model.i_frame(frames[:1], [state(0)], [rng.spawn("frame", 0)])
    out_frames = [x_hat[0]]
    ledgers = [leds[0]]
    latents = [f_hat[0]]
    refs, outputs = [], []
    with no_grad():
        for t in range(1, T):
            ref = latents[-1]
            o = model.p_frame(frames[t:t + 1], ref[None], li, snr_db, [state(t)], [rng.spawn("frame", t)],
                              mode="round")
            refs.append(o.reference[0])
            latents.append(o.f_hat.data[0])
            out_frames.append(o.x_hat.data[0])
            ledgers.extend(o.ledgers(cfg.height, cfg.width))
            outputs.append(o)
    return GopResult(np.stack(out_frames), ledgers, refs, latents, outputs)
