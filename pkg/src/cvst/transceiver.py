"""Variable-length rate-adaptive transceiver.

Each channel group is flattened to ``d_g = m H' W'`` reals, rotated into an
orthonormal basis, truncated to its first ``2k`` coefficients and paired into
``k`` unit-power complex symbols.  Groups ride the subchannel their gather
assignment selects; a multi-reference adaptive (MRA) layer conditions the
features on SNR, correlation map and modulation before and after the channel.

The same code path serves training (autodiff tensors) and evaluation: the
channel itself is numeric, and its Jacobian — the per-symbol LMMSE gain under
perfect CSI — is attached explicitly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .allocator import BandwidthLedger, bandwidth_cost, ledger
from .errors import CorruptCodeword, InvalidInput, InvalidRate
from .mimo import NoiseSpec, SvdPrecoder, lmmse_gain, transmit
from .numerics import ParamStore, SeededRng, Tensor, concat, no_grad

SNR_RANGE_DB = (0.0, 14.0)
_SCALE_FLOOR = 1e-12


# -- conditioning --------------------------------------------------------------


def normalize_snr(snr_db, snr_range=SNR_RANGE_DB) -> float:
    """Min-max normalize an SNR onto [0, 1] over the training range (clipped)."""
    lo, hi = snr_range
    return float(np.clip((snr_db - lo) / (hi - lo), 0.0, 1.0))


@dataclass
class ConditioningInputs:
    """What the MRA layer is told about the link.

    ``scores`` is the (B, G, N_t) correlation map, ``q_a``/``q_na`` the
    per-channel modulation (length L); tensors or arrays.
    """

    snr_db: float
    scores: object
    q_a: object
    q_na: object
    snr_range: tuple = SNR_RANGE_DB

    @property
    def nu(self) -> float:
        return normalize_snr(self.snr_db, self.snr_range)


def _const(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class MraLayer:
    """Residual conditioning ``f -> (f (1 + gamma) + beta) (1 + gate)``.

    ``(gamma, beta)`` per channel come from a small tanh network on
    ``[nu, map row of the channel's group, log q_a, log q_na, channel mean]``;
    the spatial gate comes from channel-wise mean and max pooling.  Both output
    layers start at zero, so a fresh layer is the identity.
    """

    def __init__(self, params: ParamStore, channels: int, m: int, n_tx: int, hidden=8,
                 rng: SeededRng | None = None, prefix="mra."):
        rng = rng or SeededRng(0)
        self.channels, self.m, self.n_tx = channels, m, n_tx
        n_in = 4 + n_tx
        self.w1 = params.add(prefix + "w1", rng.normal(0, 1 / np.sqrt(n_in), (n_in, hidden)))
        self.b1 = params.add(prefix + "b1", np.zeros(hidden))
        self.w2 = params.add(prefix + "w2", np.zeros((hidden, 2)))
        self.b2 = params.add(prefix + "b2", np.zeros(2))
        self.ws = params.add(prefix + "ws", np.zeros((2, 1)))
        self.bs = params.add(prefix + "bs", np.zeros(1))

    def features(self, f, cond: ConditioningInputs):
        B, P, L = f.shape
        ones = np.ones((B, L, 1))
        rows = _const(cond.scores)[:, np.arange(L) // self.m, :]  # (B, L, N_t)
        log_qa = _const(cond.q_a).log().reshape(1, L, 1) * ones
        log_qn = _const(cond.q_na).log().reshape(1, L, 1) * ones
        mean = f.mean(axis=1).reshape(B, L, 1)
        return concat([Tensor(ones * cond.nu), rows, log_qa, log_qn, mean], axis=-1)

    def __call__(self, f, cond: ConditioningInputs):
        """``f``: (B, P, L) tensor -> conditioned tensor of the same shape."""
        B, P, L = f.shape
        h = (self.features(f, cond) @ self.w1 + self.b1).tanh()
        gb = h @ self.w2 + self.b2
        gamma = gb[:, :, 0].reshape(B, 1, L)
        beta = gb[:, :, 1].reshape(B, 1, L)
        g = f * (gamma + 1.0) + beta
        pooled = concat([g.mean(axis=2, keepdims=True), g.max(axis=2, keepdims=True)], axis=-1)
        gate = (pooled @ self.ws + self.bs).tanh()
        return g * (gate + 1.0)


def mra_condition(f, cond: ConditioningInputs, layer: MraLayer):
    """Array front-end: ``f`` of shape (L, H', W') conditioned by ``layer``."""
    f = np.asarray(f, dtype=np.float64)
    L, h, w = f.shape
    with no_grad():
        out = layer(Tensor(f.reshape(L, -1).T[None]), cond).data[0]
    return out.T.reshape(L, h, w)


# -- projection ----------------------------------------------------------------


def _dct_matrix(n):
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    D = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    D[0] /= np.sqrt(2.0)
    return D  # rows are basis vectors


def dct_basis(m, height, width) -> np.ndarray:
    """Orthonormal (d, d) basis for vec(m, H', W'), columns ordered low frequency first.

    Column ``r * m + c`` is spatial frequency number ``r`` (ordered by
    ``u + v``, then ``u``) on channel ``c``.
    """
    Dh, Dw = _dct_matrix(height), _dct_matrix(width)
    freqs = sorted(((u, v) for u in range(height) for v in range(width)), key=lambda t: (t[0] + t[1], t[0]))
    d = m * height * width
    basis = np.zeros((d, d))
    col = 0
    for u, v in freqs:
        spatial = np.outer(Dh[u], Dw[v]).ravel()
        for c in range(m):
            basis[c * height * width:(c + 1) * height * width, col] = spatial
            col += 1
    return basis


def random_basis(d, rng: SeededRng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


@dataclass(frozen=True)
class GroupProjection:
    """Per-group orthonormal bases ``P_g`` acting on vec(m, H', W')."""

    bases: tuple
    m: int
    height: int
    width: int

    @classmethod
    def build(cls, groups, m, height, width, kind="dct", rng: SeededRng | None = None):
        if kind == "dct":
            b = dct_basis(m, height, width)
            bases = (b,) * groups
        elif kind == "random":
            rng = rng or SeededRng(0)
            bases = tuple(random_basis(m * height * width, rng.spawn("proj", g)) for g in range(groups))
        else:
            raise InvalidInput(f"unknown projection kind {kind!r}")
        return cls(bases, m, height, width)

    @property
    def dim(self) -> int:
        return self.m * self.height * self.width

    @property
    def k_max(self) -> int:
        return self.dim // 2


def symbol_scale(kept, k) -> float:
    """float32-representable amplitude making the ``k`` symbols unit mean power."""
    alpha = np.sqrt(np.sum(np.square(kept)) / k)
    return float(np.float32(max(alpha, _SCALE_FLOOR)))


def encode_group(g, k: int, basis) -> tuple[np.ndarray, float]:
    """``k`` unit-power complex symbols and the amplitude needed to undo the scaling."""
    g = np.asarray(g, dtype=np.float64)
    d = basis.shape[0]
    if not 1 <= k <= d // 2:
        raise InvalidRate(f"k={k} outside [1, {d // 2}]")
    kept = (basis.T @ g.ravel())[: 2 * k]
    alpha = symbol_scale(kept, k)
    return (kept[0::2] + 1j * kept[1::2]) / alpha, alpha


def decode_group(symbols, scale: float, basis, shape) -> np.ndarray:
    symbols = np.asarray(symbols)
    d = basis.shape[0]
    k = symbols.size
    if not 1 <= k <= d // 2:
        raise InvalidRate(f"k={k} outside [1, {d // 2}]")
    coef = np.zeros(d)
    coef[0:2 * k:2] = symbols.real * scale
    coef[1:2 * k:2] = symbols.imag * scale
    return (basis @ coef).reshape(shape)


def project_group(g, k, proj: GroupProjection, direction="encode", index=0, scale=None):
    """Encode a (m, H', W') group to ``k`` symbols, or decode symbols back to a group."""
    basis = proj.bases[index]
    if direction == "encode":
        return encode_group(g, k, basis)
    if direction == "decode":
        if scale is None:
            raise InvalidInput("decoding needs the symbol scale")
        return decode_group(g, scale, basis, (proj.m, proj.height, proj.width))
    raise InvalidInput(f"direction must be 'encode' or 'decode', got {direction!r}")


# -- codewords -----------------------------------------------------------------


@dataclass
class Codeword:
    """Header ``(k_i, lambda index, assignment, scales)`` plus per-group symbols."""

    ks: tuple
    lam_index: int
    assignment: tuple
    scales: tuple
    symbols: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.ks)
        if len(self.assignment) != n or len(self.scales) != n or len(self.symbols) != n:
            raise CorruptCodeword("header and payload disagree on the group count")
        for k, s in zip(self.ks, self.symbols):
            if len(s) != k:
                raise CorruptCodeword(f"group carries {len(s)} symbols, header says {k}")

    @property
    def total_symbols(self) -> int:
        return int(sum(self.ks))

    def header_bits(self) -> int:
        return 32 * (2 + 3 * len(self.ks))

    def to_bytes(self) -> bytes:
        n = len(self.ks)
        scale_bits = np.asarray(self.scales, dtype="<f4").view("<u4")
        header = struct.pack(f"<{2 + 3 * n}I", n, *self.ks, self.lam_index, *self.assignment, *scale_bits)
        payload = np.concatenate([np.asarray(s, dtype=complex) for s in self.symbols]) if n else np.zeros(0, complex)
        pairs = np.empty(2 * payload.size, dtype="<f8")
        pairs[0::2] = payload.real
        pairs[1::2] = payload.imag
        return header + pairs.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Codeword":
        if len(blob) < 4:
            raise CorruptCodeword("truncated header")
        (n,) = struct.unpack_from("<I", blob)
        hlen = 4 * (2 + 3 * n)
        if len(blob) < hlen:
            raise CorruptCodeword("truncated header")
        words = struct.unpack_from(f"<{2 + 3 * n}I", blob)
        ks = tuple(words[1:1 + n])
        lam_index = words[1 + n]
        assignment = tuple(words[2 + n:2 + 2 * n])
        scales = tuple(float(s) for s in np.asarray(words[2 + 2 * n:], dtype="<u4").view("<f4"))
        body = blob[hlen:]
        if len(body) != 16 * sum(ks):
            raise CorruptCodeword(f"payload holds {len(body)} bytes, header implies {16 * sum(ks)}")
        pairs = np.frombuffer(body, dtype="<f8")
        flat = pairs[0::2] + 1j * pairs[1::2]
        cuts = np.cumsum(ks)[:-1]
        return cls(ks, lam_index, assignment, scales, list(np.split(flat, cuts)) if n else [])


# -- channel pass --------------------------------------------------------------


@dataclass(frozen=True)
class ChannelState:
    """One frame's link: true channel, precoder from the acquired estimate, noise."""

    H: np.ndarray
    precoder: SvdPrecoder
    noise: NoiseSpec
    perfect_csi: bool = True


def _channel_pass(coefs, ks, subchannels, state: ChannelState, rng: SeededRng, lmmse=True,
                  round_scale=True):
    """Send truncated coefficient vectors (1-D arrays) over the MIMO link.

    Returns received coefficient vectors (zero beyond ``2k``), the per-coefficient
    LMMSE gains and the codeword that was sent.  With ``round_scale=False`` the
    amplitude is used at full precision (the header still stores it as float32).
    """
    n_sub = state.precoder.n_sub
    streams = [[] for _ in range(n_sub)]
    offsets = [0] * n_sub
    slots, syms, scales = [], [], []
    for c, k, j in zip(coefs, ks, subchannels):
        kept = c[: 2 * k]
        alpha = symbol_scale(kept, k) if round_scale else max(float(np.sqrt(np.sum(kept ** 2) / k)), _SCALE_FLOOR)
        s = (kept[0::2] + 1j * kept[1::2]) / alpha
        slots.append((j, offsets[j]))
        offsets[j] += k
        streams[j].append(s)
        syms.append(s)
        scales.append(alpha)
    sent = [np.concatenate(s) if s else np.zeros(0, complex) for s in streams]
    rx = transmit(sent, state.H, state.precoder, state.noise, rng)
    gain = lmmse_gain(state.precoder, state.noise) if lmmse else np.ones(n_sub)
    outs, gains = [], []
    for c, k, (j, off), alpha in zip(coefs, ks, slots, scales):
        r = rx[j][off:off + k] * gain[j] * alpha
        out = np.zeros_like(c)
        out[0:2 * k:2] = r.real
        out[1:2 * k:2] = r.imag
        gvec = np.zeros_like(c)
        gvec[: 2 * k] = gain[j]
        outs.append(out)
        gains.append(gvec)
    cw = Codeword(tuple(int(k) for k in ks), 0, tuple(int(j) for j in subchannels), tuple(scales), syms)
    return outs, gains, cw


def transceive_coefficients(coefs, ks, subchannels, states, rngs, lmmse=True):
    """Batched, differentiable channel pass over projected groups.

    Parameters
    ----------
    coefs : list of tensors (B, d)
        Basis coefficients per group (already in transmit order).
    ks, subchannels : int arrays (B, n_groups)
    states, rngs : per-sample ChannelState and SeededRng

    Returns
    -------
    list of received coefficient tensors (B, d), list of Codewords (one per sample)
    """
    B = coefs[0].shape[0]
    n = len(coefs)
    ks = np.asarray(ks)
    recv_np = [np.zeros(c.shape) for c in coefs]
    gain_np = [np.zeros(c.shape) for c in coefs]
    codewords = []
    for b in range(B):
        outs, gains, cw = _channel_pass([c.data[b] for c in coefs], ks[b], subchannels[b],
                                        states[b], rngs[b], lmmse, round_scale=False)
        for i in range(n):
            recv_np[i][b] = outs[i]
            gain_np[i][b] = gains[i]
        codewords.append(cw)
    received = []
    for i, (c, r, g) in enumerate(zip(coefs, recv_np, gain_np)):
        # signal part: derivative = LMMSE gain (exact under perfect CSI); the noise
        # part is a fixed unit-power draw scaled by the data-dependent amplitude
        d = c.shape[1]
        k = ks[:, i].astype(np.float64)
        keep = (np.arange(d)[None, :] < 2 * k[:, None]).astype(np.float64)
        # clamp before the root so an all-zero group (e.g. a still motion field) has a finite gradient
        alpha = (((c * c) * keep).sum(axis=1) / k).clamp(_SCALE_FLOOR ** 2, None).sqrt()
        linear = c * g
        unit = (r - linear.data) / alpha.data[:, None]
        received.append(linear + Tensor(unit) * alpha.reshape(B, 1))
    return received, codewords


@dataclass
class StreamPayload:
    """One stream's groups as (m, H', W') arrays with their rates and eta values."""

    groups: list
    rates: np.ndarray
    etas: np.ndarray


def transceive_payload(payloads, assignment, proj: GroupProjection, state: ChannelState, rng: SeededRng,
                       hyper_symbols=(0, 0), height=None, width=None, lam_index=0, lmmse=True):
    """Array front-end: size, encode, route, transmit and decode the groups of a frame.

    ``payloads`` is a list of :class:`StreamPayload` (context first, then motion);
    every stream uses ``assignment`` to choose subchannels.  Frame dimensions
    ``height``/``width`` (pixels) are needed for the CBR entry of the ledger.

    Returns decoded groups per stream, the ledger and the sent codeword.
    """
    assignment = np.asarray(assignment, dtype=int)
    coefs, ks, subs, index = [], [], [], []
    for s, p in enumerate(payloads):
        if len(p.groups) != assignment.size:
            raise InvalidInput(f"{len(p.groups)} groups but {assignment.size} assignments")
        k = np.atleast_1d(bandwidth_cost(p.rates, p.etas, proj.k_max))
        for g, grp in enumerate(p.groups):
            coefs.append(proj.bases[g].T @ np.asarray(grp, dtype=np.float64).ravel())
            ks.append(int(k[g]))
            subs.append(int(assignment[g]))
            index.append((s, g))
    outs, _, cw = _channel_pass(coefs, ks, subs, state, rng, lmmse)
    cw.lam_index = lam_index
    decoded = [[None] * len(p.groups) for p in payloads]
    for (s, g), r in zip(index, outs):
        decoded[s][g] = (proj.bases[g] @ r).reshape(proj.m, proj.height, proj.width)
    n_c = len(payloads[0].groups)
    k_c = ks[:n_c]
    k_v = ks[n_c:] if len(payloads) > 1 else [0]
    led = ledger(k_c, k_v, hyper_symbols[0], hyper_symbols[1], height or proj.height, width or proj.width,
                 side_info_bits=cw.header_bits())
    return decoded, led, cw


__all__ = [
    "BandwidthLedger", "ChannelState", "Codeword", "ConditioningInputs", "GroupProjection", "MraLayer",
    "StreamPayload", "dct_basis", "decode_group", "encode_group", "mra_condition", "normalize_snr",
    "project_group", "random_basis", "symbol_scale", "transceive_coefficients", "transceive_payload",
]
