"""Rayleigh MIMO channels with SVD precoding and LS channel estimation.

The transmitter precodes subchannel streams with ``V`` of the *acquired*
channel estimate; the receiver applies ``Lambda^-1 U^H``.  With perfect CSI
this turns the channel into independent scalar subchannels whose noise is
amplified by ``1 / lambda_j^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput, SingularPilotMatrix, SubchannelDegenerate
from .numerics import SeededRng, svd_complex

DEGENERATE_GAIN = 1e-9
SNR_CAP_DB = 200.0


@dataclass(frozen=True)
class ChannelSpec:
    n_tx: int = 8
    n_rx: int = 8
    snr_db: float = 10.0
    symbol_power: float = 1.0

    def __post_init__(self):
        if self.n_tx < 1 or self.n_rx < self.n_tx:
            raise InvalidInput(f"need 1 <= n_tx <= n_rx, got {self.n_tx}x{self.n_rx}")
        if not math.isfinite(self.snr_db):
            raise InvalidInput("snr_db must be finite")

    @property
    def sigma2(self) -> float:
        # SNR = 10 log10(P / sigma^2), referenced to the transmit symbol power
        return self.symbol_power / 10.0 ** (self.snr_db / 10.0)

    def noise(self) -> "NoiseSpec":
        return NoiseSpec(self.sigma2)


@dataclass(frozen=True)
class NoiseSpec:
    sigma2: float

    def __post_init__(self):
        if not self.sigma2 >= 0:
            raise InvalidInput(f"sigma2 must be >= 0, got {self.sigma2}")


@dataclass(frozen=True)
class SvdPrecoder:
    """Factors of the acquired channel: ``H_acq ~= U diag(lam) V^H``."""

    U: np.ndarray
    lam: np.ndarray
    V: np.ndarray

    @classmethod
    def from_channel(cls, H) -> "SvdPrecoder":
        U, lam, V = svd_complex(H)
        return cls(U, lam, V)

    @property
    def n_sub(self) -> int:
        return int(self.lam.size)

    def usable(self) -> np.ndarray:
        return self.lam >= DEGENERATE_GAIN


def sample_rayleigh(rng: SeededRng, spec: ChannelSpec) -> np.ndarray:
    """i.i.d. CN(0, 1) entries, shape (n_rx, n_tx)."""
    return rng.complex_normal((spec.n_rx, spec.n_tx), variance=1.0)


def transmit(symbols, H, precoder: SvdPrecoder, noise: NoiseSpec, rng: SeededRng):
    """Send one complex stream per subchannel through ``H``.

    Parameters
    ----------
    symbols : sequence of 1-D complex arrays
        Stream ``j`` rides subchannel ``j``; streams may differ in length (the
        shorter ones are padded with silence) and may be empty.
    H : ndarray (n_rx, n_tx)
        The true channel.
    precoder : SvdPrecoder
        Derived from the channel estimate available to both ends.

    Returns
    -------
    list of complex arrays, ``Lambda^-1 U^H (H V s + n)`` restricted to each
    stream's original length.
    """
    H = np.asarray(H)
    n_sub = precoder.n_sub
    if len(symbols) > n_sub:
        raise InvalidInput(f"{len(symbols)} streams for {n_sub} subchannels")
    lengths = [len(s) for s in symbols]
    for j, n in enumerate(lengths):
        if n and precoder.lam[j] < DEGENERATE_GAIN:
            raise SubchannelDegenerate(f"subchannel {j} gain {precoder.lam[j]:.3g} carries {n} symbols")
    T = max(lengths, default=0)
    if T == 0:
        return [np.zeros(0, dtype=complex) for _ in symbols]
    S = np.zeros((n_sub, T), dtype=complex)
    for j, s in enumerate(symbols):
        S[j, : len(s)] = s
    Y = H @ (precoder.V @ S)
    if noise.sigma2 > 0:
        Y = Y + rng.complex_normal(Y.shape, variance=noise.sigma2)
    inv = np.where(precoder.usable(), 1.0 / np.maximum(precoder.lam, DEGENERATE_GAIN), 0.0)
    R = inv[:, None] * (precoder.U.conj().T @ Y)
    return [R[j, :n].copy() for j, n in enumerate(lengths)]


def lmmse_gain(precoder: SvdPrecoder, noise: NoiseSpec, power=1.0) -> np.ndarray:
    """Per-subchannel factor turning the zero-forcing output into the LMMSE estimate."""
    g = power * precoder.lam**2
    return g / (g + noise.sigma2) if noise.sigma2 > 0 else np.ones_like(g)


def orthogonal_pilots(n_tx: int, length: int | None = None) -> np.ndarray:
    """DFT pilot block (n_tx, length) with unit-modulus entries and P P^H = length I."""
    length = n_tx if length is None else length
    if length < n_tx:
        raise InvalidInput("pilot length must be >= n_tx")
    k = np.arange(n_tx)[:, None] * np.arange(length)[None, :]
    return np.exp(-2j * np.pi * k / length)


def send_pilots(H, pilots, noise: NoiseSpec, rng: SeededRng):
    Y = np.asarray(H) @ pilots
    if noise.sigma2 > 0:
        Y = Y + rng.complex_normal(Y.shape, variance=noise.sigma2)
    return Y


def ls_estimate(pilots, received_pilots, noise: NoiseSpec | None = None) -> np.ndarray:
    """Least-squares estimate ``Y P^H (P P^H)^-1``."""
    P = np.asarray(pilots)
    Y = np.asarray(received_pilots)
    if P.shape[1] < P.shape[0]:
        raise SingularPilotMatrix("pilot length shorter than the antenna count")
    gram = P @ P.conj().T
    sv = np.linalg.svd(gram, compute_uv=False)
    if sv[-1] <= 1e-10 * max(sv[0], 1e-300):
        raise SingularPilotMatrix("pilot matrix is rank deficient")
    return Y @ P.conj().T @ np.linalg.inv(gram)


def subchannel_snr(precoder: SvdPrecoder, noise: NoiseSpec, power=1.0) -> np.ndarray:
    """Effective per-subchannel SNR in dB, ``10 log10(P lam_j^2 / sigma^2)``."""
    if noise.sigma2 == 0:
        return np.full(precoder.n_sub, SNR_CAP_DB)
    with np.errstate(divide="ignore"):
        snr = 10.0 * np.log10(power * precoder.lam**2 / noise.sigma2)
    return np.minimum(snr, SNR_CAP_DB)
