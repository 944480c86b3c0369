"""Counter-based seeded random streams.

Every consumer of randomness gets its own ``(seed, stream)`` pair so that a
frame's channel draw never depends on how many numbers another component
consumed before it.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_id(*parts) -> int:
    """Derive a 64-bit stream id from a tuple of labels, e.g. ``("frame", 3, "noise")``."""
    digest = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class SeededRng:
    """A Philox-backed generator keyed by ``(seed, stream)``.

    Identical keys reproduce identical draw sequences byte for byte.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = self.seed | (self.stream << 64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream={self.stream})"

    def spawn(self, *labels) -> "SeededRng":
        """Independent child stream named by ``labels`` (does not consume draws)."""
        return SeededRng(self.seed, stream_id(self.stream, *labels))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def complex_normal(self, size, variance=1.0):
        """Circularly-symmetric complex Gaussian with E|x|^2 = ``variance``."""
        s = np.sqrt(variance / 2.0)
        return self._gen.normal(0.0, s, size) + 1j * self._gen.normal(0.0, s, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def permutation(self, x):
        return self._gen.permutation(x)
