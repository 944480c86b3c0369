"""CSI-aware rate allocation.

Groups are matched to subchannels gather by gather with the Hungarian method;
the matched correlation weight scales each group's default bits-to-symbols
factor eta, which is then clipped to a per-stream range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput

MAX_ASSIGN = 64


@dataclass(frozen=True)
class Assignment:
    """``perm[i]`` is the column (subchannel) matched to row (group) ``i``."""

    perm: tuple
    value: float

    def __post_init__(self):
        if sorted(self.perm) != list(range(len(self.perm))):
            raise InvalidInput(f"{self.perm} is not a permutation")


def _min_cost_assignment(cost):
    """Shortest-augmenting-path Hungarian method. Returns (row->col, u, v)."""
    n = cost.shape[0]
    INF = math.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)  # p[j]: row matched to column j (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta, j1 = INF, 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta, j1 = minv[j], j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    row_to_col = np.empty(n, dtype=int)
    for j in range(1, n + 1):
        row_to_col[p[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _has_perfect_matching(adj, rows, cols):
    """Kuhn's augmenting paths restricted to the given row/column subsets."""
    match = {}

    def try_row(r, seen):
        for c in adj[r]:
            if c in cols and c not in seen:
                seen.add(c)
                if c not in match or try_row(match[c], seen):
                    match[c] = r
                    return True
        return False

    return all(try_row(r, set()) for r in rows)


def _objective(W, perm):
    return math.fsum(W[i, j] for i, j in enumerate(perm))


def hungarian(W, maximize=True) -> Assignment:
    """Optimal linear assignment on a square matrix.

    Among optimal permutations the lexicographically smallest one is returned,
    so results do not depend on the internal search order.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1] or W.shape[0] == 0:
        raise InvalidInput(f"expected a non-empty square matrix, got {W.shape}")
    n = W.shape[0]
    if n > MAX_ASSIGN:
        raise InvalidInput(f"n={n} exceeds {MAX_ASSIGN}")
    if not np.all(np.isfinite(W)):
        raise InvalidInput("weights must be finite")
    cost = -W if maximize else W
    base, u, v = _min_cost_assignment(cost)
    best = tuple(int(c) for c in base)
    # optimal assignments are exactly the perfect matchings on tight edges
    tol = 1e-9 * (1.0 + float(np.abs(W).max()))
    tight = np.abs(cost - u[:, None] - v[None, :]) <= tol
    if tight.sum() > n:
        adj = [list(np.flatnonzero(tight[i])) for i in range(n)]
        free = set(range(n))
        chosen = []
        for i in range(n):
            for c in adj[i]:
                if c in free and _has_perfect_matching(adj, range(i + 1, n), free - {c}):
                    chosen.append(int(c))
                    free.discard(c)
                    break
            else:
                chosen = None
                break
        if chosen is not None:
            ok = _objective(W, chosen) >= _objective(W, best) if maximize else \
                _objective(W, chosen) <= _objective(W, best)
            if ok:
                best = tuple(chosen)
    return Assignment(best, _objective(W, best))


@dataclass(frozen=True)
class EtaConfig:
    eta_d_c: float = 0.4
    eta_d_v: float = 0.11
    range_c: tuple = (0.25, 0.55)
    range_v: tuple = (0.07, 0.15)

    def __post_init__(self):
        for name in ("range_c", "range_v"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise InvalidInput(f"{name} must satisfy 0 < min <= max, got {(lo, hi)}")
        if self.eta_d_c <= 0 or self.eta_d_v <= 0:
            raise InvalidInput("default eta values must be positive")

    def default(self, stream: str) -> float:
        return {"context": self.eta_d_c, "motion": self.eta_d_v}[stream]

    def bounds(self, stream: str) -> tuple:
        return {"context": self.range_c, "motion": self.range_v}[stream]


def assign_groups(scores, n_tx: int) -> np.ndarray:
    """Subchannel index for every group, solving each gather independently."""
    scores = np.asarray(scores, dtype=np.float64)
    G = scores.shape[0]
    if scores.shape[1] != n_tx or G % n_tx:
        raise InvalidInput(f"map {scores.shape} is not a stack of {n_tx}x{n_tx} gathers")
    out = np.empty(G, dtype=int)
    for g in range(G // n_tx):
        rows = slice(g * n_tx, (g + 1) * n_tx)
        out[rows] = hungarian(scores[rows], maximize=True).perm
    return out


def compute_eta(scores, cfg: EtaConfig, stream: str, assignment=None) -> np.ndarray:
    """Per-group eta = clip(eta_d * m[i, s(i)] * N_t) on the stream's range."""
    scores = np.asarray(getattr(scores, "scores", scores), dtype=np.float64)
    n_tx = scores.shape[1]
    if assignment is None:
        assignment = assign_groups(scores, n_tx)
    weight = scores[np.arange(scores.shape[0]), assignment]
    lo, hi = cfg.bounds(stream)
    return np.clip(cfg.default(stream) * weight * n_tx, lo, hi)


def bandwidth_cost(r, eta, k_max: int):
    """Complex symbols for ``r`` bits: ``min(max(ceil(eta r), 1), k_max)``."""
    r = np.asarray(r, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    if np.any(r < 0) or np.any(eta <= 0):
        raise InvalidInput("need r >= 0 and eta > 0")
    k = np.minimum(np.maximum(np.ceil(eta * r), 1), k_max).astype(int)
    return int(k) if k.ndim == 0 else k


@dataclass(frozen=True)
class BandwidthLedger:
    k_c: int
    k_v: int
    k_cz: int
    k_vz: int
    k_total: int
    cbr: float
    side_info_bits: int = 0


def ledger(k_c_groups, k_v_groups, k_cz: int, k_vz: int, height: int, width: int,
           side_info_bits: int = 0) -> BandwidthLedger:
    """Sum the per-stream symbol counts; CBR is relative to the 3*H*W source samples."""
    counts = [int(np.sum(k_c_groups)), int(np.sum(k_v_groups)), int(k_cz), int(k_vz)]
    if min(counts) < 0:
        raise InvalidInput("symbol counts must be non-negative")
    total = sum(counts)
    return BandwidthLedger(*counts, k_total=total, cbr=total / (3.0 * height * width),
                           side_info_bits=int(side_info_bits))
