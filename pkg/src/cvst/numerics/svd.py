"""Complex singular value decomposition by one-sided Jacobi rotations."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidInput

MAX_DIM = 32
TOL = 1e-12
MAX_SWEEPS = 100


def _round_robin(n):
    """Rounds of disjoint column pairs covering every pair once (circle method)."""
    idx = list(range(n)) + ([-1] if n % 2 else [])
    m = len(idx)
    rounds = []
    for _ in range(m - 1):
        pairs = [(idx[i], idx[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        if pairs:
            rounds.append((np.array([p for p, _ in pairs]), np.array([q for _, q in pairs])))
        idx = [idx[0]] + [idx[-1]] + idx[1:-1]
    return rounds


def _complete_columns(U, bad):
    """Replace the columns flagged in ``bad`` with an orthonormal completion."""
    n = U.shape[0]
    good = [j for j in range(U.shape[1]) if not bad[j]]
    basis = [U[:, j] for j in good]
    out = U.copy()
    cand = 0
    for j in np.flatnonzero(bad):
        while True:
            e = np.zeros(n, dtype=complex)
            e[cand % n] = 1.0
            cand += 1
            for b in basis:
                e = e - b * np.vdot(b, e)
            for b in basis:  # second pass for stability
                e = e - b * np.vdot(b, e)
            nrm = np.linalg.norm(e)
            if nrm > 1e-6:
                e = e / nrm
                break
        out[:, j] = e
        basis.append(e)
    return out


def _jacobi_tall(A):
    rows, cols = A.shape
    G = A.astype(complex, copy=True)
    V = np.eye(cols, dtype=complex)
    rounds = _round_robin(cols)
    scale = max(float(np.sum(np.abs(A) ** 2)), 1e-300)
    floor = 1e-30 * scale
    for _ in range(MAX_SWEEPS):
        rotated = False
        for P, Q in rounds:
            gp, gq = G[:, P], G[:, Q]
            alpha = np.sum(np.abs(gp) ** 2, axis=0)
            beta = np.sum(np.abs(gq) ** 2, axis=0)
            gamma = np.sum(np.conj(gp) * gq, axis=0)
            mag = np.abs(gamma)
            active = mag > np.maximum(TOL * np.sqrt(alpha * beta), floor)
            if not active.any():
                continue
            rotated = True
            safe = np.where(active, mag, 1.0)
            phase = np.where(active, gamma / safe, 1.0)
            zeta = (beta - alpha) / (2.0 * safe)
            sgn = np.where(zeta >= 0, 1.0, -1.0)
            t = sgn / (np.abs(zeta) + np.sqrt(1.0 + zeta**2))
            c = 1.0 / np.sqrt(1.0 + t**2)
            s = c * t
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)
            gq2 = gq * np.conj(phase)
            G[:, P] = c * gp - s * gq2
            G[:, Q] = s * gp + c * gq2
            vp, vq2 = V[:, P], V[:, Q] * np.conj(phase)
            V[:, P] = c * vp - s * vq2
            V[:, Q] = s * vp + c * vq2
        if not rotated:
            break
    sv = np.linalg.norm(G, axis=0)
    order = np.argsort(-sv, kind="stable")
    sv, G, V = sv[order], G[:, order], V[:, order]
    bad = sv <= 1e-13 * max(sv[0] if sv.size else 0.0, 1e-300)
    U = G / np.where(bad, 1.0, sv)
    if bad.any():
        U = _complete_columns(U, bad)
        sv = np.where(bad, 0.0, sv)
    return U, sv, V


def svd_complex(A):
    """Thin SVD ``A = U @ diag(sv) @ V^H`` of a complex matrix.

    Parameters
    ----------
    A : array_like, shape (rows, cols), rows and cols <= 32

    Returns
    -------
    U : ndarray (rows, k) with orthonormal columns, k = min(rows, cols)
    sv : ndarray (k,) non-negative, sorted descending
    V : ndarray (cols, k) with orthonormal columns
    """
    A = np.asarray(A)
    if A.ndim != 2 or A.size == 0:
        raise InvalidInput(f"expected a non-empty matrix, got shape {A.shape}")
    if max(A.shape) > MAX_DIM:
        raise InvalidInput(f"matrix {A.shape} exceeds the {MAX_DIM}x{MAX_DIM} limit")
    if not np.all(np.isfinite(A)):
        raise InvalidInput("matrix has non-finite entries")
    if A.shape[0] >= A.shape[1]:
        return _jacobi_tall(A)
    U, sv, V = _jacobi_tall(A.conj().T)
    return V, sv, U
