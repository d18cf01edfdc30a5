"""3x3 singular value decomposition by one-sided Jacobi rotations."""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError, NumericError

MAX_SWEEPS = 100
_PAIRS = ((0, 1), (0, 2), (1, 2))


def svd3(m) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(U, S, V)`` with ``m = U @ diag(S) @ V.T``.

    Columns of ``m @ V`` are orthogonalised by plane rotations until every
    pair is orthogonal to working precision. Singular values come back
    sorted in descending order. Columns of ``U`` belonging to (numerically)
    zero singular values are completed to an orthonormal basis.
    """
    a = np.array(m, dtype=np.float64)
    if a.shape != (3, 3):
        raise DimensionError(f"svd3 expects a 3x3 matrix, got {a.shape}")
    if not np.isfinite(a).all():
        raise NumericError("svd3: non-finite input")

    # work at unit scale so squared column norms neither overflow nor go subnormal
    scale = np.abs(a).max()
    if scale == 0.0:
        return np.eye(3), np.zeros(3), np.eye(3)
    b = a / scale
    v = np.eye(3)
    eps = np.finfo(np.float64).eps
    # couplings below this are at working precision relative to the whole matrix
    floor = eps * eps * (b * b).sum()
    for _ in range(MAX_SWEEPS):
        rotated = False
        for p, q in _PAIRS:
            alpha = b[:, p] @ b[:, p]
            beta = b[:, q] @ b[:, q]
            gamma = b[:, p] @ b[:, q]
            if abs(gamma) <= max(eps * np.sqrt(alpha) * np.sqrt(beta), floor):
                continue
            rotated = True
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.copysign(1.0, zeta) / (abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            bp, bq = b[:, p].copy(), b[:, q].copy()
            b[:, p], b[:, q] = c * bp - s * bq, s * bp + c * bq
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break
    else:
        raise NumericError(f"svd3: no convergence after {MAX_SWEEPS} sweeps")

    sv = np.sqrt((b * b).sum(axis=0))
    order = np.argsort(-sv, kind="stable")
    sv, b, v = sv[order], b[:, order], v[:, order]
    u = _left_vectors(b, sv, eps)
    return u, sv * scale, v


def _left_vectors(b: np.ndarray, sv: np.ndarray, eps: float) -> np.ndarray:
    """Normalised columns of ``b``, completed to an orthonormal basis."""
    u = np.zeros((3, 3))
    tiny = sv[0] * 3 * eps if sv[0] > 0 else 0.0
    for i in range(3):
        col = b[:, i] / sv[i] if sv[i] > tiny else _fresh_direction(u[:, :i])
        # modified Gram-Schmidt against the columns already fixed
        for j in range(i):
            col = col - (u[:, j] @ col) * u[:, j]
        norm = np.linalg.norm(col)
        if norm < 0.5:
            col = _fresh_direction(u[:, :i])
            norm = np.linalg.norm(col)
        u[:, i] = col / norm
    return u


def _fresh_direction(basis: np.ndarray) -> np.ndarray:
    """A unit vector orthogonal to the (orthonormal) columns of ``basis``."""
    k = basis.shape[1]
    if k == 2:
        return np.cross(basis[:, 0], basis[:, 1])
    if k == 1:
        e = np.zeros(3)
        e[np.argmin(np.abs(basis[:, 0]))] = 1.0
        w = e - (basis[:, 0] @ e) * basis[:, 0]
        return w / np.linalg.norm(w)
    return np.array([1.0, 0.0, 0.0])
