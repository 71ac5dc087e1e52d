"""Exact small-matrix kernels (K <= 128).

Log-determinants, ridge inverses, symmetric inverse square roots and SVD
for the correlation blocks used throughout the package. Inputs that are
nominally symmetric are symmetrized on entry, and a ridge term is always
added as ridge*I before any factorization, matching the pseudo-inverse
convention used by the dependence costs.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "LinalgError",
    "SvdResult",
    "sym",
    "cholesky_logdet",
    "ridge_inverse",
    "inv_sqrt_sym",
    "svd_small",
]


class LinalgError(ValueError):
    """Factorization failure: statistics are ill-conditioned for the request."""


def sym(m: np.ndarray) -> np.ndarray:
    """Symmetrized copy of a square matrix."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise LinalgError(f"expected square matrix, got shape {m.shape}")
    return 0.5 * (m + m.T)


def _ridged(m: np.ndarray, ridge: float) -> np.ndarray:
    if ridge < 0:
        raise LinalgError("ridge must be >= 0")
    a = sym(m)
    if ridge:
        a = a + ridge * np.eye(a.shape[0])
    return a


def cholesky_logdet(m: np.ndarray, ridge: float = 0.0) -> float:
    """log det(sym(m) + ridge*I), computed as twice the log-diagonal sum of
    the Cholesky factor. Raises LinalgError if the matrix is not positive
    definite after the ridge."""
    a = _ridged(m, ridge)
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise LinalgError(f"not positive definite at ridge {ridge}: {exc}") from exc
    return float(2.0 * np.log(np.diagonal(chol)).sum())


def ridge_inverse(m: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """(sym(m) + ridge*I)^-1, symmetric."""
    a = _ridged(m, ridge)
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise LinalgError(f"not positive definite at ridge {ridge}: {exc}") from exc
    inv_l = np.linalg.inv(chol)
    return sym(inv_l.T @ inv_l)


def inv_sqrt_sym(m: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """Symmetric S with S (sym(m)+ridge*I) S = I, via eigendecomposition."""
    a = _ridged(m, ridge)
    vals, vecs = np.linalg.eigh(a)
    if vals.min() <= 0:
        raise LinalgError(
            f"not positive definite at ridge {ridge} (min eigenvalue {vals.min():.3e})"
        )
    return sym((vecs / np.sqrt(vals)) @ vecs.T)


class SvdResult:
    """U diag(s) V^T factorization of a square matrix.

    ``u`` and ``v`` are orthogonal, singular values are non-negative and
    sorted descending. Signs are normalized so each left singular vector's
    largest-magnitude entry is positive.
    """

    __slots__ = ("u", "singular_values", "v")

    def __init__(self, u: np.ndarray, singular_values: np.ndarray, v: np.ndarray):
        self.u = u
        self.singular_values = singular_values
        self.v = v

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.singular_values) @ self.v.T


def svd_small(m: np.ndarray) -> SvdResult:
    """Singular value decomposition of a square matrix with finite entries."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise LinalgError(f"svd_small expects a square matrix, got {m.shape}")
    if not np.isfinite(m).all():
        raise LinalgError("svd_small: non-finite entries")
    u, s, vt = np.linalg.svd(m)
    v = vt.T
    for k in range(u.shape[1]):
        pivot = np.argmax(np.abs(u[:, k]))
        if u[pivot, k] < 0:
            u[:, k] = -u[:, k]
            v[:, k] = -v[:, k]
    return SvdResult(u, s, v)
