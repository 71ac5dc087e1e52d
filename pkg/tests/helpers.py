"""Shared numeric test utilities: finite differences and error metrics."""

import numpy as np

FD_STEP = 1e-5


def fd_gradient(fn, x, step=FD_STEP):
    """Central finite differences of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += step
        xm = x.copy()
        xm[idx] -= step
        grad[idx] = (fn(xp) - fn(xm)) / (2.0 * step)
    return grad


def rel_err(a, b):
    """Norm-relative disagreement of two gradient arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return np.linalg.norm(a - b) / denom


def random_spd(rng, k, scale=1.0):
    m = rng.standard_normal((k, k))
    return m @ m.T * scale / k + np.eye(k) * 0.1
