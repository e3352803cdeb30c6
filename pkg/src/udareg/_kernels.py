"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba versions are used when numba imports and the environment
variable ``UDAREG_DISABLE_NUMBA`` is unset (or "0"). Both paths are always
importable as ``<name>_numpy`` / ``<name>_numba`` so tests and the benchmark
can compare them directly.
"""
import os

import numpy as np

_DISABLED = os.environ.get("UDAREG_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and not _DISABLED


def _njit(fn):
    if numba is None:  # pragma: no cover
        return fn
    return numba.njit(cache=True, nogil=True, fastmath=False)(fn)


# ---------------------------------------------------------------- numpy path

def sq_dists_numpy(x, y):
    """Squared euclidean distances between rows of x (n, d) and y (m, d)."""
    diff = x[:, None, :] - y[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def gaussian_gram_numpy(x, y, bandwidth):
    return np.exp(-sq_dists_numpy(x, y) / (2.0 * bandwidth * bandwidth))


def guttman_1d_numpy(d, x):
    """One Guttman transform for a 1-D configuration with unit weights."""
    n = x.shape[0]
    gap = x[:, None] - x[None, :]
    dist = np.abs(gap)
    ratio = np.zeros_like(d)
    nz = dist > 0.0
    ratio[nz] = d[nz] / dist[nz]
    # B(x) x, with B_ij = -d_ij/|x_i-x_j| off-diagonal and rows summing to zero
    return (ratio * gap).sum(axis=1) / n


def stress_1d_numpy(d, x):
    resid = d - np.abs(x[:, None] - x[None, :])
    np.fill_diagonal(resid, 0.0)
    return float(np.sqrt((resid * resid).sum()))


# ---------------------------------------------------------------- numba path

@_njit
def sq_dists_numba(x, y):
    n, dim = x.shape
    m = y.shape[0]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(dim):
                t = x[i, k] - y[j, k]
                acc += t * t
            out[i, j] = acc
    return out


@_njit
def gaussian_gram_numba(x, y, bandwidth):
    n, dim = x.shape
    m = y.shape[0]
    scale = 1.0 / (2.0 * bandwidth * bandwidth)
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(dim):
                t = x[i, k] - y[j, k]
                acc += t * t
            out[i, j] = np.exp(-acc * scale)
    return out


@_njit
def guttman_1d_numba(d, x):
    n = x.shape[0]
    out = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for j in range(n):
            gap = x[i] - x[j]
            dist = abs(gap)
            if dist > 0.0:
                acc += d[i, j] / dist * gap
        out[i] = acc / n
    return out


@_njit
def stress_1d_numba(d, x):
    n = x.shape[0]
    acc = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                r = d[i, j] - abs(x[i] - x[j])
                acc += r * r
    return np.sqrt(acc)


def _as2d(a):
    return np.ascontiguousarray(np.atleast_2d(np.asarray(a, dtype=np.float64)))


def sq_dists(x, y):
    x, y = _as2d(x), _as2d(y)
    return sq_dists_numba(x, y) if USE_NUMBA else sq_dists_numpy(x, y)


def gaussian_gram(x, y, bandwidth):
    x, y = _as2d(x), _as2d(y)
    if USE_NUMBA:
        return gaussian_gram_numba(x, y, float(bandwidth))
    return gaussian_gram_numpy(x, y, float(bandwidth))


def guttman_1d(d, x):
    d = np.ascontiguousarray(d, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    return guttman_1d_numba(d, x) if USE_NUMBA else guttman_1d_numpy(d, x)


def stress_1d(d, x):
    d = np.ascontiguousarray(d, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    return float(stress_1d_numba(d, x)) if USE_NUMBA else stress_1d_numpy(d, x)


def backend():
    """Name of the active kernel backend: ``"numba"`` or ``"numpy"``."""
    return "numba" if USE_NUMBA else "numpy"
