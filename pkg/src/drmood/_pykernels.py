"""Numpy fallback for the compiled kernels in ``_ckernels.pyx``.

Both modules expose the same functions with the same argument conventions.
Arrays are float64 and C-contiguous; callers validate shapes.
"""
import numpy as np


def cholesky_into(a, out):
    """Factor ``a`` into ``out`` (lower). Returns -1 on success, else the failing pivot."""
    n = a.shape[0]
    out[...] = 0.0
    for j in range(n):
        row = out[j, :j]
        pivot = a[j, j] - row @ row
        if not pivot > 0.0:
            return j
        d = np.sqrt(pivot)
        out[j, j] = d
        if j + 1 < n:
            out[j + 1:, j] = (a[j + 1:, j] - out[j + 1:, :j] @ row) / d
    return -1


def solve_lower(L, b):
    """Forward substitution for every row of ``b``: returns y with L @ y[i] == b[i]."""
    n = L.shape[0]
    y = np.empty_like(b)
    for i in range(n):
        y[:, i] = (b[:, i] - y[:, :i] @ L[i, :i]) / L[i, i]
    return y


def solve_upper_t(L, y):
    """Back substitution with L transposed: returns x with L.T @ x[i] == y[i]."""
    n = L.shape[0]
    x = np.empty_like(y)
    for i in range(n - 1, -1, -1):
        x[:, i] = (y[:, i] - x[:, i + 1:] @ L[i + 1:, i]) / L[i, i]
    return x


def class_sq_dists(x, means, L):
    """Whitened squared distance of every row of ``x`` to every row of ``means``.

    Returns an (m, C) array with entry (i, c) = |L^-1 (x_i - mu_c)|^2.
    """
    # L^-1 is linear: whiten points and means once, then take plain distances
    wx = solve_lower(L, x)
    wm = solve_lower(L, means)
    out = np.empty((x.shape[0], means.shape[0]))
    for c in range(means.shape[0]):
        d = wx - wm[c]
        out[:, c] = np.einsum("ij,ij->i", d, d)
    return out
