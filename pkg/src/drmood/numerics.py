"""Dense linear algebra used by the encoder, Gaussian fitting and Mahalanobis scoring.

Vectors and matrices are plain float64 numpy arrays. Factorization and the
triangular solves go through the kernel backend (compiled when built).
"""
from dataclasses import dataclass

import numpy as np

from drmood._backend import kernels
from drmood.errors import DegenerateData, DimensionMismatch, NotSPD

SYMMETRY_TOL = 1e-9


def as_vector(v):
    arr = np.ascontiguousarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise DimensionMismatch(f"expected a non-empty vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector has non-finite entries")
    return arr


def as_matrix(a):
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise DimensionMismatch(f"expected a non-empty matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix has non-finite entries")
    return arr


@dataclass(frozen=True)
class CholeskyFactor:
    lower: np.ndarray

    @property
    def dim(self):
        return self.lower.shape[0]

    def reconstruct(self):
        return self.lower @ self.lower.T


def cholesky(a):
    """Lower Cholesky factor of a symmetric positive definite matrix.

    The input is symmetrized as (a + a.T) / 2 first so that round-off
    asymmetry from covariance accumulation does not matter.
    """
    a = as_matrix(a)
    n, m = a.shape
    if n != m:
        raise DimensionMismatch(f"cholesky needs a square matrix, got {a.shape}")
    scale = max(np.max(np.abs(a)), 1.0)
    if np.max(np.abs(a - a.T)) > SYMMETRY_TOL * scale:
        raise NotSPD("matrix is not symmetric")
    sym = np.ascontiguousarray(0.5 * (a + a.T))
    lower = np.zeros_like(sym)
    bad = kernels.cholesky_into(sym, lower)
    if bad >= 0:
        raise NotSPD(f"non-positive pivot at index {bad}; increase ridge regularization")
    lower.setflags(write=False)
    return CholeskyFactor(lower)


def _check_dim(factor, n):
    if factor.dim != n:
        raise DimensionMismatch(f"factor has dim {factor.dim}, vector has length {n}")


def solve_spd(factor, v):
    """Solve (L L^T) x = v by forward then backward substitution."""
    v = as_vector(v)
    _check_dim(factor, v.shape[0])
    y = kernels.solve_lower(factor.lower, v[None, :])
    return kernels.solve_upper_t(factor.lower, y)[0]


def quad_form(delta, factor):
    """delta^T (L L^T)^-1 delta, evaluated as |L^-1 delta|^2 so it is never negative."""
    delta = as_vector(delta)
    _check_dim(factor, delta.shape[0])
    y = kernels.solve_lower(factor.lower, delta[None, :])[0]
    return float(y @ y)


def class_quad_forms(points, means, factor):
    """(m, C) matrix of quad_form(points[i] - means[c], factor)."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    means = np.ascontiguousarray(means, dtype=np.float64)
    if points.ndim != 2 or means.ndim != 2:
        raise DimensionMismatch("points and means must be 2-D")
    if points.shape[1] != factor.dim or means.shape[1] != factor.dim:
        raise DimensionMismatch(
            f"feature dim {points.shape[1]} / mean dim {means.shape[1]} vs factor dim {factor.dim}"
        )
    return kernels.class_sq_dists(points, means, np.ascontiguousarray(factor.lower))


def _top_direction(cov, rng_vec, iters=20000, tol=1e-12):
    v = rng_vec / np.linalg.norm(rng_vec)
    for _ in range(iters):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return v, 0.0
        w /= norm
        # the eigenvalue settles long before the vector does, so test the vector
        done = np.linalg.norm(w - v) < tol
        v = w
        if done:
            break
    lam = float(v @ cov @ v)
    # fixed sign so that output is reproducible
    k = int(np.argmax(np.abs(v)))
    if v[k] < 0:
        v = -v
    return v, lam


def pca_2d(points):
    """Project mean-centered points onto their top two principal directions.

    Directions come from power iteration on the sample covariance with
    deflation after the first component.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionMismatch("points must share one dimension")
    if x.shape[0] < 3:
        raise DegenerateData("pca_2d needs at least 3 points")
    if not np.all(np.isfinite(x)):
        raise ValueError("points have non-finite entries")
    centered = x - x.mean(axis=0)
    # the mean of identical rows can differ from them by round-off
    if np.max(np.abs(centered)) <= 1e-12 * max(1.0, float(np.max(np.abs(x)))):
        raise DegenerateData("all points are identical")
    cov = centered.T @ centered / x.shape[0]
    d = cov.shape[0]
    # deterministic, non-degenerate start vectors
    start = np.cos(np.arange(1, d + 1) * 0.7) + 0.1
    v1, lam1 = _top_direction(cov, start)
    if d == 1:
        return np.column_stack([centered @ v1, np.zeros(x.shape[0])])
    deflated = cov - lam1 * np.outer(v1, v1)
    start2 = start - (start @ v1) * v1
    if np.linalg.norm(start2) < 1e-12:
        start2 = np.roll(start, 1) - (np.roll(start, 1) @ v1) * v1
    v2, _ = _top_direction(deflated, start2)
    v2 = v2 - (v2 @ v1) * v1
    v2 /= np.linalg.norm(v2)
    return np.column_stack([centered @ v1, centered @ v2])
