# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; see ``_pykernels`` for the reference semantics."""
import numpy as np
from libc.math cimport sqrt


def cholesky_into(const double[:, ::1] a, double[:, ::1] out):
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t i, j, k
    cdef double s
    out[:, :] = 0.0
    for j in range(n):
        s = a[j, j]
        for k in range(j):
            s -= out[j, k] * out[j, k]
        if not s > 0.0:
            return j
        out[j, j] = sqrt(s)
        for i in range(j + 1, n):
            s = a[i, j]
            for k in range(j):
                s -= out[i, k] * out[j, k]
            out[i, j] = s / out[j, j]
    return -1


def solve_lower(const double[:, ::1] L, const double[:, ::1] b):
    cdef Py_ssize_t n = L.shape[0], m = b.shape[0]
    cdef Py_ssize_t r, i, k
    cdef double s
    y_arr = np.empty((m, n))
    cdef double[:, ::1] y = y_arr
    for r in range(m):
        for i in range(n):
            s = b[r, i]
            for k in range(i):
                s -= L[i, k] * y[r, k]
            y[r, i] = s / L[i, i]
    return y_arr


def solve_upper_t(const double[:, ::1] L, const double[:, ::1] y):
    cdef Py_ssize_t n = L.shape[0], m = y.shape[0]
    cdef Py_ssize_t r, i, k
    cdef double xi
    x_arr = np.array(y, dtype=np.float64, copy=True)
    cdef double[:, ::1] x = x_arr
    # column-oriented back substitution so that L is read along its rows
    for r in range(m):
        for i in range(n - 1, -1, -1):
            xi = x[r, i] / L[i, i]
            x[r, i] = xi
            for k in range(i):
                x[r, k] -= L[i, k] * xi
    return x_arr


def class_sq_dists(const double[:, ::1] x, const double[:, ::1] means,
                   const double[:, ::1] L):
    cdef Py_ssize_t m = x.shape[0], C = means.shape[0], n = L.shape[0]
    cdef Py_ssize_t r, c, i
    cdef double s, acc
    # L^-1 is linear: whiten points and means once, then take plain distances
    cdef double[:, ::1] wx = solve_lower(L, x)
    cdef double[:, ::1] wm = solve_lower(L, means)
    out_arr = np.empty((m, C))
    cdef double[:, ::1] out = out_arr
    for r in range(m):
        for c in range(C):
            acc = 0.0
            for i in range(n):
                s = wx[r, i] - wm[c, i]
                acc += s * s
            out[r, c] = acc
    return out_arr
