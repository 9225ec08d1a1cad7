# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled squared-exponential kernel hot ops.

Same contract as `_pykernels`; the single-query paths avoid NumPy
temporaries, which matters inside closed-loop rollouts where they are
called once per controller iteration.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


cdef inline double _sq_dist(const double[:, ::1] X, Py_ssize_t i,
                            const double[::1] q, const double[::1] inv_ls,
                            Py_ssize_t d) noexcept nogil:
    cdef double acc = 0.0
    cdef double t
    cdef Py_ssize_t j
    for j in range(d):
        t = (X[i, j] - q[j]) * inv_ls[j]
        acc += t * t
    return acc


def se_gram(const double[:, ::1] X, const double[::1] inv_ls, double sf2,
            double diag_add):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t d = X.shape[1]
    out = np.empty((n, n), dtype=np.float64)
    cdef double[:, ::1] K = out
    cdef Py_ssize_t i, j, k
    cdef double acc, t
    with nogil:
        for i in range(n):
            K[i, i] = sf2 + diag_add
            for j in range(i + 1, n):
                acc = 0.0
                for k in range(d):
                    t = (X[i, k] - X[j, k]) * inv_ls[k]
                    acc += t * t
                t = sf2 * exp(-0.5 * acc)
                K[i, j] = t
                K[j, i] = t
    return out


def se_cross(const double[:, ::1] A, const double[:, ::1] B,
             const double[::1] inv_ls, double sf2):
    cdef Py_ssize_t na = A.shape[0]
    cdef Py_ssize_t nb = B.shape[0]
    cdef Py_ssize_t d = A.shape[1]
    out = np.empty((na, nb), dtype=np.float64)
    cdef double[:, ::1] K = out
    cdef Py_ssize_t i, j, k
    cdef double acc, t
    with nogil:
        for i in range(na):
            for j in range(nb):
                acc = 0.0
                for k in range(d):
                    t = (A[i, k] - B[j, k]) * inv_ls[k]
                    acc += t * t
                K[i, j] = sf2 * exp(-0.5 * acc)
    return out


def se_vec(const double[:, ::1] X, const double[::1] q,
           const double[::1] inv_ls, double sf2):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t d = X.shape[1]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] k = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            k[i] = sf2 * exp(-0.5 * _sq_dist(X, i, q, inv_ls, d))
    return out


def mean_one(const double[:, ::1] X, const double[::1] q,
             const double[::1] inv_ls, double sf2, const double[::1] alpha):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t d = X.shape[1]
    cdef double mean = 0.0
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            mean += sf2 * exp(-0.5 * _sq_dist(X, i, q, inv_ls, d)) * alpha[i]
    return mean


def mean_multi(const double[:, ::1] X, const double[::1] q,
               const double[:, ::1] inv_ls_stack, const double[::1] sf2s,
               const double[:, ::1] alphas):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t d = X.shape[1]
    cdef Py_ssize_t C = sf2s.shape[0]
    out = np.zeros(C, dtype=np.float64)
    cdef double[::1] means = out
    cdef Py_ssize_t i, j, c
    cdef double acc, t
    with nogil:
        for i in range(n):
            for c in range(C):
                acc = 0.0
                for j in range(d):
                    t = (X[i, j] - q[j]) * inv_ls_stack[c, j]
                    acc += t * t
                means[c] += exp(-0.5 * acc) * alphas[c, i]
        for c in range(C):
            means[c] *= sf2s[c]
    return out


def mean_quad_one(const double[:, ::1] X, const double[::1] q,
                  const double[::1] inv_ls, double sf2,
                  const double[::1] alpha, const double[:, ::1] kinv):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t d = X.shape[1]
    buf = np.empty(n, dtype=np.float64)
    cdef double[::1] k = buf
    cdef double mean = 0.0
    cdef double quad = 0.0
    cdef double row
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(n):
            k[i] = sf2 * exp(-0.5 * _sq_dist(X, i, q, inv_ls, d))
            mean += k[i] * alpha[i]
        for i in range(n):
            row = 0.0
            for j in range(n):
                row += kinv[i, j] * k[j]
            quad += k[i] * row
    return mean, quad
