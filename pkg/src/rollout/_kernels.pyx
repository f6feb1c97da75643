# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels; see ``_kernels_py`` for the reference versions.

Block cross moments are a dense matrix product and stay on numpy/BLAS,
which is faster than a hand-written loop.
"""

import numpy as np
cimport numpy as cnp
from scipy.special import comb

cnp.import_array()


def twoway_residual(Y):
    cdef const double[:, :] y = np.ascontiguousarray(Y, dtype=np.float64)
    cdef Py_ssize_t n = y.shape[0], t = y.shape[1], i, j
    out = np.empty((n, t), dtype=np.float64)
    cdef double[:, :] o = out
    cdef double[:] rm = np.zeros(n)
    cdef double[:] cm = np.zeros(t)
    cdef double g = 0.0
    for i in range(n):
        for j in range(t):
            rm[i] += y[i, j]
            cm[j] += y[i, j]
    for i in range(n):
        g += rm[i]
        rm[i] /= t
    for j in range(t):
        cm[j] /= n
    g /= n * t
    for i in range(n):
        for j in range(t):
            o[i, j] = y[i, j] - rm[i] - cm[j] + g
    return out


def monotone_sequences(N, T):
    cdef long n = N, t = T
    cdef Py_ssize_t total = int(comb(N + T, T, exact=True))
    out = np.empty((total, t), dtype=np.int64)
    cdef cnp.int64_t[:, :] o = out
    cdef cnp.int64_t[:] seq = np.zeros(t, dtype=np.int64)
    cdef Py_ssize_t row = 0, pos, q
    cdef cnp.int64_t v
    while True:
        for q in range(t):
            o[row, q] = seq[q]
        row += 1
        pos = t - 1
        while pos >= 0 and seq[pos] == n:
            pos -= 1
        if pos < 0:
            break
        v = seq[pos] + 1
        for q in range(pos, t):
            seq[q] = v
    return out
