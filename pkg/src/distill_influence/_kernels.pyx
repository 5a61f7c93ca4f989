# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled row-wise kernels for softmax and soft cross-entropy.

Mirrors ``_kernels_py`` operation for operation; see ``kernels`` for dispatch.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


def softmax_rows(const double[:, ::1] z):
    cdef Py_ssize_t n = z.shape[0], c = z.shape[1], i, j
    out_arr = np.empty((n, c), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double m, s
    for i in range(n):
        m = z[i, 0]
        for j in range(1, c):
            if z[i, j] > m:
                m = z[i, j]
        s = 0.0
        for j in range(c):
            out[i, j] = exp(z[i, j] - m)
            s += out[i, j]
        for j in range(c):
            out[i, j] /= s
    return out_arr


def softmax_rows_backward(const double[:, ::1] p, const double[:, ::1] g):
    cdef Py_ssize_t n = p.shape[0], c = p.shape[1], i, j
    out_arr = np.empty((n, c), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double dot
    for i in range(n):
        dot = 0.0
        for j in range(c):
            dot += p[i, j] * g[i, j]
        for j in range(c):
            out[i, j] = p[i, j] * (g[i, j] - dot)
    return out_arr


def xent_rows(const double[:, ::1] t, const double[:, ::1] q, double floor):
    cdef Py_ssize_t n = t.shape[0], c = t.shape[1], i, j
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double s, v
    for i in range(n):
        s = 0.0
        for j in range(c):
            v = q[i, j]
            if v < floor:
                v = floor
            s -= t[i, j] * log(v)
        out[i] = s
    return out_arr


def xent_rows_backward(const double[:, ::1] t, const double[:, ::1] q, double floor,
                       const double[::1] g):
    cdef Py_ssize_t n = t.shape[0], c = t.shape[1], i, j
    gt_arr = np.empty((n, c), dtype=np.float64)
    gq_arr = np.empty((n, c), dtype=np.float64)
    cdef double[:, ::1] gt = gt_arr
    cdef double[:, ::1] gq = gq_arr
    cdef double v
    for i in range(n):
        for j in range(c):
            v = q[i, j]
            if v < floor:
                gt[i, j] = -g[i] * log(floor)
                gq[i, j] = 0.0
            else:
                gt[i, j] = -g[i] * log(v)
                gq[i, j] = -g[i] * t[i, j] / v
    return gt_arr, gq_arr
