# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled row gather / scatter-add kernels for edge-indexed message passing."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def scatter_add_rows(real[:, ::1] values, const cnp.int64_t[::1] index, Py_ssize_t n_rows):
    cdef Py_ssize_t m = values.shape[0]
    cdef Py_ssize_t k = values.shape[1]
    cdef Py_ssize_t e, c, r
    if index.shape[0] != m:
        raise ValueError("index length does not match number of value rows")
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n_rows, k), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    for e in range(m):
        r = index[e]
        if r < 0 or r >= n_rows:
            raise IndexError("scatter index out of range")
        for c in range(k):
            out[r, c] += values[e, c]
    return out_arr


def gather_rows(real[:, ::1] x, const cnp.int64_t[::1] index):
    cdef Py_ssize_t m = index.shape[0]
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t k = x.shape[1]
    cdef Py_ssize_t e, c, r
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((m, k), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    for e in range(m):
        r = index[e]
        if r < 0 or r >= n:
            raise IndexError("gather index out of range")
        for c in range(k):
            out[e, c] = x[r, c]
    return out_arr
