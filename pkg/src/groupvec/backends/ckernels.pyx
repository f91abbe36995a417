# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled distance kernels; semantics match pykernels exactly."""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def cross_sqdist(x, c):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] ca = np.ascontiguousarray(c, dtype=np.float64)
    cdef Py_ssize_t n = xa.shape[0], d = xa.shape[1], m = ca.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((n, m), dtype=np.float64)
    cdef Py_ssize_t i, j, t
    cdef double acc, diff
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(d):
                diff = xa[i, t] - ca[j, t]
                acc += diff * diff
            out[i, j] = acc
    return out


def pairwise_dist(x):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xa.shape[0], d = xa.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((n, n), dtype=np.float64)
    cdef Py_ssize_t i, j, t
    cdef double acc, diff
    for i in range(n):
        for j in range(i + 1, n):
            acc = 0.0
            for t in range(d):
                diff = xa[i, t] - xa[j, t]
                acc += diff * diff
            acc = sqrt(acc)
            out[i, j] = acc
            out[j, i] = acc
    return out


def pairwise_dist_grad(x, e, g):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] ea = np.ascontiguousarray(e, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] ga = np.ascontiguousarray(g, dtype=np.float64)
    cdef Py_ssize_t n = xa.shape[0], d = xa.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((n, d), dtype=np.float64)
    cdef Py_ssize_t i, j, t
    cdef double w
    for i in range(n):
        for j in range(n):
            if i != j and ea[i, j] > 0.0:
                w = (ga[i, j] + ga[j, i]) / ea[i, j]
                for t in range(d):
                    out[i, t] += w * (xa[i, t] - xa[j, t])
    return out


def assign_nearest(x, c):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] xa = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] ca = np.ascontiguousarray(c, dtype=np.float64)
    cdef Py_ssize_t n = xa.shape[0], d = xa.shape[1], m = ca.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] labels = np.empty(n, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] best = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t i, j, t, arg
    cdef double acc, diff, lo
    for i in range(n):
        arg = 0
        lo = -1.0
        for j in range(m):
            acc = 0.0
            for t in range(d):
                diff = xa[i, t] - ca[j, t]
                acc += diff * diff
            if lo < 0.0 or acc < lo:
                lo = acc
                arg = j
        labels[i] = arg
        best[i] = lo
    return labels, best


def topk_smallest(values, k):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef Py_ssize_t n = v.shape[0], kk = min(int(k), n)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] idx = np.arange(n, dtype=np.int64)
    cdef Py_ssize_t i, j, arg
    cdef cnp.int64_t tmp
    # partial selection sort on (value, index); stable for equal values
    for i in range(kk):
        arg = i
        for j in range(i + 1, n):
            if v[idx[j]] < v[idx[arg]] or (v[idx[j]] == v[idx[arg]] and idx[j] < idx[arg]):
                arg = j
        if arg != i:
            tmp = idx[i]
            idx[i] = idx[arg]
            idx[arg] = tmp
    return np.asarray(idx[:kk])
