# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Must stay bit-compatible with ``_pykernels``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def spmm_csr(const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] indices,
             const double[::1] data, const double[:, ::1] dense):
    cdef Py_ssize_t n_rows = indptr.shape[0] - 1
    cdef Py_ssize_t n_cols = dense.shape[1]
    out = np.zeros((n_rows, n_cols), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t r, k, c
    cdef cnp.int64_t j
    cdef double w
    with nogil:
        for r in range(n_rows):
            for k in range(indptr[r], indptr[r + 1]):
                j = indices[k]
                w = data[k]
                for c in range(n_cols):
                    o[r, c] = o[r, c] + w * dense[j, c]
    return out


def kmeans_assign(const double[:, ::1] points, const double[:, ::1] centroids):
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t k = centroids.shape[0]
    cdef Py_ssize_t d = points.shape[1]
    labels = np.empty(n, dtype=np.int64)
    dists = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] lab = labels
    cdef double[::1] dst = dists
    cdef Py_ssize_t i, c, t
    cdef double best, acc, diff
    cdef cnp.int64_t arg
    with nogil:
        for i in range(n):
            best = 0.0
            arg = -1
            for c in range(k):
                acc = 0.0
                for t in range(d):
                    diff = points[i, t] - centroids[c, t]
                    acc = acc + diff * diff
                if arg < 0 or acc < best:
                    best = acc
                    arg = c
            lab[i] = arg
            dst[i] = best
    return labels, dists
