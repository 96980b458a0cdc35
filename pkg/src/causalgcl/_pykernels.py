"""Numpy fallback for the compiled kernels.

Accumulation order matches ``_ckernels`` so both backends agree bit for bit.
"""
import numpy as np


def spmm_csr(indptr, indices, data, dense):
    n_rows = len(indptr) - 1
    out = np.zeros((n_rows, dense.shape[1]), dtype=np.float64)
    if len(data) == 0:
        return out
    rows = np.repeat(np.arange(n_rows), np.diff(indptr))
    # ufunc.at is unbuffered and walks entries in order: same sums as the C loop
    np.add.at(out, rows, data[:, None] * dense[indices])
    return out


def kmeans_assign(points, centroids):
    n, d = points.shape
    acc = np.zeros((n, centroids.shape[0]), dtype=np.float64)
    for t in range(d):
        diff = points[:, t, None] - centroids[None, :, t]
        acc = acc + diff * diff
    labels = np.argmin(acc, axis=1).astype(np.int64)
    return labels, acc[np.arange(n), labels]
