"""Independent reference computations shared by the tests."""

import numpy as np

from bsmm.core import to_dense

REL_TOL = 1e-12


def scatter_add(layout, entries):
    """Dense matrix from (i, j, block) triplets by plain element-wise scatter-add."""
    out = np.zeros(layout.shape)
    ro, co = layout.row_offsets, layout.col_offsets
    for i, j, blk in entries:
        blk = np.asarray(blk)
        for r in range(blk.shape[0]):
            for c in range(blk.shape[1]):
                out[ro[i] + r, co[j] + c] += blk[r, c]
    return out


def dense_product(a, b):
    """Reference product and the magnitude |A||B| used to scale the tolerance."""
    da, db = to_dense(a), to_dense(b)
    return da @ db, np.abs(da) @ np.abs(db)


def max_scaled_error(c, ref, scale):
    """Largest |c - ref| / (|A||B|) over entries with non-zero scale; 0 where both vanish."""
    diff = np.abs(np.asarray(c) - ref)
    if np.any(diff[scale == 0] != 0):
        return np.inf
    nz = scale > 0
    return float((diff[nz] / scale[nz]).max()) if nz.any() else 0.0


def close_to_dense(c_dense, a, b, tol=REL_TOL):
    ref, scale = dense_product(a, b)
    return max_scaled_error(c_dense, ref, scale) <= tol


def naive_gemm_acc(a, b, c):
    """Triple loop, ascending k, starting each product from zero, then added to c."""
    m, k = a.shape
    n = b.shape[1]
    out = c.copy()
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s = s + a[i, p] * b[p, j]
            out[i, j] = out[i, j] + s
    return out
