"""Numba twins of the kernels in :mod:`requant.kernels`.

Kept in a separate module so the import (and JIT warm-up) only happens when
the numba path is actually enabled.  No fastmath: results must be the same
IEEE operations as the fallback, in loop order.
"""

import functools

import numba as nb
import numpy as np

njit = functools.partial(nb.njit, cache=True, nogil=True)


@njit
def pack_fields(fields, bits):
    n = fields.size
    out = np.zeros((n * bits + 7) // 8, dtype=np.uint8)
    for i in range(n):
        base = i * bits
        v = fields[i]
        for b in range(bits):
            if (v >> np.uint64(b)) & np.uint64(1):
                pos = base + b
                out[pos >> 3] |= np.uint8(1) << np.uint8(pos & 7)
    return out


@njit
def unpack_fields(packed, bits, count):
    out = np.zeros(count, dtype=np.uint64)
    for i in range(count):
        base = i * bits
        v = np.uint64(0)
        for b in range(bits):
            pos = base + b
            bit = (packed[pos >> 3] >> np.uint8(pos & 7)) & np.uint8(1)
            v |= np.uint64(bit) << np.uint64(b)
        out[i] = v
    return out


@njit
def nearest_index(values, centroids):
    n = values.size
    k = centroids.size
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = 0
        bestd = abs(values[i] - centroids[0])
        for j in range(1, k):
            d = abs(values[i] - centroids[j])
            if d < bestd:  # strict: ties keep the smaller index
                best = j
                bestd = d
        out[i] = best
    return out


@njit
def matvec_uniform(codes, scales, group, col_div, detached, x):
    r, c = codes.shape
    y = np.zeros(r, dtype=np.float64)
    for i in range(r):
        acc = 0.0
        for j in range(c):
            if detached[i, j]:
                continue
            w = codes[i, j] * np.float64(scales[i, j // group]) / col_div[j]
            acc += w * x[j]
        y[i] = acc
    return y


@njit
def matvec_codebook(codes, table, detached, x):
    r, c = codes.shape
    y = np.zeros(r, dtype=np.float64)
    for i in range(r):
        acc = 0.0
        for j in range(c):
            if detached[i, j]:
                continue
            acc += table[codes[i, j]] * x[j]
        y[i] = acc
    return y


@njit
def coo_accumulate(y, rows, cols, vals, x):
    for k in range(rows.size):
        y[rows[k]] += vals[k] * x[cols[k]]
