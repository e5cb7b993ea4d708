"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The backend is chosen per call: numba is used when it imported cleanly and
the environment variable ``REQUANT_NUMBA`` is not set to ``0``.  Both
backends implement the same element-wise arithmetic; only the accumulation
order of the matvec reductions differs (sequential loop vs BLAS), so
cross-backend comparisons should use a small relative tolerance while
integer outputs (packing, nearest-index) match exactly.

``benchmarks/bench_kernels.py`` times the two paths side by side.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from . import _kernels_numba as _nb

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _nb = None
    HAS_NUMBA = False

ENV_FLAG = "REQUANT_NUMBA"


def numba_active() -> bool:
    """True when calls will dispatch to the numba implementations."""
    if not HAS_NUMBA:
        return False
    return os.environ.get(ENV_FLAG, "1").strip() != "0"


def backend_name() -> str:
    return "numba" if numba_active() else "numpy"


# ---------------------------------------------------------------------------
# bit packing (LSB-first little-endian bitstream of fixed-width fields)
# ---------------------------------------------------------------------------


def pack_fields(fields: np.ndarray, bits: int) -> np.ndarray:
    """Pack unsigned integer fields of width ``bits`` into a byte stream.

    Field ``i`` occupies bit positions ``[i*bits, (i+1)*bits)`` counted from
    bit 0 of byte 0 upward, so the stream is independent of host endianness.
    """
    fields = np.ascontiguousarray(fields, dtype=np.uint64)
    if bits < 1 or bits > 16:
        raise ValueError(f"field width must be in [1, 16], got {bits}")
    if fields.size and int(fields.max()) >> bits:
        raise ValueError(f"field value out of range for {bits} bits")
    if numba_active():
        return _nb.pack_fields(fields, bits)
    return _pack_fields_np(fields, bits)


def unpack_fields(packed: np.ndarray, bits: int, count: int) -> np.ndarray:
    """Inverse of :func:`pack_fields`; returns ``count`` uint64 fields."""
    packed = np.ascontiguousarray(packed, dtype=np.uint8)
    nbytes = (count * bits + 7) // 8
    if packed.size < nbytes:
        raise ValueError(f"need {nbytes} bytes for {count} fields, got {packed.size}")
    if numba_active():
        return _nb.unpack_fields(packed, bits, count)
    return _unpack_fields_np(packed, bits, count)


def _pack_fields_np(fields, bits):
    n = fields.size
    out = np.zeros((n * bits + 7) // 8, dtype=np.uint8)
    positions = np.arange(n, dtype=np.int64) * bits
    for b in range(bits):
        pos = positions + b
        chunk = ((fields >> np.uint64(b)) & np.uint64(1)).astype(np.uint8)
        np.bitwise_or.at(out, pos >> 3, chunk << (pos & 7).astype(np.uint8))
    return out

def _unpack_fields_np(packed, bits, count):
    out = np.zeros(count, dtype=np.uint64)
    positions = np.arange(count, dtype=np.int64) * bits
    wide = packed.astype(np.uint64)
    for b in range(bits):
        pos = positions + b
        bit = (wide[pos >> 3] >> (pos & 7).astype(np.uint64)) & np.uint64(1)
        out |= bit << np.uint64(b)
    return out


# ---------------------------------------------------------------------------
# nearest centroid assignment
# ---------------------------------------------------------------------------


def nearest_index(values: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid per value; ties pick the smaller index."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    centroids = np.ascontiguousarray(centroids, dtype=np.float64)
    if centroids.size == 0:
        raise ValueError("need at least one centroid")
    if numba_active():
        return _nb.nearest_index(values, centroids)
    # argmin returns the first minimum, which is the smaller index on ties
    return np.argmin(np.abs(values[:, None] - centroids[None, :]), axis=1)


# ---------------------------------------------------------------------------
# quantized matvec (weights decoded on the fly, detached slots contribute 0)
# ---------------------------------------------------------------------------


def matvec_uniform(codes, scales, group, col_div, detached, x):
    """y = W x for a group-scaled integer weight matrix.

    W[r, c] = codes[r, c] * scales[r, c // group] / col_div[c], except that
    detached slots contribute zero.  ``scales`` is float32 as stored; the
    arithmetic upcasts to float64.
    """
    codes = np.ascontiguousarray(codes, dtype=np.int16)
    scales = np.ascontiguousarray(scales, dtype=np.float32)
    col_div = np.ascontiguousarray(col_div, dtype=np.float64)
    detached = np.ascontiguousarray(detached, dtype=np.uint8)
    x = np.ascontiguousarray(x, dtype=np.float64)
    if numba_active():
        return _nb.matvec_uniform(codes, scales, group, col_div, detached, x)
    r, c = codes.shape
    w = codes.astype(np.float64) * np.repeat(scales.astype(np.float64), group, axis=1)[:, :c]
    w /= col_div[None, :]
    w[detached != 0] = 0.0
    return w @ x


def matvec_codebook(codes, table, detached, x):
    """y = W x for a codebook-quantized matrix, W[r, c] = table[codes[r, c]]."""
    codes = np.ascontiguousarray(codes, dtype=np.int16)
    table = np.ascontiguousarray(table, dtype=np.float64)
    detached = np.ascontiguousarray(detached, dtype=np.uint8)
    x = np.ascontiguousarray(x, dtype=np.float64)
    if numba_active():
        return _nb.matvec_codebook(codes, table, detached, x)
    w = table[codes]
    w[detached != 0] = 0.0
    return w @ x


def coo_accumulate(y, rows, cols, vals, x):
    """y[rows[k]] += vals[k] * x[cols[k]] for every stored triplet."""
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    cols = np.ascontiguousarray(cols, dtype=np.int64)
    vals = np.ascontiguousarray(vals, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    if numba_active():
        _nb.coo_accumulate(y, rows, cols, vals, x)
        return y
    np.add.at(y, rows, vals * x[cols])
    return y
