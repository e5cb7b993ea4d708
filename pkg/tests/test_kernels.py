"""Kernel backends: bit packing, nearest-centroid, packed matvec, COO.

Every kernel has a numpy implementation and a compiled twin; integer results
must agree exactly, float reductions to near machine precision (summation
order may differ between the two).
"""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from requant import kernels


def run_both(monkeypatch, fn_name, *args):
    out = []
    for flag in ("0", "1"):
        monkeypatch.setenv(kernels.ENV_FLAG, flag)
        fn = getattr(kernels, fn_name)
        out.append(fn(*[np.copy(a) if isinstance(a, np.ndarray) else a for a in args]))
    return out


def test_backend_flag(monkeypatch):
    monkeypatch.setenv(kernels.ENV_FLAG, "0")
    assert kernels.backend_name() == "numpy"
    monkeypatch.setenv(kernels.ENV_FLAG, "1")
    assert kernels.backend_name() == "numba"


# ---------------------------------------------------------------------------
# bit packing
# ---------------------------------------------------------------------------


@given(st.integers(1, 16), st.lists(st.integers(0, 2**63 - 1), max_size=70))
@settings(max_examples=80, deadline=None)
def test_pack_unpack_roundtrip(bits, raw):
    fields = np.array([v & ((1 << bits) - 1) for v in raw], dtype=np.uint64)
    packed = kernels.pack_fields(fields, bits)
    assert packed.dtype == np.uint8
    assert packed.size == (fields.size * bits + 7) // 8
    back = kernels.unpack_fields(packed, bits, fields.size)
    assert np.array_equal(back, fields)


def test_pack_known_bytes():
    # 4-bit fields 0x1,0x2,0x3 LSB-first: byte0 = 0x21, byte1 = 0x03
    packed = kernels.pack_fields(np.array([1, 2, 3], dtype=np.uint64), 4)
    assert packed.tolist() == [0x21, 0x03]


def test_pack_unpack_backends_agree(monkeypatch):
    rng = np.random.default_rng(5)
    for bits in (1, 3, 4, 5, 8, 13, 16):
        fields = rng.integers(0, 1 << bits, size=257).astype(np.uint64)
        a, b = run_both(monkeypatch, "pack_fields", fields, bits)
        assert np.array_equal(a, b)
        ua, ub = run_both(monkeypatch, "unpack_fields", a, bits, fields.size)
        assert np.array_equal(ua, ub)
        assert np.array_equal(ua, fields)


# ---------------------------------------------------------------------------
# nearest centroid
# ---------------------------------------------------------------------------


def test_nearest_index_ties_take_smaller_index():
    centroids = np.array([0.0, 0.0, 1.0])
    assert kernels.nearest_index(np.array([0.0]), centroids)[0] == 0
    # 0.5 is equidistant from 0.0 and 1.0
    assert kernels.nearest_index(np.array([0.5]), np.array([0.0, 1.0]))[0] == 0


def test_nearest_index_backends_agree(monkeypatch):
    rng = np.random.default_rng(6)
    values = rng.normal(size=500)
    centroids = np.sort(rng.normal(size=16))
    a, b = run_both(monkeypatch, "nearest_index", values, centroids)
    assert np.array_equal(a, b)
    dist = (values[:, None] - centroids[None, :]) ** 2
    assert np.array_equal(a, dist.argmin(axis=1))


# ---------------------------------------------------------------------------
# matvec kernels
# ---------------------------------------------------------------------------


def _random_uniform_layer(rng, rows=6, cols=8, group=4):
    codes = rng.integers(-7, 8, size=(rows, cols)).astype(np.int16)
    scales = (0.01 + rng.random((rows, cols // group))).astype(np.float32)
    col_div = 0.5 + rng.random(cols)
    detached = (rng.random((rows, cols)) < 0.2).astype(np.uint8)
    x = rng.normal(size=cols)
    return codes, scales, group, col_div, detached, x


def test_matvec_uniform_matches_dense(monkeypatch):
    rng = np.random.default_rng(7)
    codes, scales, group, col_div, detached, x = _random_uniform_layer(rng)
    dense = codes.astype(np.float64) * np.repeat(scales.astype(np.float64), group, axis=1)
    dense = dense / col_div[None, :]
    dense[detached.astype(bool)] = 0.0
    want = dense @ x
    a, b = run_both(monkeypatch, "matvec_uniform", codes, scales, group, col_div, detached, x)
    np.testing.assert_allclose(a, want, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(b, want, rtol=1e-12, atol=1e-12)


def test_matvec_codebook_matches_dense(monkeypatch):
    rng = np.random.default_rng(8)
    rows, cols, k = 5, 9, 8
    codes = rng.integers(0, k, size=(rows, cols)).astype(np.int16)
    table = np.sort(rng.normal(size=k))
    detached = (rng.random((rows, cols)) < 0.15).astype(np.uint8)
    x = rng.normal(size=cols)
    dense = table[codes]
    dense[detached.astype(bool)] = 0.0
    want = dense @ x
    a, b = run_both(monkeypatch, "matvec_codebook", codes, table, detached, x)
    np.testing.assert_allclose(a, want, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(b, want, rtol=1e-12, atol=1e-12)


def test_coo_accumulate_adds_duplicates(monkeypatch):
    rows = np.array([0, 2, 0], dtype=np.int64)
    cols = np.array([1, 0, 1], dtype=np.int64)
    vals = np.array([2.0, 3.0, 4.0])
    x = np.array([10.0, 100.0])
    for flag in ("0", "1"):
        monkeypatch.setenv(kernels.ENV_FLAG, flag)
        y = np.zeros(3)
        kernels.coo_accumulate(y, rows, cols, vals, x)
        np.testing.assert_allclose(y, [600.0, 0.0, 30.0])
