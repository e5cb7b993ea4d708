from __future__ import annotations

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from requant.errors import ConfigurationError
from requant.quantizers import (OVERLAY_BITS_PER_ENTRY, BitsBreakdown,
                                QuantConfig, SparseTriplets, bits_breakdown,
                                dequantize_layer, group_dequantize,
                                group_quantize, kmeans_fit, quantize_model,
                                reconstruct, sparse_matvec)


def grid_oracle(vals, bound):
    """Exact-rational regrid with banker's rounding, independent of numpy."""
    absmax = max(Fraction(abs(float(v))) for v in vals)
    if absmax == 0:
        return [0] * len(vals)
    out = []
    for v in vals:
        x = Fraction(float(v)) * bound / absmax
        lo = x.__floor__()
        frac = x - lo
        if frac > Fraction(1, 2):
            q = lo + 1
        elif frac < Fraction(1, 2):
            q = lo
        else:
            q = lo if lo % 2 == 0 else lo + 1
        out.append(max(-bound, min(bound, q)))
    return out


# --------------------------------------------------------------------------
# config
# --------------------------------------------------------------------------


def test_quant_config_bounds():
    cfg = QuantConfig(bits=4)
    assert cfg.code_bound == 7
    assert cfg.storage_code_bits == 4
    assert cfg.codebook_size == 16
    full = QuantConfig(bits=4, int_range="full")
    assert full.code_bound == 15
    assert full.storage_code_bits == 5
    km = QuantConfig(bits=3, mode="kmeans")
    assert km.storage_code_bits == 3


def test_quant_config_validation():
    with pytest.raises(ConfigurationError):
        QuantConfig(bits=1)
    with pytest.raises(ConfigurationError):
        QuantConfig(bits=9)
    with pytest.raises(ConfigurationError):
        QuantConfig(group_size=0)
    with pytest.raises(ConfigurationError):
        QuantConfig(mode="ternary")
    with pytest.raises(ConfigurationError):
        QuantConfig(int_range="asym")
    with pytest.raises(ConfigurationError):
        QuantConfig(preprocess="hessian")
    with pytest.raises(ConfigurationError):
        QuantConfig(mode="kmeans", preprocess="activation")


# --------------------------------------------------------------------------
# uniform grids
# --------------------------------------------------------------------------


def test_two_bit_grids_frozen():
    vals = np.array([[0.3, -0.6]])
    codes, scales = group_quantize(vals, bound=3, group=4)  # full range at 2 bits
    assert codes.tolist() == [[2, -3]]
    assert scales.tolist() == [[np.float32(0.2)]]
    assert grid_oracle(vals[0], 3) == [2, -3]

    codes, scales = group_quantize(vals, bound=1, group=4)  # symmetric at 2 bits
    assert codes.tolist() == [[0, -1]]
    assert scales.tolist() == [[np.float32(0.6)]]
    assert grid_oracle(vals[0], 1) == [0, -1]


@given(st.lists(st.floats(-10, 10, allow_nan=False, width=32), min_size=1, max_size=8),
       st.integers(1, 15))
@settings(max_examples=200, deadline=None)
def test_codes_match_rational_oracle(vals, bound):
    mat = np.array([vals], dtype=np.float64)
    codes, _ = group_quantize(mat, bound=bound, group=len(vals))
    assert codes[0].tolist() == grid_oracle(vals, bound)


def test_group_error_bound():
    rng = np.random.default_rng(0)
    mat = rng.normal(size=(100, 100)) * np.exp(rng.normal(size=(100, 1)))
    bound, group = 7, 16
    codes, scales = group_quantize(mat, bound, group)
    deq = group_dequantize(codes, scales, group)
    err = np.abs(mat - deq)
    # per-group half step, plus the float32 scale rounding
    s = np.repeat(scales.astype(np.float64), group, axis=1)[:, :100]
    assert np.all(err <= s / 2 + np.abs(mat) * 1e-6 + 1e-12)


def test_group_quantize_idempotent_bitwise():
    rng = np.random.default_rng(1)
    mat = rng.normal(size=(40, 33))  # ragged tail group
    codes, scales = group_quantize(mat, 7, 16)
    deq = group_dequantize(codes, scales, 16)
    codes2, scales2 = group_quantize(deq, 7, 16)
    assert codes2.tobytes() == codes.tobytes()
    assert scales2.tobytes() == scales.tobytes()


def test_on_grid_values_pass_through():
    s = 0.25  # exact in binary, so products stay exact
    k = np.array([[3, -7, 0, 5, 7, -2]])
    mat = k * s
    codes, scales = group_quantize(mat, 7, 8)
    np.testing.assert_array_equal(codes, k)
    np.testing.assert_array_equal(group_dequantize(codes, scales, 8), mat)


def test_excluded_slots_leave_grid_untouched():
    mat = np.array([[100.0, 0.5, -0.25, 0.125]])
    mask = np.array([[True, False, False, False]])
    codes, scales = group_quantize(mat, 7, 4, exclude_mask=mask)
    assert codes[0, 0] == 0
    # the scale fits the remaining max, not the excluded spike
    assert scales[0, 0] == np.float32(0.5 / 7)


def test_all_zero_group():
    codes, scales = group_quantize(np.zeros((2, 4)), 7, 4)
    assert not codes.any()
    assert not scales.any()
    np.testing.assert_array_equal(group_dequantize(codes, scales, 4), 0.0)


# --------------------------------------------------------------------------
# weighted k-means
# --------------------------------------------------------------------------


def test_kmeans_k1_weighted_mean():
    fit = kmeans_fit(np.array([1.0, 2.0]), np.array([3.0, 1.0]), k=1, seed=0)
    assert fit.codebook.tolist() == [1.25]
    assert fit.assignments.tolist() == [0, 0]


def test_kmeans_objective_nonincreasing():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        vals = rng.normal(size=60)
        wts = rng.uniform(0, 2, size=60)
        fit = kmeans_fit(vals, wts, k=4, seed=seed)
        obj = np.array(fit.objectives)
        assert np.all(np.diff(obj) <= 1e-9 * max(1.0, obj[0]))


def test_kmeans_exact_when_k_covers_distinct_values():
    vals = np.array([1.0, -2.0, 1.0, 3.5, -2.0, 3.5, 1.0])
    fit = kmeans_fit(vals, np.ones(7), k=4, seed=5)
    np.testing.assert_array_equal(fit.codebook[fit.assignments], vals)
    assert fit.objectives[-1] == 0.0


def test_kmeans_seeded_deterministic():
    vals = np.random.default_rng(3).normal(size=50)
    wts = np.ones(50)
    a = kmeans_fit(vals, wts, k=8, seed=[9, 1])
    b = kmeans_fit(vals, wts, k=8, seed=[9, 1])
    assert a.codebook.tobytes() == b.codebook.tobytes()
    assert a.assignments.tobytes() == b.assignments.tobytes()


def test_kmeans_validation():
    with pytest.raises(ConfigurationError):
        kmeans_fit(np.zeros(0), np.zeros(0), 2, 0)
    with pytest.raises(ConfigurationError):
        kmeans_fit(np.ones(3), np.ones(2), 2, 0)
    with pytest.raises(ConfigurationError):
        kmeans_fit(np.ones(3), np.array([1.0, -1.0, 1.0]), 2, 0)
    with pytest.raises(ConfigurationError):
        kmeans_fit(np.ones(3), np.ones(3), 0, 0)


def test_kmeans_zero_weights_still_fit():
    vals = np.array([0.0, 1.0, 2.0, 3.0])
    fit = kmeans_fit(vals, np.zeros(4), k=2, seed=0)
    assert fit.codebook.shape == (2,)
    assert np.isfinite(fit.codebook).all()


# --------------------------------------------------------------------------
# sparse triplets
# --------------------------------------------------------------------------


def test_triplets_build_sorts():
    t = SparseTriplets.build([1, 0, 0], [0, 2, 1], [3, 0, 5], [1.0, 2.0, 3.0])
    assert t.layer.tolist() == [0, 0, 1]
    assert t.row.tolist() == [1, 2, 0]
    assert t.col.tolist() == [5, 0, 3]
    assert t.val.tolist() == [3.0, 2.0, 1.0]
    assert len(t) == 3


def test_triplets_reject_duplicates_and_bad_coords():
    with pytest.raises(ConfigurationError):
        SparseTriplets.build([0, 0], [1, 1], [2, 2], [1.0, 2.0])
    with pytest.raises(ConfigurationError):
        SparseTriplets.build([0], [1 << 16], [0], [1.0])
    with pytest.raises(ConfigurationError):
        SparseTriplets.build([0], [-1], [0], [1.0])


def test_triplets_merge_and_overlap():
    a = SparseTriplets.build([0], [1], [2], [1.0])
    b = SparseTriplets.build([0], [0], [2], [2.0])
    m = a.merged_with(b)
    assert m.row.tolist() == [0, 1]
    assert a.overlaps(a)
    assert not a.overlaps(b)
    assert not a.overlaps(SparseTriplets.empty())
    with pytest.raises(ConfigurationError):
        a.merged_with(a)


# --------------------------------------------------------------------------
# quantized models end to end
# --------------------------------------------------------------------------


@pytest.fixture(params=["uniform", "kmeans"])
def qmodel(request, small_rig):
    cfg = QuantConfig(bits=4, mode=request.param, group_size=4)
    return quantize_model(small_rig.w, cfg), small_rig.w


def test_reconstruct_shapes_and_error(qmodel):
    qm, w = qmodel
    wq = reconstruct(qm)
    assert wq.layout == w.layout
    assert np.abs(wq.values - w.values).max() < np.abs(w.values).max()


def test_outlier_exclusion_restores_exactly(small_rig):
    w = small_rig.w
    seg = w.layout[0]
    exclude = SparseTriplets.build([0, 0, 1], [0, 1, 0], [1, seg.cols, 0],
                                   [0.0, 0.0, 0.0])
    cfg = QuantConfig(bits=3, group_size=4)
    qm = quantize_model(w, cfg, exclude=exclude)
    assert len(qm.outliers) == 3
    wq = reconstruct(qm)
    # stored float32 copies come back bit-exactly (weights are f32-gridded)
    for li, r, c in [(0, 0, 1), (0, 1, seg.cols), (1, 0, 0)]:
        s = w.layout[li]
        flat = s.bias_offset + r if c == s.cols else s.offset + r * s.cols + c
        assert wq.values[flat] == w.values[flat]
    # and the dense code under an overlay slot is zero
    assert qm.layers[0].codes_w[0, 1] == 0


def test_detach_significant_zeroes_codes_and_restores(qmodel):
    qm, w = qmodel
    seg = w.layout[1]
    trips = SparseTriplets.build([1, 1], [0, 2], [1, 3],
                                 [w.values[seg.offset + 0 * seg.cols + 1],
                                  w.values[seg.offset + 2 * seg.cols + 3]])
    qm.detach_significant(trips)
    assert len(qm.significant) == 2
    assert qm.layers[1].codes_w[0, 1] == 0
    assert qm.layers[1].codes_w[2, 3] == 0
    wq = reconstruct(qm)
    assert wq.values[seg.offset + 1] == w.values[seg.offset + 1]
    with pytest.raises(ConfigurationError):
        qm.detach_significant(trips)  # already detached


def test_sparse_matvec_matches_dense(qmodel):
    qm, w = qmodel
    seg = w.layout[0]
    trips = SparseTriplets.build([0], [2], [0], [w.values[seg.offset + 2 * seg.cols]])
    qm.detach_significant(trips)
    rng = np.random.default_rng(0)
    wq = reconstruct(qm)
    for li, (wm, _) in enumerate(wq.matrices()):
        x = rng.normal(size=wm.shape[1])
        np.testing.assert_allclose(sparse_matvec(qm, li, x), wm @ x,
                                   rtol=1e-12, atol=1e-12)


def test_activation_preprocess_round_trips(small_rig):
    from requant.autodiff import activation_stats
    w = small_rig.w
    stats = activation_stats(small_rig.spec, w, small_rig.calib)
    cfg = QuantConfig(bits=4, group_size=4, preprocess="activation")
    qm = quantize_model(w, cfg, act_stats=stats)
    for lay in qm.layers:
        logs = np.log(np.maximum(lay.col_scales.astype(np.float64), 1e-30))
        assert abs(logs.mean()) < 1e-6  # geometric mean pinned to 1
    wq = reconstruct(qm)
    err_pre = np.abs(reconstruct(quantize_model(w, QuantConfig(bits=4, group_size=4))).values
                     - w.values)
    assert np.abs(wq.values - w.values).max() < 10 * max(err_pre.max(), 1e-6)


def test_activation_preprocess_requires_stats(small_rig):
    with pytest.raises(ConfigurationError):
        quantize_model(small_rig.w, QuantConfig(preprocess="activation"))


def test_quantize_model_validates_sensitivity(small_rig):
    w = small_rig.w
    with pytest.raises(ConfigurationError):
        quantize_model(w, QuantConfig(), v=np.ones(w.d - 1))
    with pytest.raises(ConfigurationError):
        quantize_model(w, QuantConfig(), v=-np.ones(w.d))


def test_kmeans_mode_uses_importance(small_rig):
    w = small_rig.w
    v = np.zeros(w.d)
    hot = w.layout[0].offset + 3
    v[hot] = 1.0
    cfg = QuantConfig(bits=2, mode="kmeans")
    qm = quantize_model(w, cfg, v=v, kmeans_seed=1)
    wq = reconstruct(qm)
    # all of the importance sits on one coordinate: it lands on a centroid
    assert abs(wq.values[hot] - w.values[hot]) < 1e-7


# --------------------------------------------------------------------------
# storage accounting
# --------------------------------------------------------------------------


def test_overlay_bits_per_entry_value():
    assert OVERLAY_BITS_PER_ENTRY == 48


def test_bits_breakdown_half_percent_rule():
    # 0.5% overlay entries at 48 bits each cost exactly 0.24 bits per weight
    bb = BitsBreakdown(d=10000, code_bits=0, scale_bits=0, overlay_entries=50)
    assert bb.overlay_per_weight == 0.24
    assert bb.per_weight == 0.24


def test_bits_breakdown_uniform(small_rig):
    cfg = QuantConfig(bits=4, group_size=4)
    qm = quantize_model(small_rig.w, cfg)
    bb = bits_breakdown(qm)
    nscales = sum(l.scales_w.size + l.scales_b.size for l in qm.layers)
    assert bb.d == small_rig.w.d
    assert bb.code_bits == 4 * bb.d
    assert bb.scale_bits == 32 * nscales
    assert bb.overlay_entries == 0
    assert bb.per_weight == pytest.approx(4 + 32 * nscales / bb.d)


def test_bits_breakdown_full_range_and_kmeans(small_rig):
    qm_full = quantize_model(small_rig.w, QuantConfig(bits=4, int_range="full"))
    assert bits_breakdown(qm_full).code_bits == 5 * qm_full.d
    qm_km = quantize_model(small_rig.w, QuantConfig(bits=3, mode="kmeans"))
    bb = bits_breakdown(qm_km)
    assert bb.code_bits == 3 * bb.d
    assert bb.scale_bits == 32 * 8 * len(qm_km.layers)
