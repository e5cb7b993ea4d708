"""Closed-form backprop checked against central finite differences and a
loop-written forward pass."""

from __future__ import annotations

import math

import numpy as np
import pytest

from requant import autodiff
from requant.errors import ConfigurationError, NumericalError
from requant.models import (CalibSet, ComputationSpec, WeightVector,
                            generate_calib, init_weights, make_layout)

ARCHS = [
    (3, (4,), 2, "relu"),
    (3, (4,), 2, "tanh"),
    (5, (6, 4), 3, "relu"),
    (5, (6, 4), 3, "tanh"),
    (4, (5, 4, 3), 3, "relu"),
]


def _setup(d_in, hidden, classes, nonlin, seed=1, n=12):
    spec = ComputationSpec(d_in, hidden, classes, nonlin)
    w = init_weights(spec, seed)
    data = generate_calib(seed + 100, n, d_in, classes)
    return spec, w, data


def naive_loss(spec, w, data):
    """Per-sample forward pass written with explicit loops."""
    mats = w.matrices()
    losses = []
    for i in range(data.n):
        a = data.x[i].astype(np.float64)
        for li, (wm, b) in enumerate(mats):
            z = wm @ a + b
            if li < len(mats) - 1:
                a = np.maximum(z, 0.0) if spec.nonlin == "relu" else np.tanh(z)
            else:
                a = z
        m = a.max()
        losses.append(math.log(np.exp(a - m).sum()) + m - a[data.y[i]])
    return float(np.mean(losses))


@pytest.mark.parametrize("arch", ARCHS)
def test_forward_matches_naive(arch):
    spec, w, data = _setup(*arch)
    assert autodiff.forward_loss(spec, w, data) == pytest.approx(
        naive_loss(spec, w, data), rel=1e-12)


@pytest.mark.parametrize("arch", ARCHS)
def test_grad_matches_central_differences(arch):
    spec, w, data = _setup(*arch)
    g = autodiff.grad(spec, w, data)
    h = 1e-6
    worst = 0.0
    scale = max(np.abs(g).max(), 1e-8)
    for i in range(w.d):
        wp, wm = w.copy(), w.copy()
        wp.values[i] += h
        wm.values[i] -= h
        fd = (autodiff.forward_loss(spec, wp, data)
              - autodiff.forward_loss(spec, wm, data)) / (2 * h)
        worst = max(worst, abs(fd - g[i]) / scale)
    assert worst < 1e-5


def test_loss_and_grad_consistent(small_rig):
    r = small_rig
    loss, g = autodiff.loss_and_grad(r.spec, r.w, r.calib)
    assert loss == pytest.approx(autodiff.forward_loss(r.spec, r.w, r.calib), rel=0)
    np.testing.assert_array_equal(g, autodiff.grad(r.spec, r.w, r.calib))


def test_per_sample_grads_average_to_grad(small_rig):
    r = small_rig
    gs = autodiff.per_sample_grads(r.spec, r.w, r.calib)
    assert gs.shape == (r.calib.n, r.w.d)
    np.testing.assert_allclose(gs.mean(axis=0),
                               autodiff.grad(r.spec, r.w, r.calib),
                               rtol=1e-9, atol=1e-12)


def test_per_sample_losses_average_to_loss(small_rig):
    r = small_rig
    ls = autodiff.per_sample_losses(r.spec, r.w, r.calib)
    assert ls.shape == (r.calib.n,)
    assert ls.mean() == pytest.approx(autodiff.forward_loss(r.spec, r.w, r.calib),
                                      rel=1e-12)


def test_zero_weights_give_log_classes(tiny_spec, tiny_data):
    layout = make_layout(tiny_spec)
    w = WeightVector(np.zeros(sum(s.size for s in layout)), layout)
    assert autodiff.forward_loss(tiny_spec, w, tiny_data) == pytest.approx(
        math.log(tiny_spec.classes), rel=1e-12)


def test_predict_is_argmax(small_rig):
    r = small_rig
    preds = autodiff.predict(r.spec, r.w, r.calib)
    assert preds.shape == (r.calib.n,)
    assert set(np.unique(preds)) <= set(range(r.spec.classes))


def test_activation_stats_first_layer_is_input_mean(small_rig):
    r = small_rig
    stats = autodiff.activation_stats(r.spec, r.w, r.calib)
    assert len(stats) == r.spec.n_layers
    np.testing.assert_allclose(
        stats[0], np.abs(r.calib.x.astype(np.float64)).mean(axis=0), rtol=1e-12)
    for st, seg in zip(stats, r.w.layout):
        assert st.shape == (seg.cols,)
        assert (st >= 0).all()


def test_dimension_mismatch_rejected(tiny_spec, tiny_data):
    other = ComputationSpec(tiny_spec.d_in + 1, tiny_spec.hidden, tiny_spec.classes)
    w = init_weights(other, 0)
    with pytest.raises(ConfigurationError):
        autodiff.forward_loss(other, w, tiny_data)


def test_check_finite_raises_with_index():
    vec = np.array([0.0, np.inf, 1.0])
    with pytest.raises(NumericalError, match="index 1"):
        autodiff.check_finite(vec, "gradient")


def test_grad_deterministic(small_rig):
    r = small_rig
    a = autodiff.grad(r.spec, r.w, r.calib)
    b = autodiff.grad(r.spec, r.w, r.calib)
    assert a.tobytes() == b.tobytes()
