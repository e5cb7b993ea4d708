"""Forward and backward passes for the dense classifier family.

Hand-written reverse-mode differentiation: the architecture is a fixed
affine/nonlinearity stack, so closed-form backprop is both faster and easier
to audit than a general tape.  All arithmetic is float64; batch reductions
use numpy's fixed pairwise order, so repeated calls are bit-identical.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, NumericalError
from .models import CalibSet, ComputationSpec, WeightVector, make_layout


def _check(spec: ComputationSpec, w: WeightVector, data: CalibSet) -> None:
    if w.layout != make_layout(spec):
        raise ConfigurationError("weight layout does not match the computation spec")
    if data.d_in != spec.d_in or data.classes != spec.classes:
        raise ConfigurationError(
            f"data is ({data.d_in} dims, {data.classes} classes), "
            f"spec wants ({spec.d_in}, {spec.classes})"
        )


def _forward(spec, mats, x):
    """Returns (acts, logits): acts[i] is the input seen by affine layer i."""
    acts = [x]
    a = x
    last = len(mats) - 1
    for i, (wm, b) in enumerate(mats):
        z = a @ wm.T + b
        if i == last:
            return acts, z
        a = np.maximum(z, 0.0) if spec.nonlin == "relu" else np.tanh(z)
        acts.append(a)
    raise AssertionError("unreachable")


def _softmax_ce(logits, y):
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    s = e.sum(axis=1, keepdims=True)
    losses = (m[:, 0] + np.log(s[:, 0])) - logits[np.arange(y.size), y]
    return losses, e / s


def _act_derivative(spec, a):
    # expressed through the activation value itself: relu' = [a > 0],
    # tanh' = 1 - a^2 (a == tanh(z)); relu at the kink takes derivative 0
    if spec.nonlin == "relu":
        return (a > 0.0).astype(np.float64)
    return 1.0 - a * a


def per_sample_losses(spec: ComputationSpec, w: WeightVector, data: CalibSet) -> np.ndarray:
    _check(spec, w, data)
    _, logits = _forward(spec, w.matrices(), data.x.astype(np.float64))
    losses, _ = _softmax_ce(logits, data.y)
    return losses


def forward_loss(spec: ComputationSpec, w: WeightVector, data: CalibSet) -> float:
    """Mean cross-entropy of the model on the sample set."""
    return float(per_sample_losses(spec, w, data).mean())


def predict(spec: ComputationSpec, w: WeightVector, data: CalibSet) -> np.ndarray:
    _check(spec, w, data)
    _, logits = _forward(spec, w.matrices(), data.x.astype(np.float64))
    return logits.argmax(axis=1).astype(np.int32)


def _backward_deltas(spec, mats, acts, dlogits):
    """Per-layer upstream deltas, iterating from the output backward."""
    deltas = [None] * len(mats)
    d = dlogits
    for i in range(len(mats) - 1, -1, -1):
        deltas[i] = d
        if i > 0:
            d = (d @ mats[i][0]) * _act_derivative(spec, acts[i])
    return deltas


def loss_and_grad(spec: ComputationSpec, w: WeightVector, data: CalibSet):
    """(mean loss, gradient of the mean loss as a flat length-D vector)."""
    _check(spec, w, data)
    mats = w.matrices()
    acts, logits = _forward(spec, mats, data.x.astype(np.float64))
    losses, probs = _softmax_ce(logits, data.y)
    n = data.n
    dlogits = probs.copy()
    dlogits[np.arange(n), data.y] -= 1.0
    dlogits /= n
    deltas = _backward_deltas(spec, mats, acts, dlogits)
    g = np.empty(w.d)
    for seg, delta, a in zip(w.layout, deltas, acts):
        g[seg.offset : seg.bias_offset] = (delta.T @ a).ravel()
        g[seg.bias_offset : seg.offset + seg.size] = delta.sum(axis=0)
    return float(losses.mean()), g


def grad(spec: ComputationSpec, w: WeightVector, data: CalibSet) -> np.ndarray:
    return loss_and_grad(spec, w, data)[1]


def per_sample_grads(spec: ComputationSpec, w: WeightVector, data: CalibSet) -> np.ndarray:
    """Gradient of each sample's own loss, stacked as an (n, D) matrix.

    Row mean equals :func:`grad` up to summation order.  Materializes n
    vectors, which is fine at desk scale.
    """
    _check(spec, w, data)
    mats = w.matrices()
    acts, logits = _forward(spec, mats, data.x.astype(np.float64))
    _, probs = _softmax_ce(logits, data.y)
    n = data.n
    dlogits = probs.copy()
    dlogits[np.arange(n), data.y] -= 1.0
    deltas = _backward_deltas(spec, mats, acts, dlogits)
    out = np.empty((n, w.d))
    for seg, delta, a in zip(w.layout, deltas, acts):
        out[:, seg.offset : seg.bias_offset] = np.einsum("nr,nc->nrc", delta, a).reshape(n, -1)
        out[:, seg.bias_offset : seg.offset + seg.size] = delta
    return out


def activation_stats(spec: ComputationSpec, w: WeightVector, data: CalibSet) -> list[np.ndarray]:
    """Mean absolute input activation per affine layer.

    Entry i has length cols(i): the statistic of whatever feeds layer i
    (the raw features for layer 0).
    """
    _check(spec, w, data)
    acts, _ = _forward(spec, w.matrices(), data.x.astype(np.float64))
    return [np.abs(a).mean(axis=0) for a in acts]


def check_finite(vec: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(vec)):
        bad = int(np.flatnonzero(~np.isfinite(vec))[0])
        raise NumericalError(f"non-finite value in {what} (first at index {bad})")
    return vec
