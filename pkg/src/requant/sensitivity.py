"""Per-weight sensitivity metrics and Taylor-expansion diagnostics.

The metrics are the usual suspects for importance-weighted quantization:
gradient magnitude, mean absolute input activation (broadcast across each
weight matrix), and the diagonal of the sample-gradient outer-product
approximation to the Hessian.  The study helpers put first- and second-order
Taylor predictions of the loss change next to the measured change so their
breakdown is visible in one table.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff
from .errors import ConfigurationError
from .models import CalibSet, ComputationSpec, WeightVector, interpolate
from .quantizers import QuantConfig, SparseTriplets, quantize_model, reconstruct

METRIC_KINDS = ("gradient", "activation", "fisher", "pqi", "uniform")

# sign applied to the averaged gradient outer product when it stands in for
# the Hessian: -1 keeps the second-order term a correction that lowers the
# predicted change, +1 treats it as a positive-semidefinite curvature
FISHER_SIGNS = (-1, 1)


@dataclass
class SensitivityVector:
    """Nonnegative per-coordinate importance scores aligned to a layout."""

    values: np.ndarray
    kind: str

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ConfigurationError("sensitivity values must be a 1-D vector")
        if self.kind not in METRIC_KINDS:
            raise ConfigurationError(f"unknown sensitivity kind {self.kind!r}")
        if self.values.size and self.values.min() < 0:
            raise ConfigurationError("sensitivity values must be nonnegative")


def metric_gradient(spec: ComputationSpec, w: WeightVector, data: CalibSet) -> SensitivityVector:
    """Elementwise |gradient| of the mean loss at w."""
    g = autodiff.grad(spec, w, data)
    return SensitivityVector(np.abs(g), "gradient")


def metric_activation(spec: ComputationSpec, w: WeightVector, data: CalibSet) -> SensitivityVector:
    """Mean |input activation| broadcast over each weight matrix.

    Every weight in column c of a layer gets that column's statistic; bias
    slots get 1.0, the statistic of their constant unit input.
    """
    stats = autodiff.activation_stats(spec, w, data)
    out = np.empty(w.d)
    for seg, stat in zip(w.layout, stats):
        out[seg.offset : seg.bias_offset] = np.tile(stat, seg.rows)
        if seg.has_bias:
            out[seg.bias_offset : seg.offset + seg.size] = 1.0
    return SensitivityVector(out, "activation")


def metric_fisher_diag(spec: ComputationSpec, w: WeightVector, data: CalibSet) -> SensitivityVector:
    """Diagonal of the mean per-sample gradient outer product."""
    per = autodiff.per_sample_grads(spec, w, data)
    return SensitivityVector((per * per).mean(axis=0), "fisher")


def taylor_first(spec: ComputationSpec, w: WeightVector, w_tilde: WeightVector,
                 data: CalibSet) -> float:
    """First-order prediction of F(w_tilde) - F(w): grad(w) . (w_tilde - w)."""
    g = autodiff.grad(spec, w, data)
    return float(g @ (w_tilde.values - w.values))


def taylor_second(spec: ComputationSpec, w: WeightVector, w_tilde: WeightVector,
                  data: CalibSet, fisher_sign: int = -1) -> float:
    """Second-order term 1/2 d^T H d with H approximated by its diagonal.

    The diagonal is ``fisher_sign`` times the mean squared per-sample
    gradient; see :data:`FISHER_SIGNS`.
    """
    if fisher_sign not in FISHER_SIGNS:
        raise ConfigurationError(f"fisher_sign must be one of {FISHER_SIGNS}")
    h = fisher_sign * metric_fisher_diag(spec, w, data).values
    d = w_tilde.values - w.values
    return float(0.5 * (d * h) @ d)


@dataclass
class TaylorRow:
    """One study row: predictions and the measured loss change for a scope."""

    label: str
    first: float
    second: float
    actual: float
    actual_heldout: float | None = None

    @property
    def underestimation(self) -> float:
        """actual / |first + second|; large values mean the expansion missed."""
        denom = abs(self.first + self.second)
        return self.actual / denom if denom > 0 else float("inf")


def _delta_f(spec, w, w_prime, data) -> float:
    return autodiff.forward_loss(spec, w_prime, data) - autodiff.forward_loss(spec, w, data)


def layer_study(spec: ComputationSpec, w: WeightVector, data: CalibSet,
                cfg: QuantConfig, v: np.ndarray | None = None, kmeans_seed: int = 0,
                act_stats: list[np.ndarray] | None = None,
                heldout: CalibSet | None = None,
                fisher_sign: int = -1) -> list[TaylorRow]:
    """Quantize one layer at a time (then all at once) and tabulate
    first-order, second-order, and measured loss changes.

    Per-layer quantization is independent, so single-layer weight vectors are
    spliced out of the full quantization.
    """
    qm = quantize_model(w, cfg, v=v, exclude=None, kmeans_seed=kmeans_seed,
                        act_stats=act_stats)
    w_full = reconstruct(qm)
    rows = []
    scopes = [(seg.name, seg) for seg in w.layout] + [("all", None)]
    for label, seg in scopes:
        w_prime = w.copy()
        if seg is None:
            w_prime = w_full
        else:
            sl = slice(seg.offset, seg.offset + seg.size)
            w_prime.values[sl] = w_full.values[sl]
        rows.append(TaylorRow(
            label,
            taylor_first(spec, w, w_prime, data),
            taylor_second(spec, w, w_prime, data, fisher_sign),
            _delta_f(spec, w, w_prime, data),
            None if heldout is None else _delta_f(spec, w, w_prime, heldout),
        ))
    return rows


def lambda_study(spec: ComputationSpec, w: WeightVector, w_tilde: WeightVector,
                 data: CalibSet, lambdas, heldout: CalibSet | None = None,
                 fisher_sign: int = -1) -> list[TaylorRow]:
    """Shrink the perturbation: w' = (1 - lam) w + lam w_tilde per lambda.

    The first-order column is linear in lambda and the second-order column
    quadratic, by construction; the measured column shows where the
    expansion takes over.
    """
    rows = []
    for lam in lambdas:
        w_prime = interpolate(w, w_tilde, float(lam))
        rows.append(TaylorRow(
            f"{lam:g}",
            taylor_first(spec, w, w_prime, data),
            taylor_second(spec, w, w_prime, data, fisher_sign),
            _delta_f(spec, w, w_prime, data),
            None if heldout is None else _delta_f(spec, w, w_prime, heldout),
        ))
    return rows


def make_metric(kind: str, spec: ComputationSpec, w: WeightVector,
                data: CalibSet) -> SensitivityVector:
    """Dispatch by metric name; ``uniform`` is all ones (unweighted)."""
    if kind == "gradient":
        return metric_gradient(spec, w, data)
    if kind == "activation":
        return metric_activation(spec, w, data)
    if kind == "fisher":
        return metric_fisher_diag(spec, w, data)
    if kind == "uniform":
        return SensitivityVector(np.ones(w.d), "uniform")
    raise ConfigurationError(f"unknown metric kind {kind!r}")
