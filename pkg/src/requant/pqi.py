"""Path-integral sensitivity: gradient magnitudes averaged along the
straight line from the full-precision weights to their quantized image.

The loss change F(w_tilde) - F(w) equals the line integral of the gradient
along that segment.  Sampling the gradient at N right-endpoint nodes gives

* ``signed_delta_f``: the rectangle-rule estimate of the true change, and
* ``v_pqi``: the elementwise mean |gradient| over the same nodes, whose
  inner product with |w_tilde - w| (``delta_f_pqi``) bounds the magnitude of
  the signed estimate from above by the triangle inequality.

Unlike a Taylor expansion at w, the nodes cover the whole segment, so the
estimate keeps working when the perturbation leaves the expansion's tiny
radius of validity.  The rectangle rule converges at first order in 1/N;
N = 32 is plenty at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff
from .errors import ConfigurationError, NumericalError
from .models import CalibSet, ComputationSpec, WeightVector
from .sensitivity import SensitivityVector

RULES = ("right", "midpoint")
DEFAULT_INTERVALS = 32
COVERAGE_PERCENTS = (0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 25.0, 50.0, 100.0)
GRANULARITIES = ("element", "group", "sublayer", "layer")


def path_positions(intervals: int, rule: str = "right") -> np.ndarray:
    """Node positions t in (0, 1] along the segment."""
    if intervals < 1:
        raise ConfigurationError("need at least one interval")
    if rule not in RULES:
        raise ConfigurationError(f"unknown quadrature rule {rule!r}")
    i = np.arange(1, intervals + 1, dtype=np.float64)
    return i / intervals if rule == "right" else (i - 0.5) / intervals


def path_gradient_mean(grad_fn, w_values: np.ndarray, wt_values: np.ndarray,
                       intervals: int, rule: str = "right"):
    """(mean |gradient|, mean gradient) over the path nodes.

    ``grad_fn`` maps a parameter vector to its gradient.  Nodes are visited
    in order and accumulated sequentially, so results are bit-stable.
    """
    delta = wt_values - w_values
    sum_abs = np.zeros_like(w_values)
    sum_g = np.zeros_like(w_values)
    for i, t in enumerate(path_positions(intervals, rule)):
        g = np.asarray(grad_fn(w_values + t * delta), dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient at path node {i} (t={t:g})")
        sum_abs += np.abs(g)
        sum_g += g
    return sum_abs / intervals, sum_g / intervals


@dataclass
class PQIResult:
    """Everything the downstream ranking and reports need, in one place."""

    v: SensitivityVector          # mean |gradient| per coordinate
    intervals: int
    rule: str
    signed_delta_f: float         # quadrature estimate of F(w_tilde) - F(w)
    delta_f_pqi: float            # v . |w_tilde - w|, upper bound on |signed|
    abs_delta: np.ndarray         # |w_tilde - w|
    layout: tuple

    @property
    def contributions(self) -> np.ndarray:
        """Per-coordinate share v_j * |delta_j|; sums to delta_f_pqi."""
        return self.v.values * self.abs_delta


def pqi_integral(spec: ComputationSpec, w: WeightVector, w_tilde: WeightVector,
                 data: CalibSet, intervals: int = DEFAULT_INTERVALS,
                 rule: str = "right") -> PQIResult:
    """Path-integral sensitivity of the calibration loss between w and w_tilde."""
    if w.layout != w_tilde.layout:
        raise ConfigurationError("weight vectors have different layouts")
    layout = w.layout

    def grad_fn(values):
        return autodiff.grad(spec, WeightVector(values, layout), data)

    v, gbar = path_gradient_mean(grad_fn, w.values, w_tilde.values, intervals, rule)
    delta = w_tilde.values - w.values
    abs_delta = np.abs(delta)
    return PQIResult(
        v=SensitivityVector(v, "pqi"),
        intervals=intervals,
        rule=rule,
        signed_delta_f=float(gbar @ delta),
        delta_f_pqi=float(v @ abs_delta),
        abs_delta=abs_delta,
        layout=layout,
    )


def _group_labels(seg, group_size):
    ngroups = -(-seg.cols // group_size)
    labels = []
    for r in range(seg.rows):
        labels += [f"{seg.name}.w[{r},{g}]" for g in range(ngroups)]
    if seg.has_bias:
        labels += [f"{seg.name}.b[{g}]" for g in range(-(-seg.rows // group_size))]
    return labels


def aggregate(result: PQIResult, granularity: str, group_size: int | None = None):
    """Partition the per-coordinate contributions and sum within each part.

    Returns (label, count, total, mean) rows.  Totals across any granularity
    add up to ``delta_f_pqi`` because the parts tile the coordinates.
    """
    if granularity not in GRANULARITIES:
        raise ConfigurationError(f"unknown granularity {granularity!r}")
    contrib = result.contributions
    rows = []

    def emit(label, chunk):
        rows.append((label, chunk.size, float(chunk.sum()),
                     float(chunk.mean()) if chunk.size else 0.0))

    for seg in result.layout:
        w_part = contrib[seg.offset : seg.bias_offset]
        b_part = contrib[seg.bias_offset : seg.offset + seg.size]
        if granularity == "layer":
            emit(seg.name, contrib[seg.offset : seg.offset + seg.size])
        elif granularity == "sublayer":
            emit(f"{seg.name}.weight", w_part)
            if seg.has_bias:
                emit(f"{seg.name}.bias", b_part)
        elif granularity == "element":
            for r in range(seg.rows):
                for c in range(seg.cols):
                    emit(f"{seg.name}.w[{r},{c}]", w_part[r * seg.cols + c : r * seg.cols + c + 1])
            for r in range(b_part.size):
                emit(f"{seg.name}.b[{r}]", b_part[r : r + 1])
        else:
            if group_size is None or group_size < 1:
                raise ConfigurationError("group granularity needs a positive group_size")
            mat = w_part.reshape(seg.rows, seg.cols)
            ngroups = -(-seg.cols // group_size)
            labels = iter(_group_labels(seg, group_size))
            for r in range(seg.rows):
                for g in range(ngroups):
                    emit(next(labels), mat[r, g * group_size : (g + 1) * group_size])
            for g in range(-(-b_part.size // group_size) if seg.has_bias else 0):
                emit(next(labels), b_part[g * group_size : (g + 1) * group_size])
    return rows


def coverage_curve(result: PQIResult, percents=COVERAGE_PERCENTS):
    """Fraction of delta_f_pqi carried by the top-p% largest contributions.

    Returns (percent, fraction) pairs.  A zero total gives a flat zero curve.
    """
    contrib = np.sort(result.contributions)[::-1]
    total = result.delta_f_pqi
    d = contrib.size
    csum = np.cumsum(contrib)
    out = []
    for p in percents:
        if not 0.0 <= p <= 100.0:
            raise ConfigurationError(f"percent {p} outside [0, 100]")
        k = int(np.rint(p * d / 100.0))
        frac = 0.0 if (k == 0 or total <= 0) else float(csum[min(k, d) - 1] / total)
        out.append((float(p), frac))
    return out
