"""Dense-and-sparse quantization pipeline.

Six stages: (1) quantize everything, (2) grid-search the temperature that
apportions an outlier budget across layers by their path-integral loss
shares, (3) pick the largest-magnitude weights per layer as outliers,
(4) re-quantize with the outliers excluded and stored sparsely, (5) detach
the most damaging surviving weights (path-integral rank times residual) in
fixed-size passes, (6) done.  Every stage records calibration loss and
storage cost so the trade-off is auditable.

Budgets are percentages of the selectable coordinate count (weight matrices
only unless ``include_bias``), rounded half-to-even.  Failures name their
stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff
from .config import derive_seed
from .errors import ConfigurationError
from .models import CalibSet, ComputationSpec, WeightVector
from .pqi import aggregate, pqi_integral
from .quantizers import (QuantConfig, QuantizedModel, SparseTriplets,
                         bits_breakdown, quantize_model, reconstruct)
from .sensitivity import make_metric

SELECTIONS = ("pqi", "random")


@dataclass
class OutlierPlan:
    """Outcome of the temperature grid search."""

    t: float
    counts: np.ndarray            # per-layer outlier counts at the chosen t
    budget: int
    shortfall: int                # budget minus placed counts (tiny layers)
    grid: list = field(default_factory=list)   # (t, calib loss) per grid point
    dfpqi: np.ndarray | None = None             # per-layer shares fed to Eq. apportioning


@dataclass
class DetachStep:
    index: int
    coords: SparseTriplets
    dfpqi_before: float
    dfpqi_after: float            # same-nodes estimate: before minus detached mass
    loss_after: float


@dataclass
class StepRecord:
    step: int
    description: str
    calib_loss: float
    heldout_loss: float | None
    bits_per_weight: float


@dataclass
class PipelineResult:
    qm: QuantizedModel
    steps: list[StepRecord]
    plan: OutlierPlan
    detach: list[DetachStep]

    @property
    def final_loss(self) -> float:
        return self.steps[-1].calib_loss


# ---------------------------------------------------------------------------
# budget apportioning
# ---------------------------------------------------------------------------


def allocate_budget(shares_base: np.ndarray, dims: np.ndarray, budget: int,
                    t: float) -> np.ndarray:
    """Split ``budget`` integer slots over layers proportional to
    shares_base**t, largest-remainder rounded, clamped to layer capacity.

    Clamped excess is re-apportioned among the unclamped layers; if the
    budget exceeds total capacity the leftover is dropped (the caller sees
    it as a shortfall).  An all-zero share vector falls back to uniform.
    """
    shares_base = np.asarray(shares_base, dtype=np.float64)
    dims = np.asarray(dims, dtype=np.int64)
    if shares_base.shape != dims.shape or shares_base.ndim != 1:
        raise ConfigurationError("shares and dims must be equal-length vectors")
    if shares_base.size == 0 or shares_base.min() < 0 or dims.min() < 0:
        raise ConfigurationError("shares must be nonnegative and dims present")
    if t < 0:
        raise ConfigurationError("temperature must be nonnegative")
    counts = np.zeros(dims.size, dtype=np.int64)
    if budget <= 0:
        return counts
    if budget >= dims.sum():
        return dims.copy()
    free = np.ones(dims.size, dtype=bool)
    remaining = int(budget)
    while remaining > 0 and free.any():
        shares = shares_base[free] ** t
        if shares.sum() == 0:
            shares = np.ones(shares.size)
        raw = remaining * shares / shares.sum()
        base = np.floor(raw).astype(np.int64)
        leftovers = remaining - int(base.sum())
        order = np.argsort(-(raw - base), kind="stable")  # ties: lower index
        base[order[:leftovers]] += 1
        idx = np.flatnonzero(free)
        over = base > dims[idx]
        if not over.any():
            counts[idx] = base
            remaining = 0
        else:
            clamped = idx[over]
            counts[clamped] = dims[clamped]
            free[clamped] = False
            remaining -= int(dims[clamped].sum())
    return counts


def outlier_allocation(per_layer_dfpqi, dims, r_o: float, t: float) -> np.ndarray:
    """Per-layer outlier counts for a global budget of r_o percent of sum(dims)."""
    dims = np.asarray(dims, dtype=np.int64)
    if r_o < 0:
        raise ConfigurationError("outlier ratio must be nonnegative")
    budget = int(np.rint(dims.sum() * r_o / 100.0))
    return allocate_budget(per_layer_dfpqi, dims, budget, t)


def select_outliers(w_mat: np.ndarray, count: int):
    """(rows, cols) of the ``count`` largest-magnitude entries.

    Ties resolve in ascending (row, col) order via the stable sort.
    """
    flat = np.abs(np.asarray(w_mat, dtype=np.float64)).ravel()
    if count < 0 or count > flat.size:
        raise ConfigurationError(f"cannot select {count} of {flat.size} entries")
    order = np.argsort(-flat, kind="stable")[:count]
    return order // w_mat.shape[1], order % w_mat.shape[1]


# ---------------------------------------------------------------------------
# selection domain bookkeeping
# ---------------------------------------------------------------------------


def _coord_tables(layout, include_bias: bool):
    """Flat-index -> (layer, row, col) tables plus the selectable mask."""
    d = sum(seg.size for seg in layout)
    layer_ix = np.empty(d, dtype=np.int32)
    row_ix = np.empty(d, dtype=np.int32)
    col_ix = np.empty(d, dtype=np.int32)
    selectable = np.zeros(d, dtype=bool)
    for li, seg in enumerate(layout):
        wsl = slice(seg.offset, seg.bias_offset)
        layer_ix[wsl] = li
        row_ix[wsl] = np.arange(seg.weight_size) // seg.cols
        col_ix[wsl] = np.arange(seg.weight_size) % seg.cols
        selectable[wsl] = True
        if seg.has_bias:
            bsl = slice(seg.bias_offset, seg.offset + seg.size)
            layer_ix[bsl] = li
            row_ix[bsl] = np.arange(seg.rows)
            col_ix[bsl] = seg.cols
            selectable[bsl] = include_bias
    return layer_ix, row_ix, col_ix, selectable


def _triplets_at(w: WeightVector, layer_ix, row_ix, col_ix, flat_idx) -> SparseTriplets:
    return SparseTriplets.build(
        layer_ix[flat_idx], row_ix[flat_idx], col_ix[flat_idx],
        w.values[flat_idx].astype(np.float32),
    )


def _detached_flat_mask(qm: QuantizedModel, layout) -> np.ndarray:
    mask = np.zeros(sum(seg.size for seg in layout), dtype=bool)
    for trips in (qm.outliers, qm.significant):
        for i in range(len(trips)):
            seg = layout[trips.layer[i]]
            r, c = int(trips.row[i]), int(trips.col[i])
            flat = seg.bias_offset + r if c == seg.cols else seg.offset + r * seg.cols + c
            mask[flat] = True
    return mask


# ---------------------------------------------------------------------------
# stage 2: outlier temperature search
# ---------------------------------------------------------------------------


def outlier_ratio_search(spec: ComputationSpec, w: WeightVector, data: CalibSet,
                         cfg: QuantConfig, v: np.ndarray | None, r_o: float,
                         alpha: float, intervals: int, kmeans_seed: int = 0,
                         t_max: float = 1.0, act_stats=None,
                         qm_pre: QuantizedModel | None = None):
    """Grid-search the apportioning temperature t over {0, alpha, 2*alpha, ...}.

    Layer shares come from one path-integral run against the pre-quantized
    model; each grid point re-quantizes with its own outlier set and is
    scored by calibration loss.  Ties keep the smaller t.  Returns
    (plan, quantized model at the winning t).  Outliers live in the weight
    matrices; biases are never selected by magnitude.
    """
    if alpha <= 0:
        raise ConfigurationError("alpha must be positive")
    if qm_pre is None:
        qm_pre = quantize_model(w, cfg, v=v, kmeans_seed=kmeans_seed, act_stats=act_stats)
    layout = w.layout
    dims = np.array([seg.weight_size for seg in layout], dtype=np.int64)
    budget = int(np.rint(dims.sum() * r_o / 100.0))
    res = pqi_integral(spec, w, reconstruct(qm_pre), data, intervals)
    dfpqi = np.array([total for _, _, total, _ in aggregate(res, "layer")])

    if budget == 0:
        loss = autodiff.forward_loss(spec, reconstruct(qm_pre), data)
        plan = OutlierPlan(0.0, np.zeros(len(layout), dtype=np.int64), 0, 0,
                           [(0.0, loss)], dfpqi)
        return plan, qm_pre

    ts, t = [], 0.0
    while t < t_max - 1e-12:
        ts.append(round(t, 12))
        t += alpha
    best = None
    grid = []
    for t in ts:
        counts = allocate_budget(dfpqi, dims, budget, t)
        parts = []
        for li, seg in enumerate(layout):
            if counts[li] == 0:
                continue
            wm = w.matrices()[li][0]
            rows, cols = select_outliers(wm, int(counts[li]))
            parts.append((np.full(rows.size, li), rows, cols))
        if parts:
            trips = SparseTriplets.build(
                np.concatenate([p[0] for p in parts]),
                np.concatenate([p[1] for p in parts]),
                np.concatenate([p[2] for p in parts]),
                np.zeros(sum(p[1].size for p in parts), dtype=np.float32),
            )
        else:
            trips = SparseTriplets.empty()
        qm_t = quantize_model(w, cfg, v=v, exclude=trips, kmeans_seed=kmeans_seed,
                              act_stats=act_stats)
        loss_t = autodiff.forward_loss(spec, reconstruct(qm_t), data)
        grid.append((t, loss_t))
        if best is None or loss_t < best[1]:   # strict: ties keep the smaller t
            best = (t, loss_t, counts, qm_t)
    t_best, _, counts_best, qm_best = best
    plan = OutlierPlan(t_best, counts_best, budget,
                       int(budget - counts_best.sum()), grid, dfpqi)
    return plan, qm_best


# ---------------------------------------------------------------------------
# stage 5: significant-weight passes
# ---------------------------------------------------------------------------


def significant_weight_search(spec: ComputationSpec, w: WeightVector,
                              qm: QuantizedModel, data: CalibSet, r_s: float,
                              beta: float, intervals: int,
                              include_bias: bool = False,
                              scope: str = "global") -> list[DetachStep]:
    """Detach the top beta% coordinates by v_pqi * |w_tilde - w|, r_s/beta times.

    Each pass re-integrates against the current reconstruction, ranks the
    not-yet-detached selectable coordinates, and stores the winners' original
    float32 weights in the significant overlay (their dense codes drop to
    zero, so they reconstruct exactly).  ``qm`` is updated in place.
    """
    if scope not in ("global", "per-layer"):
        raise ConfigurationError(f"unknown significant-weight scope {scope!r}")
    if beta <= 0 or r_s < 0:
        raise ConfigurationError("need beta > 0 and r_s >= 0")
    passes = int(np.rint(r_s / beta))
    if abs(r_s - passes * beta) > 1e-9 * max(beta, 1.0) or (r_s > 0 and passes == 0):
        raise ConfigurationError(f"r_s={r_s} is not an integer multiple of beta={beta}")
    layout = w.layout
    layer_ix, row_ix, col_ix, selectable = _coord_tables(layout, include_bias)
    dims = np.array([seg.weight_size + (seg.rows if include_bias and seg.has_bias else 0)
                     for seg in layout], dtype=np.int64)
    d_sel = int(dims.sum())
    trace = []
    for p in range(passes):
        w_tilde = reconstruct(qm)
        res = pqi_integral(spec, w, w_tilde, data, intervals)
        eligible = selectable & ~_detached_flat_mask(qm, layout)
        contrib = res.contributions
        if scope == "global":
            budget = int(np.rint(d_sel * beta / 100.0))
            cand = np.flatnonzero(eligible)
            order = np.argsort(-contrib[cand], kind="stable")
            chosen = cand[order[: min(budget, cand.size)]]
        else:
            chosen_parts = []
            for li, seg in enumerate(layout):
                budget_l = int(np.rint(dims[li] * beta / 100.0))
                in_layer = np.flatnonzero(eligible & (layer_ix == li))
                order = np.argsort(-contrib[in_layer], kind="stable")
                chosen_parts.append(in_layer[order[: min(budget_l, in_layer.size)]])
            chosen = np.concatenate(chosen_parts)
        trips = _triplets_at(w, layer_ix, row_ix, col_ix, chosen)
        qm.detach_significant(trips)
        loss_after = autodiff.forward_loss(spec, reconstruct(qm), data)
        detached_mass = float(contrib[chosen].sum())
        trace.append(DetachStep(p, trips, res.delta_f_pqi,
                                res.delta_f_pqi - detached_mass, loss_after))
    return trace


# ---------------------------------------------------------------------------
# the whole pipeline
# ---------------------------------------------------------------------------


def run_pipeline(spec: ComputationSpec, w: WeightVector, data: CalibSet,
                 cfg: QuantConfig, r_o: float = 0.45, r_s: float = 0.05,
                 alpha: float = 0.1, beta: float = 0.025, intervals: int = 32,
                 seed: int = 0, heldout: CalibSet | None = None,
                 metric: str = "fisher", selection: str = "pqi",
                 include_bias: bool = False) -> PipelineResult:
    """Quantize, search outliers, re-quantize, detach significant weights.

    ``selection='random'`` replaces both ranked selections with seeded random
    draws of the same budgets (the control arm).  Raises with the failing
    stage named.
    """
    if selection not in SELECTIONS:
        raise ConfigurationError(f"unknown selection strategy {selection!r}")
    kmeans_seed = derive_seed(seed, "kmeans")
    layout = w.layout
    layer_ix, row_ix, col_ix, selectable = _coord_tables(layout, include_bias)
    _, _, _, weights_only = _coord_tables(layout, False)
    d_w = int(sum(seg.weight_size for seg in layout))
    dims = np.array([seg.weight_size + (seg.rows if include_bias and seg.has_bias else 0)
                     for seg in layout], dtype=np.int64)
    d_sel = int(dims.sum())
    steps: list[StepRecord] = []

    def record(num, desc, qm):
        wt = reconstruct(qm)
        steps.append(StepRecord(
            num, desc,
            autodiff.forward_loss(spec, wt, data),
            None if heldout is None else autodiff.forward_loss(spec, wt, heldout),
            bits_breakdown(qm).per_weight,
        ))

    def stage(num, desc):
        return _StageGuard(num, desc)

    with stage(1, "pre-quantize"):
        v = None
        act_stats = None
        if cfg.mode == "kmeans" or metric != "uniform":
            v = make_metric(metric, spec, w, data).values
        if cfg.preprocess == "activation":
            act_stats = autodiff.activation_stats(spec, w, data)
        qm = quantize_model(w, cfg, v=v, kmeans_seed=kmeans_seed, act_stats=act_stats)
        record(1, "pre-quantize", qm)

    budget_o = int(np.rint(d_w * r_o / 100.0))
    with stage(2, "outlier ratio search"):
        if budget_o == 0:
            plan = OutlierPlan(0.0, np.zeros(len(layout), dtype=np.int64), 0, 0,
                               [(0.0, steps[0].calib_loss)], None)
        elif selection == "random":
            plan = OutlierPlan(0.0, np.zeros(len(layout), dtype=np.int64),
                               budget_o, 0, [], None)
        else:
            plan, qm = outlier_ratio_search(
                spec, w, data, cfg, v, r_o, alpha, intervals, kmeans_seed,
                qm_pre=qm, act_stats=act_stats)
        record(2, "outlier ratio search", qm)

    with stage(3, "select outliers"):
        if selection == "random" and budget_o > 0:
            rng = np.random.default_rng([derive_seed(seed, "random-outliers")])
            cand = np.flatnonzero(weights_only)
            chosen = np.sort(rng.choice(cand, size=min(budget_o, cand.size), replace=False))
            trips = _triplets_at(w, layer_ix, row_ix, col_ix, chosen)
            qm = quantize_model(w, cfg, v=v, exclude=trips, kmeans_seed=kmeans_seed,
                                act_stats=act_stats)
            plan.counts = np.bincount(trips.layer, minlength=len(layout)).astype(np.int64)
        record(3, "select outliers", qm)

    with stage(4, "re-quantize"):
        # the winning grid point already is the re-quantized model
        record(4, "re-quantize with outliers excluded", qm)

    with stage(5, "significant weight search"):
        detach: list[DetachStep] = []
        if r_s > 0:
            if selection == "random":
                passes = int(np.rint(r_s / beta))
                total = passes * int(np.rint(d_sel * beta / 100.0))
                rng = np.random.default_rng([derive_seed(seed, "random-significant")])
                eligible = np.flatnonzero(selectable & ~_detached_flat_mask(qm, layout))
                chosen = np.sort(rng.choice(eligible, size=min(total, eligible.size),
                                            replace=False))
                trips = _triplets_at(w, layer_ix, row_ix, col_ix, chosen)
                qm.detach_significant(trips)
                loss_after = autodiff.forward_loss(spec, reconstruct(qm), data)
                detach.append(DetachStep(0, trips, float("nan"), float("nan"), loss_after))
            else:
                detach = significant_weight_search(
                    spec, w, qm, data, r_s, beta, intervals, include_bias=include_bias)
        record(5, "significant weight search", qm)

    with stage(6, "complete"):
        qm.meta.update({"r_o": r_o, "r_s": r_s, "t": plan.t, "beta": beta,
                        "seed": seed, "kmeans_seed": kmeans_seed})
        record(6, "complete", qm)
    return PipelineResult(qm, steps, plan, detach)


class _StageGuard:
    """Re-raise anything from a pipeline stage with the stage named."""

    def __init__(self, num, desc):
        self.num = num
        self.desc = desc

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not getattr(exc, "_staged", False):
            exc._staged = True
            exc.args = (f"stage {self.num} ({self.desc}): {exc}",) + exc.args[1:]
        return False
