"""Toy dense classifiers, synthetic calibration data, deterministic training.

Models are plain affine stacks stored as one flat float64 vector plus a
layout table, so the rest of the toolkit can treat "the weights" as a single
vector in R^D.  Every routine here is a pure function of its arguments and a
seed; repeated calls are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, TrainingError

NONLINEARITIES = ("relu", "tanh")
LOSSES = ("softmax_ce",)
CALIB_KINDS = ("clusters", "random")


@dataclass(frozen=True)
class ComputationSpec:
    """Architecture of a dense classifier: affine stack, nonlinearity, loss."""

    d_in: int
    hidden: tuple[int, ...]
    classes: int
    nonlin: str = "relu"
    loss: str = "softmax_ce"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if len(self.hidden) < 1:
            raise ConfigurationError("need at least one hidden layer (two affine layers)")
        if min(self.dims) < 1:
            raise ConfigurationError(f"all dims must be >= 1, got {self.dims}")
        if self.classes < 2:
            raise ConfigurationError("need at least two classes")
        if self.nonlin not in NONLINEARITIES:
            raise ConfigurationError(f"unknown nonlinearity {self.nonlin!r}")
        if self.loss not in LOSSES:
            raise ConfigurationError(f"unknown loss {self.loss!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.d_in, *self.hidden, self.classes)

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(rows, cols) of each affine layer, output dim first."""
        dims = self.dims
        return [(dims[i + 1], dims[i]) for i in range(self.n_layers)]


@dataclass(frozen=True)
class LayerSegment:
    """Where one affine layer lives inside the flat weight vector.

    The segment is the row-major weight matrix followed by the bias, so
    ``offset + rows*cols`` is the first bias slot.
    """

    name: str
    offset: int
    rows: int
    cols: int
    has_bias: bool = True

    @property
    def weight_size(self) -> int:
        return self.rows * self.cols

    @property
    def size(self) -> int:
        return self.weight_size + (self.rows if self.has_bias else 0)

    @property
    def bias_offset(self) -> int:
        return self.offset + self.weight_size


def make_layout(spec: ComputationSpec) -> tuple[LayerSegment, ...]:
    segs = []
    offset = 0
    for i, (rows, cols) in enumerate(spec.layer_shapes()):
        seg = LayerSegment(f"fc{i}", offset, rows, cols, True)
        segs.append(seg)
        offset += seg.size
    return tuple(segs)


@dataclass
class WeightVector:
    """Flat float64 parameter vector plus the layout describing it."""

    values: np.ndarray
    layout: tuple[LayerSegment, ...]

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ConfigurationError("weight values must be a 1-D vector")
        offset = 0
        for seg in self.layout:
            if seg.offset != offset:
                raise ConfigurationError(f"layout gap before segment {seg.name!r}")
            offset += seg.size
        if offset != self.values.size:
            raise ConfigurationError(
                f"layout covers {offset} values, vector has {self.values.size}"
            )

    @property
    def d(self) -> int:
        return self.values.size

    def segment(self, name: str) -> LayerSegment:
        for seg in self.layout:
            if seg.name == name:
                return seg
        raise ConfigurationError(f"no segment named {name!r}")

    def matrices(self) -> list[tuple[np.ndarray, np.ndarray | None]]:
        """Per-layer (weight matrix, bias) views into the flat vector."""
        out = []
        for seg in self.layout:
            w = self.values[seg.offset : seg.bias_offset].reshape(seg.rows, seg.cols)
            b = self.values[seg.bias_offset : seg.offset + seg.size] if seg.has_bias else None
            out.append((w, b))
        return out

    def copy(self) -> "WeightVector":
        return WeightVector(self.values.copy(), self.layout)


def flatten_matrices(mats, layout) -> np.ndarray:
    """Inverse of :meth:`WeightVector.matrices` for the same layout."""
    total = sum(seg.size for seg in layout)
    out = np.empty(total, dtype=np.float64)
    for seg, (w, b) in zip(layout, mats):
        if w.shape != (seg.rows, seg.cols):
            raise ConfigurationError(f"segment {seg.name!r} expects {(seg.rows, seg.cols)}, got {w.shape}")
        out[seg.offset : seg.bias_offset] = np.asarray(w, dtype=np.float64).ravel()
        if seg.has_bias:
            if b is None or b.shape != (seg.rows,):
                raise ConfigurationError(f"segment {seg.name!r} expects a bias of length {seg.rows}")
            out[seg.bias_offset : seg.offset + seg.size] = np.asarray(b, dtype=np.float64)
    return out


@dataclass
class CalibSet:
    """Labeled calibration samples. Features are float32 as stored on disk."""

    x: np.ndarray
    y: np.ndarray
    classes: int

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float32)
        self.y = np.ascontiguousarray(self.y, dtype=np.int32)
        if self.x.ndim != 2 or self.y.ndim != 1 or self.x.shape[0] != self.y.size:
            raise ConfigurationError("calibration features/labels are misshapen")
        if self.x.shape[0] < 1:
            raise ConfigurationError("calibration set is empty")
        if self.classes < 2 or self.y.min() < 0 or self.y.max() >= self.classes:
            raise ConfigurationError("labels out of range")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d_in(self) -> int:
        return self.x.shape[1]


def generate_calib(seed: int, n: int, d_in: int, classes: int,
                   kind: str = "clusters", separation: float = 4.0,
                   dist_seed: int | None = None) -> CalibSet:
    """Synthesize a labeled sample set.

    ``clusters`` draws unit-variance Gaussian blobs whose means are rescaled
    so the closest pair sits ``separation`` apart; labels cycle through the
    classes so every class is populated.  ``random`` gives unstructured
    features with uniform random labels (nothing to learn).

    ``dist_seed`` fixes the cluster geometry separately from the sample
    noise, so train / calibration / held-out splits of one experiment share
    a distribution while drawing disjoint samples.
    """
    if kind not in CALIB_KINDS:
        raise ConfigurationError(f"unknown calibration kind {kind!r}")
    if n < 1 or classes < 2:
        raise ConfigurationError("need n >= 1 and classes >= 2")
    rng = np.random.default_rng(seed)
    if kind == "random":
        x = rng.normal(size=(n, d_in))
        y = rng.integers(0, classes, size=n)
        return CalibSet(x.astype(np.float32), y.astype(np.int32), classes)
    mean_rng = rng if dist_seed is None else np.random.default_rng(dist_seed)
    means = mean_rng.normal(size=(classes, d_in))
    diff = means[:, None, :] - means[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    closest = dist[~np.eye(classes, dtype=bool)].min()
    if closest > 0:
        means *= separation / closest
    y = np.arange(n, dtype=np.int64) % classes
    x = means[y] + rng.normal(size=(n, d_in))
    return CalibSet(x.astype(np.float32), y.astype(np.int32), classes)


def _f32_grid(values: np.ndarray) -> np.ndarray:
    # checkpoints store float32; keeping live weights on the f32 grid makes
    # save/load round trips bit-exact
    return values.astype(np.float32).astype(np.float64)


def init_weights(spec: ComputationSpec, seed: int) -> WeightVector:
    """Seeded fan-in-scaled Gaussian init, biases zero."""
    rng = np.random.default_rng(seed)
    gain = 2.0 if spec.nonlin == "relu" else 1.0
    layout = make_layout(spec)
    vals = np.zeros(sum(s.size for s in layout))
    for seg in layout:
        w = rng.normal(0.0, np.sqrt(gain / seg.cols), size=(seg.rows, seg.cols))
        vals[seg.offset : seg.bias_offset] = w.ravel()
    return WeightVector(_f32_grid(vals), layout)


@dataclass
class TrainInfo:
    steps: int
    loss_before: float
    loss_after: float
    grad_inf_norm: float
    error_rate: float


def train(seed: int, spec: ComputationSpec, data: CalibSet, steps: int,
          lr: float, batch_size: int | None = None) -> tuple[WeightVector, TrainInfo]:
    """Deterministic gradient descent from a seeded init.

    ``batch_size=None`` means full-batch; otherwise fixed-order contiguous
    slices cycle through the data.  Raises :class:`TrainingError` if the
    loss goes non-finite.
    """
    from . import autodiff  # local import: autodiff depends on these types

    if steps < 0 or lr <= 0:
        raise ConfigurationError("need steps >= 0 and lr > 0")
    w = init_weights(spec, seed)
    loss_before = autodiff.forward_loss(spec, w, data)
    vals = w.values.copy()
    n = data.n
    for step in range(steps):
        if batch_size is None or batch_size >= n:
            batch = data
        else:
            lo = (step * batch_size) % n
            idx = np.arange(lo, lo + batch_size) % n
            batch = CalibSet(data.x[idx], data.y[idx], data.classes)
        loss, g = autodiff.loss_and_grad(spec, WeightVector(vals, w.layout), batch)
        if not np.isfinite(loss):
            raise TrainingError(f"loss went non-finite at step {step}")
        vals -= lr * g
    trained = WeightVector(_f32_grid(vals), w.layout)
    loss_after = autodiff.forward_loss(spec, trained, data)
    if not np.isfinite(loss_after):
        raise TrainingError("final loss is non-finite")
    g = autodiff.grad(spec, trained, data)
    preds = autodiff.predict(spec, trained, data)
    info = TrainInfo(
        steps=steps,
        loss_before=float(loss_before),
        loss_after=float(loss_after),
        grad_inf_norm=float(np.abs(g).max()),
        error_rate=float(np.mean(preds != data.y)),
    )
    return trained, info


def interpolate(w: WeightVector, w_tilde: WeightVector, lam: float) -> WeightVector:
    """Elementwise (1 - lam) * w + lam * w_tilde; layouts must match."""
    if w.layout != w_tilde.layout:
        raise ConfigurationError("cannot interpolate weights with different layouts")
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError(f"lambda must be in [0, 1], got {lam}")
    return WeightVector((1.0 - lam) * w.values + lam * w_tilde.values, w.layout)
