"""Weight quantizers and the dense-plus-sparse quantized model container.

Two dense quantizers are provided:

* ``uniform``: per-group symmetric integer grids.  ``int_range`` picks the
  scale denominator: ``full`` uses max|w| / (2^N - 1) with codes clamped to
  +-(2^N - 1) (stored in N+1 bits), ``symmetric`` uses max|w| / (2^(N-1) - 1)
  with codes clamped to +-(2^(N-1) - 1) (a true N-bit grid, the default).
* ``kmeans``: a per-layer codebook of K = 2^N entries fitted by weighted
  Lloyd iterations from a seeded kmeans++ style init.

On top of the dense part, a model carries two sorted sparse overlays
(outliers and significant weights).  Overlay slots dequantize to zero in the
dense part and the stored float32 value is added back, so every detached
coordinate reconstructs to its stored value exactly.

Scales, codebooks, and overlay values are kept in float32, matching the
on-disk artifact; arithmetic upcasts to float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigurationError
from .models import LayerSegment, WeightVector

MODES = ("uniform", "kmeans")
INT_RANGES = ("symmetric", "full")
PREPROCESSES = ("identity", "activation")


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 4
    mode: str = "uniform"
    group_size: int = 16
    int_range: str = "symmetric"
    preprocess: str = "identity"
    act_exponent: float = 0.5
    kmeans_iters: int = 25

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise ConfigurationError(f"bits must be in [2, 8], got {self.bits}")
        if self.group_size < 1:
            raise ConfigurationError("group_size must be >= 1")
        if self.kmeans_iters < 1:
            raise ConfigurationError("kmeans_iters must be >= 1")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.int_range not in INT_RANGES:
            raise ConfigurationError(f"unknown int_range {self.int_range!r}")
        if self.preprocess not in PREPROCESSES:
            raise ConfigurationError(f"unknown preprocess {self.preprocess!r}")
        if self.mode == "kmeans" and self.preprocess != "identity":
            raise ConfigurationError("activation preprocess applies to uniform mode only")

    @property
    def code_bound(self) -> int:
        """Largest allowed |code| on the dense integer grid."""
        if self.int_range == "full":
            return 2**self.bits - 1
        return 2 ** (self.bits - 1) - 1

    @property
    def codebook_size(self) -> int:
        return 2**self.bits

    @property
    def storage_code_bits(self) -> int:
        """Bits per stored dense code (the full-range grid needs a sign bit)."""
        if self.mode == "kmeans":
            return self.bits
        return self.bits + 1 if self.int_range == "full" else self.bits


# ---------------------------------------------------------------------------
# sparse overlays
# ---------------------------------------------------------------------------

# bias slots use col == layer.cols; weight slots have col < cols
OVERLAY_BITS_PER_ENTRY = 48  # 16-bit row + 16-bit col + 16-bit value budget


def _keys(layer, row, col):
    return (
        layer.astype(np.int64) << np.int64(32)
    ) + (row.astype(np.int64) << np.int64(16)) + col.astype(np.int64)


@dataclass
class SparseTriplets:
    """Sorted sparse coordinates (layer, row, col) with float32 values."""

    layer: np.ndarray
    row: np.ndarray
    col: np.ndarray
    val: np.ndarray

    def __post_init__(self):
        self.layer = np.ascontiguousarray(self.layer, dtype=np.int32)
        self.row = np.ascontiguousarray(self.row, dtype=np.int32)
        self.col = np.ascontiguousarray(self.col, dtype=np.int32)
        self.val = np.ascontiguousarray(self.val, dtype=np.float32)
        n = self.layer.size
        if not (self.row.size == self.col.size == self.val.size == n):
            raise ConfigurationError("triplet arrays must have equal length")
        if n:
            if self.layer.min() < 0 or self.row.min() < 0 or self.col.min() < 0:
                raise ConfigurationError("triplet coordinates must be nonnegative")
            if self.row.max() >= 1 << 16 or self.col.max() >= 1 << 16:
                raise ConfigurationError("triplet coordinates exceed 16-bit range")
            k = _keys(self.layer, self.row, self.col)
            if not np.all(k[1:] > k[:-1]):
                raise ConfigurationError("triplets must be strictly sorted by (layer, row, col)")

    @classmethod
    def empty(cls) -> "SparseTriplets":
        z = np.zeros(0)
        return cls(z, z, z, z)

    @classmethod
    def build(cls, layer, row, col, val) -> "SparseTriplets":
        """Sorts by (layer, row, col); duplicates are an error."""
        layer = np.asarray(layer, dtype=np.int64)
        row = np.asarray(row, dtype=np.int64)
        col = np.asarray(col, dtype=np.int64)
        val = np.asarray(val)
        order = np.lexsort((col, row, layer))
        return cls(layer[order], row[order], col[order], val[order])

    def __len__(self) -> int:
        return self.layer.size

    def layer_slice(self, li: int):
        sel = self.layer == li
        return self.row[sel], self.col[sel], self.val[sel]

    def merged_with(self, other: "SparseTriplets") -> "SparseTriplets":
        merged = SparseTriplets.build(
            np.concatenate([self.layer, other.layer]),
            np.concatenate([self.row, other.row]),
            np.concatenate([self.col, other.col]),
            np.concatenate([self.val, other.val]),
        )
        return merged

    def overlaps(self, other: "SparseTriplets") -> bool:
        if len(self) == 0 or len(other) == 0:
            return False
        a = _keys(self.layer, self.row, self.col)
        b = _keys(other.layer, other.row, other.col)
        return bool(np.intersect1d(a, b).size)


# ---------------------------------------------------------------------------
# uniform grouped quantizer
# ---------------------------------------------------------------------------


def group_quantize(mat: np.ndarray, bound: int, group: int,
                   exclude_mask: np.ndarray | None = None):
    """Quantize one matrix on per-group symmetric grids.

    Rows are cut into groups of ``group`` consecutive entries (the tail group
    may be short).  Excluded slots are zeroed before the scale fit, so they
    neither widen the grid nor keep a nonzero code.  Returns int16 codes and
    float32 scales of shape (rows, n_groups).
    """
    mat = np.asarray(mat, dtype=np.float64)
    r, c = mat.shape
    vals = mat.copy()
    if exclude_mask is not None:
        vals[exclude_mask] = 0.0
    ngroups = -(-c // group)
    padded = np.zeros((r, ngroups * group))
    padded[:, :c] = vals
    grp = padded.reshape(r, ngroups, group)
    absmax = np.abs(grp).max(axis=2)
    scales = (absmax / bound).astype(np.float32)
    # codes come from the exact group maximum (not the rounded scale) so that
    # values sitting exactly on the grid hit exact half-integers
    inv = np.divide(bound, absmax, out=np.zeros_like(absmax), where=absmax > 0)
    q = np.rint(grp * inv[:, :, None])  # rint ties go to even
    np.clip(q, -bound, bound, out=q)
    codes = q.reshape(r, ngroups * group)[:, :c].astype(np.int16)
    return codes, scales


def group_dequantize(codes: np.ndarray, scales: np.ndarray, group: int) -> np.ndarray:
    """Float64 matrix from int codes and float32 group scales."""
    r, c = codes.shape
    s = np.repeat(scales.astype(np.float64), group, axis=1)[:, :c]
    return codes.astype(np.float64) * s


# ---------------------------------------------------------------------------
# weighted k-means codebook
# ---------------------------------------------------------------------------


@dataclass
class KMeansResult:
    codebook: np.ndarray  # float64, length K
    assignments: np.ndarray  # int64
    objectives: list[float] = field(default_factory=list)


def kmeans_fit(values: np.ndarray, weights: np.ndarray, k: int, seed,
               iters: int = 25) -> KMeansResult:
    """Weighted 1-D k-means with a seeded kmeans++ style init.

    The recorded objective sum_j weights_j * (values_j - T[a_j])^2 is
    non-increasing across Lloyd iterations.  Empty clusters steal the point
    with the largest weighted residual from any multi-member cluster.
    Ties in the assignment go to the smaller centroid index.
    """
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise ConfigurationError("kmeans needs a nonempty 1-D value array")
    if weights.shape != values.shape:
        raise ConfigurationError("kmeans weights must match values")
    if weights.size and weights.min() < 0:
        raise ConfigurationError("kmeans weights must be nonnegative")
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    m = values.size
    rng = np.random.default_rng(seed)
    centroids = np.empty(k)
    total = weights.sum()
    p0 = weights / total if total > 0 else np.full(m, 1.0 / m)
    centroids[0] = values[rng.choice(m, p=p0)]
    d2 = (values - centroids[0]) ** 2
    for j in range(1, k):
        probs = weights * d2
        s = probs.sum()
        if s > 0:
            idx = rng.choice(m, p=probs / s)
        elif d2.sum() > 0:
            # all remaining mass is on zero-weight points; still spread out
            idx = rng.choice(m, p=d2 / d2.sum())
        else:
            idx = 0  # every value already covered, duplicates are harmless
        centroids[j] = values[idx]
        d2 = np.minimum(d2, (values - centroids[j]) ** 2)

    assign = kernels.nearest_index(values, centroids)
    objectives = [float((weights * (values - centroids[assign]) ** 2).sum())]
    for _ in range(iters):
        moved = False
        counts = np.bincount(assign, minlength=k)
        for j in np.flatnonzero(counts == 0):
            contrib = weights * (values - centroids[assign]) ** 2
            donor_ok = counts[assign] > 1
            if not donor_ok.any():
                continue  # fewer points than clusters; leave the duplicate
            p = int(np.argmax(np.where(donor_ok, contrib, -1.0)))
            counts[assign[p]] -= 1
            assign[p] = j
            counts[j] = 1
            centroids[j] = values[p]
            moved = True
        for j in range(k):
            members = assign == j
            if not members.any():
                continue
            vj = values[members]
            if vj.min() == vj.max():
                centroids[j] = vj[0]  # exact: keeps degenerate clusters lossless
                continue
            wj = weights[members]
            sw = wj.sum()
            centroids[j] = float((wj * vj).sum() / sw) if sw > 0 else float(vj.mean())
        new_assign = kernels.nearest_index(values, centroids)
        objectives.append(float((weights * (values - centroids[new_assign]) ** 2).sum()))
        stable = np.array_equal(new_assign, assign) and not moved
        assign = new_assign
        if stable:
            break
    return KMeansResult(centroids, assign, objectives)


# ---------------------------------------------------------------------------
# quantized model container
# ---------------------------------------------------------------------------


@dataclass
class QuantizedLayer:
    name: str
    rows: int
    cols: int
    has_bias: bool
    codes_w: np.ndarray  # int16 (rows, cols)
    codes_b: np.ndarray | None  # int16 (rows,)
    scales_w: np.ndarray | None = None  # float32 (rows, n_groups), uniform mode
    scales_b: np.ndarray | None = None  # float32 (n_groups_b,)
    col_scales: np.ndarray | None = None  # float32 (cols,), activation preprocess
    codebook: np.ndarray | None = None  # float32 (K,), kmeans mode

    @property
    def size(self) -> int:
        return self.rows * self.cols + (self.rows if self.has_bias else 0)


@dataclass
class QuantizedModel:
    cfg: QuantConfig
    layers: list[QuantizedLayer]
    outliers: SparseTriplets
    significant: SparseTriplets
    meta: dict = field(default_factory=dict)

    def layout(self) -> tuple[LayerSegment, ...]:
        segs = []
        offset = 0
        for lay in self.layers:
            seg = LayerSegment(lay.name, offset, lay.rows, lay.cols, lay.has_bias)
            segs.append(seg)
            offset += seg.size
        return tuple(segs)

    @property
    def d(self) -> int:
        return sum(lay.size for lay in self.layers)

    def detached_masks(self, li: int):
        """uint8 masks of overlay slots: (rows, cols) weights and (rows,) bias."""
        lay = self.layers[li]
        mask_w = np.zeros((lay.rows, lay.cols), dtype=np.uint8)
        mask_b = np.zeros(lay.rows, dtype=np.uint8)
        for trips in (self.outliers, self.significant):
            r, c, _ = trips.layer_slice(li)
            wsel = c < lay.cols
            mask_w[r[wsel], c[wsel]] = 1
            mask_b[r[~wsel]] = 1
        return mask_w, mask_b

    def detach_significant(self, trips: SparseTriplets) -> None:
        """Move coordinates into the significant overlay; their dense codes go to 0."""
        if trips.overlaps(self.outliers) or trips.overlaps(self.significant):
            raise ConfigurationError("significant coordinates overlap an existing overlay")
        for li, lay in enumerate(self.layers):
            r, c, _ = trips.layer_slice(li)
            wsel = c < lay.cols
            lay.codes_w[r[wsel], c[wsel]] = 0
            if lay.codes_b is not None:
                lay.codes_b[r[~wsel]] = 0
        self.significant = self.significant.merged_with(trips)


def _activation_col_scales(act: np.ndarray, exponent: float) -> np.ndarray:
    """Per-column multipliers from activation statistics, geometric mean 1."""
    a = np.maximum(np.asarray(act, dtype=np.float64), 1e-12)
    g = np.exp(np.mean(np.log(a)))
    return ((a / g) ** exponent).astype(np.float32)


def _exclude_masks(exclude: SparseTriplets, li: int, rows: int, cols: int, has_bias: bool):
    r, c, _ = exclude.layer_slice(li)
    if r.size and (r.max() >= rows or c.max() > cols or (not has_bias and c.max() >= cols)):
        raise ConfigurationError(f"overlay coordinate out of range for layer {li}")
    mask_w = np.zeros((rows, cols), dtype=bool)
    mask_b = np.zeros(rows, dtype=bool)
    wsel = c < cols
    mask_w[r[wsel], c[wsel]] = True
    mask_b[r[~wsel]] = True
    return mask_w, mask_b


def quantize_model(w: WeightVector, cfg: QuantConfig, v: np.ndarray | None = None,
                   exclude: SparseTriplets | None = None, kmeans_seed: int = 0,
                   act_stats: list[np.ndarray] | None = None,
                   meta: dict | None = None) -> QuantizedModel:
    """Quantize every layer; excluded coordinates become the outlier overlay.

    ``v`` supplies nonnegative per-coordinate importance weights for the
    kmeans objective (ones when omitted).  ``exclude`` lists coordinates to
    pull out of the dense fit entirely: they are zeroed before scale or
    codebook fitting and stored in the outlier overlay with their original
    (float32) values.  ``act_stats`` feeds the activation preprocess.
    """
    exclude = exclude if exclude is not None else SparseTriplets.empty()
    if v is not None:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (w.d,):
            raise ConfigurationError(f"sensitivity has {v.size} entries, model has {w.d}")
        if v.size and v.min() < 0:
            raise ConfigurationError("sensitivity weights must be nonnegative")
    if cfg.preprocess == "activation" and act_stats is None:
        raise ConfigurationError("activation preprocess needs activation statistics")

    layers = []
    for li, (seg, (wm, b)) in enumerate(zip(w.layout, w.matrices())):
        mask_w, mask_b = _exclude_masks(exclude, li, seg.rows, seg.cols, seg.has_bias)
        if cfg.mode == "uniform":
            col_scales = None
            mat = wm
            if cfg.preprocess == "activation":
                col_scales = _activation_col_scales(act_stats[li], cfg.act_exponent)
                mat = wm * col_scales.astype(np.float64)[None, :]
            codes_w, scales_w = group_quantize(mat, cfg.code_bound, cfg.group_size, mask_w)
            codes_b, scales_b = group_quantize(
                b[None, :], cfg.code_bound, cfg.group_size, mask_b[None, :]
            )
            layers.append(QuantizedLayer(
                seg.name, seg.rows, seg.cols, seg.has_bias,
                codes_w=codes_w, codes_b=codes_b[0],
                scales_w=scales_w, scales_b=scales_b[0], col_scales=col_scales,
            ))
        else:
            values = np.concatenate([wm.ravel(), b])
            weights = np.ones(values.size) if v is None else v[seg.offset : seg.offset + seg.size]
            mask_flat = np.concatenate([mask_w.ravel(), mask_b])
            keep = ~mask_flat
            if keep.any():
                fit = kmeans_fit(values[keep], weights[keep], cfg.codebook_size,
                                 seed=[kmeans_seed, li], iters=cfg.kmeans_iters)
                codebook = fit.codebook.astype(np.float32)
                codes = kernels.nearest_index(values, codebook.astype(np.float64))
            else:
                codebook = np.zeros(cfg.codebook_size, dtype=np.float32)
                codes = np.zeros(values.size, dtype=np.int64)
            codes[mask_flat] = 0
            codes = codes.astype(np.int16)
            layers.append(QuantizedLayer(
                seg.name, seg.rows, seg.cols, seg.has_bias,
                codes_w=codes[: seg.weight_size].reshape(seg.rows, seg.cols),
                codes_b=codes[seg.weight_size :], codebook=codebook,
            ))

    # refill overlay values from the original weights
    out_vals = np.empty(len(exclude), dtype=np.float32)
    for i in range(len(exclude)):
        seg = w.layout[exclude.layer[i]]
        r, c = int(exclude.row[i]), int(exclude.col[i])
        flat = seg.bias_offset + r if c == seg.cols else seg.offset + r * seg.cols + c
        out_vals[i] = np.float32(w.values[flat])
    outliers = SparseTriplets(exclude.layer, exclude.row, exclude.col, out_vals)
    return QuantizedModel(cfg, layers, outliers, SparseTriplets.empty(), dict(meta or {}))


def dequantize_layer(qm: QuantizedModel, li: int):
    """Float64 (weights, bias) of one layer, overlays applied."""
    lay = qm.layers[li]
    cfg = qm.cfg
    if cfg.mode == "uniform":
        wmat = group_dequantize(lay.codes_w, lay.scales_w, cfg.group_size)
        if lay.col_scales is not None:
            wmat /= lay.col_scales.astype(np.float64)[None, :]
        bvec = group_dequantize(lay.codes_b[None, :], lay.scales_b[None, :], cfg.group_size)[0]
    else:
        table = lay.codebook.astype(np.float64)
        wmat = table[lay.codes_w]
        bvec = table[lay.codes_b]
    mask_w, mask_b = qm.detached_masks(li)
    wmat[mask_w != 0] = 0.0
    bvec[mask_b != 0] = 0.0
    for trips in (qm.outliers, qm.significant):
        r, c, v = trips.layer_slice(li)
        wsel = c < lay.cols
        wmat[r[wsel], c[wsel]] += v[wsel].astype(np.float64)
        bvec[r[~wsel]] += v[~wsel].astype(np.float64)
    return wmat, bvec


def reconstruct(qm: QuantizedModel) -> WeightVector:
    """The dequantized model as a flat weight vector (dense + overlays)."""
    layout = qm.layout()
    vals = np.empty(qm.d)
    for li, seg in enumerate(layout):
        wmat, bvec = dequantize_layer(qm, li)
        vals[seg.offset : seg.bias_offset] = wmat.ravel()
        vals[seg.bias_offset : seg.offset + seg.size] = bvec
    return WeightVector(vals, layout)


def sparse_matvec(qm: QuantizedModel, li: int, x: np.ndarray) -> np.ndarray:
    """y = W_li @ x computed from the packed form (codes decoded on the fly,
    overlay triplets accumulated sparsely).  Bias slots are not part of the
    product."""
    lay = qm.layers[li]
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (lay.cols,):
        raise ConfigurationError(f"x must have length {lay.cols}")
    mask_w, _ = qm.detached_masks(li)
    if qm.cfg.mode == "uniform":
        if lay.col_scales is not None:
            col_div = lay.col_scales.astype(np.float64)
        else:
            col_div = np.ones(lay.cols)
        y = kernels.matvec_uniform(lay.codes_w, lay.scales_w, qm.cfg.group_size,
                                   col_div, mask_w, x)
    else:
        y = kernels.matvec_codebook(lay.codes_w, lay.codebook.astype(np.float64),
                                    mask_w, x)
    for trips in (qm.outliers, qm.significant):
        r, c, v = trips.layer_slice(li)
        wsel = c < lay.cols
        kernels.coo_accumulate(y, r[wsel], c[wsel], v[wsel].astype(np.float64), x)
    return y


@dataclass(frozen=True)
class BitsBreakdown:
    """Storage accounting in bits, normalized per weight over all D coords."""

    d: int
    code_bits: int
    scale_bits: int
    overlay_entries: int

    @property
    def overlay_bits(self) -> int:
        return OVERLAY_BITS_PER_ENTRY * self.overlay_entries

    @property
    def dense_per_weight(self) -> float:
        return (self.code_bits + self.scale_bits) / self.d

    @property
    def overlay_per_weight(self) -> float:
        return self.overlay_bits / self.d

    @property
    def per_weight(self) -> float:
        return (self.code_bits + self.scale_bits + self.overlay_bits) / self.d


def bits_breakdown(qm: QuantizedModel) -> BitsBreakdown:
    d = qm.d
    code_bits = qm.cfg.storage_code_bits * d
    scale_bits = 0
    for lay in qm.layers:
        if qm.cfg.mode == "uniform":
            scale_bits += 32 * (lay.scales_w.size + lay.scales_b.size)
            if lay.col_scales is not None:
                scale_bits += 32 * lay.col_scales.size
        else:
            scale_bits += 32 * lay.codebook.size
    return BitsBreakdown(d, code_bits, scale_bits, len(qm.outliers) + len(qm.significant))
