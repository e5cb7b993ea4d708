"""Binary file formats: RQMD checkpoints, RQCL calibration sets, RQQT artifacts.

All multi-byte fields are little-endian.  Weights, scales, codebooks, and
overlay values are float32 on disk.  Dense codes are bit-packed LSB-first
(see :mod:`requant.kernels`); signed integer grids use two's complement
inside the field width.  Readers raise :class:`FormatError` on bad magic,
unknown enums, truncation, or out-of-range payloads.
"""

from __future__ import annotations

import struct

import numpy as np

from . import kernels
from .errors import FormatError
from .models import CalibSet, ComputationSpec, LayerSegment, WeightVector
from .quantizers import QuantConfig, QuantizedLayer, QuantizedModel, SparseTriplets

CHECKPOINT_MAGIC = b"RQMD"
CALIB_MAGIC = b"RQCL"
ARTIFACT_MAGIC = b"RQQT"
FORMAT_VERSION = 1

_NONLIN_CODES = {"relu": 0, "tanh": 1}
_LOSS_CODES = {"softmax_ce": 0}
_MODE_CODES = {"uniform": 0, "kmeans": 1}
_RANGE_CODES = {"symmetric": 0, "full": 1}
_PREPROCESS_CODES = {"identity": 0, "activation": 1}

MAX_DIM = 0xFFFF  # overlay rows/cols are u16


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {self.what}: wanted {n} bytes at offset {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def array(self, dtype, count: int) -> np.ndarray:
        raw = self.take(int(count) * np.dtype(dtype).itemsize)
        return np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<")).astype(dtype)

    def done(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{self.what} has {len(self.data) - self.pos} trailing bytes")


def _decode_enum(code: int, table: dict, what: str) -> str:
    for name, c in table.items():
        if c == code:
            return name
    raise FormatError(f"unknown {what} code {code}")


def _read_file(path, what: str) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read {what} {path}: {exc}") from exc


def _write_file(path, payload: bytes, what: str) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(payload)
    except OSError as exc:
        raise FormatError(f"cannot write {what} {path}: {exc}") from exc


def _le32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, spec: ComputationSpec, w: WeightVector) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", FORMAT_VERSION)]
    chunks.append(struct.pack("<II", spec.d_in, len(spec.hidden)))
    chunks.append(struct.pack(f"<{len(spec.hidden)}I", *spec.hidden))
    chunks.append(struct.pack("<IBB", spec.classes,
                              _NONLIN_CODES[spec.nonlin], _LOSS_CODES[spec.loss]))
    chunks.append(struct.pack("<I", len(w.layout)))
    for seg, (wm, b) in zip(w.layout, w.matrices()):
        name = seg.name.encode()
        chunks.append(struct.pack("<H", len(name)) + name)
        chunks.append(struct.pack("<IIB", seg.rows, seg.cols, int(seg.has_bias)))
        chunks.append(_le32(wm.astype(np.float32)))
        if seg.has_bias:
            chunks.append(_le32(b.astype(np.float32)))
    _write_file(path, b"".join(chunks), "checkpoint")


def load_checkpoint(path) -> tuple[ComputationSpec, WeightVector]:
    rd = _Reader(_read_file(path, "checkpoint"), "checkpoint")
    if rd.take(4) != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    (version,) = rd.unpack("I")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    d_in, n_hidden = rd.unpack("II")
    hidden = tuple(rd.unpack(f"{n_hidden}I")) if n_hidden else ()
    classes, nonlin_code, loss_code = rd.unpack("IBB")
    spec = ComputationSpec(d_in, hidden, classes,
                           _decode_enum(nonlin_code, _NONLIN_CODES, "nonlinearity"),
                           _decode_enum(loss_code, _LOSS_CODES, "loss"))
    (layer_count,) = rd.unpack("I")
    if layer_count != spec.n_layers:
        raise FormatError(f"checkpoint has {layer_count} layers, spec wants {spec.n_layers}")
    shapes = spec.layer_shapes()
    segs, values = [], []
    offset = 0
    for li in range(layer_count):
        (name_len,) = rd.unpack("H")
        name = rd.take(name_len).decode()
        rows, cols, has_bias = rd.unpack("IIB")
        if (rows, cols) != shapes[li]:
            raise FormatError(f"layer {name!r} is {rows}x{cols}, spec wants {shapes[li]}")
        seg = LayerSegment(name, offset, rows, cols, bool(has_bias))
        segs.append(seg)
        offset += seg.size
        values.append(rd.array(np.float32, rows * cols).astype(np.float64))
        if has_bias:
            values.append(rd.array(np.float32, rows).astype(np.float64))
    rd.done()
    return spec, WeightVector(np.concatenate(values), tuple(segs))


# ---------------------------------------------------------------------------
# calibration sets
# ---------------------------------------------------------------------------


def save_calib(path, data: CalibSet) -> None:
    chunks = [CALIB_MAGIC, struct.pack("<IIII", FORMAT_VERSION, data.n, data.d_in, data.classes)]
    for i in range(data.n):
        chunks.append(_le32(data.x[i]))
        chunks.append(struct.pack("<I", int(data.y[i])))
    _write_file(path, b"".join(chunks), "calibration set")


def load_calib(path) -> CalibSet:
    rd = _Reader(_read_file(path, "calibration set"), "calibration set")
    if rd.take(4) != CALIB_MAGIC:
        raise FormatError("not a calibration file (bad magic)")
    version, n, d_in, classes = rd.unpack("IIII")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported calibration version {version}")
    x = np.empty((n, d_in), dtype=np.float32)
    y = np.empty(n, dtype=np.int32)
    for i in range(n):
        x[i] = rd.array(np.float32, d_in)
        (label,) = rd.unpack("I")
        if label >= classes:
            raise FormatError(f"sample {i} has label {label} >= {classes} classes")
        y[i] = label
    rd.done()
    return CalibSet(x, y, classes)


# ---------------------------------------------------------------------------
# quantized artifacts
# ---------------------------------------------------------------------------


def _pack_signed(codes: np.ndarray, bits: int) -> bytes:
    mask = np.uint64((1 << bits) - 1)
    fields = (codes.astype(np.int64).ravel().view(np.uint64)) & mask
    return kernels.pack_fields(fields, bits).tobytes()


def _unpack_signed(rd: _Reader, bits: int, count: int, signed: bool) -> np.ndarray:
    packed = rd.array(np.uint8, (count * bits + 7) // 8)
    fields = kernels.unpack_fields(packed, bits, count).astype(np.int64)
    if signed:
        sign = np.int64(1) << (bits - 1)
        fields = (fields ^ sign) - sign  # two's complement sign extension
    return fields


def save_artifact(path, qm: QuantizedModel) -> None:
    cfg = qm.cfg
    for lay in qm.layers:
        if lay.rows > MAX_DIM or lay.cols >= MAX_DIM:
            # col == MAX_DIM could not be told apart from a bias slot marker
            raise FormatError(
                f"layer {lay.name!r} is {lay.rows}x{lay.cols}; overlay indices are 16-bit"
            )
    meta = qm.meta
    bits = cfg.storage_code_bits
    chunks = [ARTIFACT_MAGIC, struct.pack("<I", FORMAT_VERSION)]
    chunks.append(struct.pack("<BBBB", _MODE_CODES[cfg.mode], _RANGE_CODES[cfg.int_range],
                              _PREPROCESS_CODES[cfg.preprocess], cfg.bits))
    chunks.append(struct.pack("<II", cfg.group_size, cfg.codebook_size))
    chunks.append(struct.pack("<ffff", float(meta.get("r_o", 0.0)), float(meta.get("r_s", 0.0)),
                              float(meta.get("t", 0.0)), float(meta.get("beta", 0.0))))
    chunks.append(struct.pack("<QQ", int(meta.get("seed", 0)), int(meta.get("kmeans_seed", 0))))
    chunks.append(struct.pack("<I", len(qm.layers)))
    for li, lay in enumerate(qm.layers):
        name = lay.name.encode()
        chunks.append(struct.pack("<H", len(name)) + name)
        chunks.append(struct.pack("<IIB", lay.rows, lay.cols, int(lay.has_bias)))
        chunks.append(_pack_signed(lay.codes_w, bits))
        if lay.has_bias:
            chunks.append(_pack_signed(lay.codes_b, bits))
        if cfg.mode == "uniform":
            chunks.append(_le32(lay.scales_w))
            if lay.has_bias:
                chunks.append(_le32(lay.scales_b))
            if cfg.preprocess == "activation":
                chunks.append(_le32(lay.col_scales))
        else:
            chunks.append(_le32(lay.codebook))
        for trips in (qm.outliers, qm.significant):
            r, c, v = trips.layer_slice(li)
            chunks.append(struct.pack("<I", r.size))
            for j in range(r.size):
                chunks.append(struct.pack("<HHf", int(r[j]), int(c[j]), float(v[j])))
    _write_file(path, b"".join(chunks), "artifact")


def load_artifact(path) -> QuantizedModel:
    rd = _Reader(_read_file(path, "artifact"), "artifact")
    if rd.take(4) != ARTIFACT_MAGIC:
        raise FormatError("not an artifact file (bad magic)")
    (version,) = rd.unpack("I")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported artifact version {version}")
    mode_c, range_c, prep_c, bits = rd.unpack("BBBB")
    mode = _decode_enum(mode_c, _MODE_CODES, "mode")
    int_range = _decode_enum(range_c, _RANGE_CODES, "integer range")
    preprocess = _decode_enum(prep_c, _PREPROCESS_CODES, "preprocess")
    group_size, codebook_size = rd.unpack("II")
    try:
        cfg = QuantConfig(bits=bits, mode=mode, group_size=group_size,
                          int_range=int_range, preprocess=preprocess)
    except Exception as exc:
        raise FormatError(f"artifact header is not a valid config: {exc}") from exc
    if codebook_size != cfg.codebook_size:
        raise FormatError(f"codebook size {codebook_size} does not match {bits} bits")
    r_o, r_s, t, beta = rd.unpack("ffff")
    seed, kmeans_seed = rd.unpack("QQ")
    meta = {"r_o": r_o, "r_s": r_s, "t": t, "beta": beta,
            "seed": seed, "kmeans_seed": kmeans_seed}
    (layer_count,) = rd.unpack("I")
    sbits = cfg.storage_code_bits
    signed = cfg.mode == "uniform"
    layers = []
    overlay_cols = {0: [], 1: []}
    for li in range(layer_count):
        (name_len,) = rd.unpack("H")
        name = rd.take(name_len).decode()
        rows, cols, has_bias = rd.unpack("IIB")
        if rows < 1 or cols < 1 or rows > MAX_DIM or cols >= MAX_DIM:
            raise FormatError(f"layer {name!r} has bad dims {rows}x{cols}")
        codes_w = _unpack_signed(rd, sbits, rows * cols, signed).reshape(rows, cols)
        codes_b = _unpack_signed(rd, sbits, rows, signed) if has_bias else None
        limit = cfg.code_bound if signed else cfg.codebook_size - 1
        for arr in (codes_w, codes_b):
            if arr is not None and (arr.min() < (-limit if signed else 0) or arr.max() > limit):
                raise FormatError(f"layer {name!r} has codes outside the {bits}-bit grid")
        scales_w = scales_b = col_scales = codebook = None
        if cfg.mode == "uniform":
            ngroups = -(-cols // cfg.group_size)
            scales_w = rd.array(np.float32, rows * ngroups).reshape(rows, ngroups)
            if has_bias:
                scales_b = rd.array(np.float32, -(-rows // cfg.group_size))
            if cfg.preprocess == "activation":
                col_scales = rd.array(np.float32, cols)
        else:
            codebook = rd.array(np.float32, cfg.codebook_size)
        layers.append(QuantizedLayer(
            name, rows, cols, bool(has_bias),
            codes_w=codes_w.astype(np.int16),
            codes_b=None if codes_b is None else codes_b.astype(np.int16),
            scales_w=scales_w, scales_b=scales_b,
            col_scales=col_scales, codebook=codebook,
        ))
        for kind in (0, 1):
            (count,) = rd.unpack("I")
            for _ in range(count):
                r, c, v = rd.unpack("HHf")
                if r >= rows or c > cols or (c == cols and not has_bias):
                    raise FormatError(f"overlay coordinate ({r}, {c}) out of range in {name!r}")
                overlay_cols[kind].append((li, r, c, v))
    rd.done()

    def build(entries):
        if not entries:
            return SparseTriplets.empty()
        arr = np.array(entries, dtype=np.float64)
        return SparseTriplets.build(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3].astype(np.float32))

    qm = QuantizedModel(cfg, layers, build(overlay_cols[0]), build(overlay_cols[1]), meta)
    if qm.outliers.overlaps(qm.significant):
        raise FormatError("outlier and significant overlays overlap")
    return qm
