"""Experiment configuration: flat key=value files, hashing, seed derivation.

One dataclass holds every knob.  Config files are plain text, one
``key = value`` per line, ``#`` comments, unknown keys rejected.  The
config hash pins report provenance; sub-seeds are derived by hashing the
master seed with a purpose label so adding a consumer never shifts the
streams of existing ones.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

from .errors import ConfigurationError


def derive_seed(seed: int, label: str) -> int:
    """Stable 64-bit sub-seed for one named consumer of the master seed."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class ExperimentConfig:
    seed: int = 0

    # model: three affine layers, ~7k parameters total
    d_in: int = 32
    hidden: tuple = (64, 64)
    classes: int = 8
    nonlin: str = "relu"
    loss: str = "softmax_ce"

    # data
    data_kind: str = "clusters"
    separation: float = 4.0
    train_n: int = 512
    calib_n: int = 256
    heldout_n: int = 256

    # training
    train_steps: int = 400
    lr: float = 0.05
    batch_size: int = 0          # 0 means full batch

    # quantizer
    bits: int = 4
    mode: str = "uniform"
    group_size: int = 16
    int_range: str = "symmetric"
    preprocess: str = "identity"
    act_exponent: float = 0.5
    kmeans_iters: int = 25

    # pipeline
    r_o: float = 0.45
    r_s: float = 0.05
    alpha: float = 0.1
    beta: float = 0.025
    intervals: int = 32
    rule: str = "right"
    metric: str = "fisher"
    fisher_sign: int = -1
    selection: str = "pqi"
    include_bias: bool = False
    lambdas: tuple = (0.1, 0.05, 0.01, 0.005, 0.001)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _parse_value(name: str, raw: str):
    f = _FIELDS[name]
    raw = raw.strip()
    try:
        if f.type in ("int", int):
            return int(raw)
        if f.type in ("float", float):
            return float(raw)
        if f.type in ("bool", bool):
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if f.type in ("tuple", tuple):
            parts = [p for p in raw.split(",") if p.strip()]
            if name == "hidden":
                return tuple(int(p) for p in parts)
            return tuple(float(p) for p in parts)
        return raw
    except ValueError:
        raise ConfigurationError(f"bad value for {name}: {raw!r}") from None


def parse_config(text: str) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value, got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw)
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical text form: sorted keys, one per line."""
    lines = []
    for name in sorted(_FIELDS):
        value = getattr(cfg, name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    """Twelve hex chars over the canonical dump; pins report provenance."""
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:12]


def apply_overrides(cfg: ExperimentConfig, pairs) -> ExperimentConfig:
    """New config with 'key=value' strings applied on top."""
    values = dataclasses.asdict(cfg)
    for pair in pairs:
        if "=" not in pair:
            raise ConfigurationError(f"override must be key=value, got {pair!r}")
        key, _, raw = pair.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigurationError(f"unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return ExperimentConfig(**values)
