"""Shared fixtures: trained default rigs (one per seed) and a small model
whose every derivative is cheap to brute-force."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest

from requant import CalibSet, ComputationSpec, TrainInfo, WeightVector, generate_calib, train
from requant.cli import build_rig
from requant.config import ExperimentConfig

SEEDS = (0, 1, 2, 3, 4)


@dataclass
class Rig:
    cfg: ExperimentConfig
    spec: ComputationSpec
    w: WeightVector
    info: TrainInfo
    train_set: CalibSet
    calib: CalibSet
    heldout: CalibSet


def make_rig(seed: int, **overrides) -> Rig:
    cfg = ExperimentConfig(seed=seed, **overrides)
    spec, w, info, train_set, calib, heldout = build_rig(cfg)
    return Rig(cfg, spec, w, info, train_set, calib, heldout)


@pytest.fixture(scope="session")
def rigs() -> list[Rig]:
    """The default experiment at five seeds.  Built once per session."""
    return [make_rig(s) for s in SEEDS]


@pytest.fixture(scope="session")
def rig0(rigs) -> Rig:
    return rigs[0]


@pytest.fixture(scope="session")
def small_rig() -> Rig:
    """A model small enough for finite differences over every coordinate."""
    return make_rig(7, d_in=5, hidden=(7, 6), classes=3, train_n=48,
                    calib_n=32, heldout_n=32, train_steps=60, lr=0.1)


@pytest.fixture()
def tiny_spec() -> ComputationSpec:
    return ComputationSpec(3, (4,), 2)


@pytest.fixture()
def tiny_data(tiny_spec) -> CalibSet:
    return generate_calib(11, 16, tiny_spec.d_in, tiny_spec.classes)
