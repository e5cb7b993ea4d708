from __future__ import annotations

import dataclasses

import pytest

from requant.config import (ExperimentConfig, apply_overrides, config_hash,
                            derive_seed, dump_config, load_config,
                            parse_config)
from requant.errors import ConfigurationError


def test_derive_seed_stable_and_distinct():
    a = derive_seed(0, "kmeans")
    assert a == derive_seed(0, "kmeans")
    assert a != derive_seed(0, "init")
    assert a != derive_seed(1, "kmeans")
    assert 0 <= a < 1 << 64


def test_defaults_round_trip_through_dump():
    cfg = ExperimentConfig()
    assert parse_config(dump_config(cfg)) == cfg


def test_parse_config_values_and_comments():
    cfg = parse_config(
        """
        # an experiment
        seed = 5
        hidden = 16, 8   # two blocks
        lr = 0.25
        include_bias = true
        lambdas = 0.5,0.25
        mode = kmeans
        """
    )
    assert cfg.seed == 5
    assert cfg.hidden == (16, 8)
    assert cfg.lr == 0.25
    assert cfg.include_bias is True
    assert cfg.lambdas == (0.5, 0.25)
    assert cfg.mode == "kmeans"
    assert cfg.bits == 4  # untouched default


@pytest.mark.parametrize("text,msg", [
    ("volume = 11", "unknown key"),
    ("seed = 1\nseed = 2", "duplicate"),
    ("just words", "key = value"),
    ("seed = banana", "bad value"),
    ("include_bias = maybe", "bad value"),
])
def test_parse_config_rejects(text, msg):
    with pytest.raises(ConfigurationError, match=msg):
        parse_config(text)


def test_parse_config_line_numbers():
    with pytest.raises(ConfigurationError, match="line 3"):
        parse_config("seed = 1\n\nwat = 2")


def test_config_hash_tracks_content():
    base = ExperimentConfig()
    assert config_hash(base) == config_hash(ExperimentConfig())
    assert config_hash(base) != config_hash(ExperimentConfig(seed=1))
    assert len(config_hash(base)) == 12


def test_dump_config_covers_every_field():
    text = dump_config(ExperimentConfig())
    keys = [line.split(" = ")[0] for line in text.strip().splitlines()]
    assert keys == sorted(f.name for f in dataclasses.fields(ExperimentConfig))


def test_apply_overrides():
    cfg = apply_overrides(ExperimentConfig(), ["seed=9", "r_o=1.5"])
    assert cfg.seed == 9 and cfg.r_o == 1.5
    with pytest.raises(ConfigurationError):
        apply_overrides(ExperimentConfig(), ["nope=1"])
    with pytest.raises(ConfigurationError):
        apply_overrides(ExperimentConfig(), ["seed"])


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigurationError, match="cannot read"):
        load_config(tmp_path / "absent.cfg")
    p = tmp_path / "ok.cfg"
    p.write_text("seed = 4\n")
    assert load_config(p).seed == 4
