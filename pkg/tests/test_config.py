import datetime as dt

import pytest

from slamc.config import (RunConfig, parse_config_text, run_config_from_text,
                          run_config_to_text, world_spec_from_file)
from slamc.errors import ConfigError
from slamc.training import OptimizerConfig

SAMPLE = """
# example run
model.layers = 2
model.hidden = 32
model.psi = constant_one
model.region_in_net = true
model.region_multipliers = false
model.calendar_features = day_of_week, week_of_month
optimizer.peak_lr = 2e-4
optimizer.max_steps = 400
optimizer.l1_lambda = 20
split.test_start = 2023-10-28
split.val_fraction = 0.2
split.seed = 3
seeds = 0, 1, 2
"""


def test_parse_config_text_basics():
    pairs = parse_config_text("a = 1\n# comment\n\nb.c = two words\n")
    assert pairs == {"a": "1", "b.c": "two words"}
    with pytest.raises(ConfigError, match="key = value"):
        parse_config_text("not a pair\n")


def test_run_config_parsing():
    cfg = run_config_from_text(SAMPLE)
    assert cfg.layers == 2
    assert cfg.hidden == 32
    assert cfg.psi == "constant_one"
    assert cfg.region_in_net is True
    assert cfg.region_multipliers is False
    assert cfg.calendar_features == ("day_of_week", "week_of_month")
    assert cfg.optimizer.peak_lr == 2e-4
    assert cfg.optimizer.max_steps == 400
    assert cfg.optimizer.l1_lambda == 20.0
    assert cfg.test_start == dt.date(2023, 10, 28)
    assert cfg.val_fraction == 0.2
    assert cfg.split_seed == 3
    assert cfg.seeds == (0, 1, 2)


def test_run_config_roundtrip():
    cfg = run_config_from_text(SAMPLE)
    again = run_config_from_text(run_config_to_text(cfg))
    assert again == cfg


def test_run_config_defaults_roundtrip():
    cfg = RunConfig(test_start=dt.date(2024, 1, 1))
    again = run_config_from_text(run_config_to_text(cfg))
    assert again == cfg
    assert again.optimizer == OptimizerConfig()


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        run_config_from_text("model.depth = 3\n")
    with pytest.raises(ConfigError, match="unknown optimizer option"):
        run_config_from_text("optimizer.momentum = 0.9\n")


def test_bad_boolean_rejected():
    with pytest.raises(ConfigError, match="boolean"):
        run_config_from_text("model.region_in_net = maybe\n")


def test_split_required_for_training():
    cfg = run_config_from_text("model.layers = 1\n")
    with pytest.raises(ConfigError, match="test_start"):
        cfg.split_spec()


def test_world_spec_file(tmp_path):
    path = tmp_path / "world.cfg"
    path.write_text("synth.n_terms = 500\nsynth.dim = 8\n"
                    "synth.noise_sigma = 0.1\nsynth.start = 2022-06-01\n",
                    encoding="utf-8")
    spec = world_spec_from_file(str(path))
    assert spec.n_terms == 500
    assert spec.dim == 8
    assert spec.noise_sigma == 0.1
    assert spec.start == dt.date(2022, 6, 1)
    path.write_text("synth.bogus = 1\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        world_spec_from_file(str(path))
