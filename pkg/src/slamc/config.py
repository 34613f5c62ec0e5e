"""Human-readable run configuration files.

Format: one ``key = value`` pair per line, ``#`` comments, blank lines
ignored.  Keys are dotted by section, e.g.::

    # nowcast run
    model.layers = 1
    model.hidden = 64
    model.psi = identity
    model.region_in_net = false
    model.region_multipliers = true
    model.calendar_features = day_of_week
    optimizer.peak_lr = 1e-4
    optimizer.l1_lambda = 0
    split.test_start = 2023-10-28
    split.val_fraction = 0.1
    seeds = 0, 1, 2, 3, 4

A persisted configuration plus the same input files reproduces a run bit
for bit, because every random stream is keyed on the declared seeds.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
from typing import Optional

from .errors import ConfigError
from .model import ModelConfig
from .training import OptimizerConfig, SplitSpec
from .util import fmt_float, parse_date


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"config line {line_no}: expected 'key = value'")
        key = key.strip()
        if not key:
            raise ConfigError(f"config line {line_no}: empty key")
        out[key] = value.strip()
    return out


def _parse_bool(value: str, key: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


@dataclasses.dataclass
class RunConfig:
    """Everything a training run needs beyond the input files themselves."""

    layers: int = 1
    hidden: int = 64
    psi: str = "identity"
    region_in_net: bool = False
    region_multipliers: bool = False
    calendar_features: tuple[str, ...] = ()
    degenerate_policy: str = "skip"
    optimizer: OptimizerConfig = dataclasses.field(default_factory=OptimizerConfig)
    test_start: Optional[dt.date] = None
    val_fraction: float = 0.10
    split_seed: int = 0
    seeds: tuple[int, ...] = (0,)

    def model_config(self, dim: int, regions: tuple[str, ...]) -> ModelConfig:
        return ModelConfig(dim=dim, regions=regions, layers=self.layers,
                           hidden=self.hidden, psi=self.psi,
                           region_in_net=self.region_in_net,
                           region_multipliers=self.region_multipliers,
                           calendar_features=self.calendar_features,
                           degenerate_policy=self.degenerate_policy)

    def split_spec(self) -> SplitSpec:
        if self.test_start is None:
            raise ConfigError("split.test_start is required")
        return SplitSpec(self.test_start, self.val_fraction, self.split_seed)


_OPT_FIELDS = {f.name: f.type for f in dataclasses.fields(OptimizerConfig)}
_INT_OPT_FIELDS = ("warmup_steps", "decay_steps", "max_steps", "patience")


def run_config_from_text(text: str) -> RunConfig:
    pairs = parse_config_text(text)
    cfg = RunConfig()
    opt_kwargs: dict[str, object] = {}
    for key, value in pairs.items():
        if key == "model.layers":
            cfg.layers = int(value)
        elif key == "model.hidden":
            cfg.hidden = int(value)
        elif key == "model.psi":
            cfg.psi = value
        elif key == "model.region_in_net":
            cfg.region_in_net = _parse_bool(value, key)
        elif key == "model.region_multipliers":
            cfg.region_multipliers = _parse_bool(value, key)
        elif key == "model.calendar_features":
            cfg.calendar_features = tuple(
                v.strip() for v in value.split(",") if v.strip())
        elif key == "model.degenerate_policy":
            cfg.degenerate_policy = value
        elif key.startswith("optimizer."):
            field = key[len("optimizer."):]
            if field not in _OPT_FIELDS:
                raise ConfigError(f"unknown optimizer option {field!r}")
            opt_kwargs[field] = int(value) if field in _INT_OPT_FIELDS \
                else float(value)
        elif key == "split.test_start":
            cfg.test_start = parse_date(value)
        elif key == "split.val_fraction":
            cfg.val_fraction = float(value)
        elif key == "split.seed":
            cfg.split_seed = int(value)
        elif key == "seeds":
            cfg.seeds = tuple(int(v.strip()) for v in value.split(",")
                              if v.strip())
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if opt_kwargs:
        cfg.optimizer = OptimizerConfig(**opt_kwargs)
    return cfg


def run_config_from_file(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as handle:
        return run_config_from_text(handle.read())


def run_config_to_text(cfg: RunConfig) -> str:
    lines = [
        f"model.layers = {cfg.layers}",
        f"model.hidden = {cfg.hidden}",
        f"model.psi = {cfg.psi}",
        f"model.region_in_net = {str(cfg.region_in_net).lower()}",
        f"model.region_multipliers = {str(cfg.region_multipliers).lower()}",
        f"model.calendar_features = {', '.join(cfg.calendar_features)}",
        f"model.degenerate_policy = {cfg.degenerate_policy}",
    ]
    defaults = OptimizerConfig()
    for field in dataclasses.fields(OptimizerConfig):
        value = getattr(cfg.optimizer, field.name)
        rendered = str(value) if field.name in _INT_OPT_FIELDS \
            else fmt_float(value)
        if value != getattr(defaults, field.name):
            lines.append(f"optimizer.{field.name} = {rendered}")
    if cfg.test_start is not None:
        lines.append(f"split.test_start = {cfg.test_start.isoformat()}")
    lines.append(f"split.val_fraction = {fmt_float(cfg.val_fraction)}")
    lines.append(f"split.seed = {cfg.split_seed}")
    lines.append(f"seeds = {', '.join(str(s) for s in cfg.seeds)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Synthetic-world spec files (same key = value syntax, synth.* keys)
# ---------------------------------------------------------------------------

_WORLD_INT = ("n_terms", "dim", "n_regions", "train_days", "test_days",
              "base_volume", "terms_per_cell", "embed_seed")
_WORLD_FLOAT = ("volume_sigma", "zipf_exponent", "seasonal_strength",
                "region_alpha_mix", "multiplier_sigma", "noise_sigma")


def world_spec_from_file(path: str):
    from .synth import WorldSpec
    with open(path, "r", encoding="utf-8") as handle:
        pairs = parse_config_text(handle.read())
    kwargs: dict[str, object] = {}
    for key, value in pairs.items():
        if not key.startswith("synth."):
            raise ConfigError(f"unknown world spec key {key!r}")
        field = key[len("synth."):]
        if field in _WORLD_INT:
            kwargs[field] = int(value)
        elif field in _WORLD_FLOAT:
            kwargs[field] = float(value)
        elif field == "start":
            kwargs[field] = parse_date(value)
        elif field in ("category", "count_mode"):
            kwargs[field] = value
        else:
            raise ConfigError(f"unknown world spec key {key!r}")
    return WorldSpec(**kwargs)
