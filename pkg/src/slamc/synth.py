"""Synthetic query logs with a known ground truth.

The generator hides a simple structural truth behind realistic-looking
logs: every term owns a fixed unit embedding, a hidden unit direction
alpha scores each cell's aggregate embedding through the bounded linear
map f(u) = (1 + alpha.u) / 2, and the noiseless target for a cell is

    y = V * f(unit aggregate) * M_region

which is exactly the family the nowcasting model can represent.  Because
the truth is computed from the very records that are emitted, the whole
pipeline (compress, train, evaluate) can be scored quantitatively against
known values instead of eyeballed.

Term counts are drawn heavy-tailed (zipfian ranks) from seasonal pools
whose mixture drifts over the year, so aggregate embeddings move with the
calendar the way real search mixes do.  Optionally each region blends its
own direction into alpha (region_alpha_mix), which makes region
conditioning genuinely informative, and multiplicative lognormal noise can
be applied to the observed targets.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import json
import math
from typing import Mapping, Optional, Sequence

import numpy as np

from .compress import Key, QueryLogRecord, SearchEmbedding, normalize_or_flag
from .embedders import HashEmbedder
from .errors import ConfigError
from .model import NowcastModel
from .training import mape, pearson_r
from .util import keyed_rng

POOLS = ("winter", "summer", "neutral")


@dataclasses.dataclass(frozen=True)
class WorldSpec:
    """Size and behaviour knobs for a synthetic world."""

    n_terms: int = 10000
    dim: int = 32
    n_regions: int = 8
    train_days: int = 300
    test_days: int = 60
    start: dt.date = dt.date(2023, 1, 1)
    category: str = "all"
    base_volume: int = 20000
    volume_sigma: float = 0.2          # lognormal day-to-day volume spread
    terms_per_cell: int = 200
    zipf_exponent: float = 1.1
    seasonal_strength: float = 0.7     # 0 freezes the pool mixture
    region_alpha_mix: float = 0.0      # 0 = one shared alpha direction
    multiplier_sigma: float = 0.4      # spread of log region multipliers
    noise_sigma: float = 0.0           # lognormal target noise, 0 = exact
    count_mode: str = "multinomial"    # or "expected" (deterministic counts)
    embed_seed: int = 7

    def __post_init__(self):
        if self.n_terms < len(POOLS):
            raise ConfigError("need at least one term per pool")
        if self.dim < 1 or self.n_regions < 1:
            raise ConfigError("dim and n_regions must be positive")
        if self.train_days < 1 or self.test_days < 0:
            raise ConfigError("bad day counts")
        if self.terms_per_cell < 1:
            raise ConfigError("terms_per_cell must be positive")
        if self.count_mode not in ("multinomial", "expected"):
            raise ConfigError(f"unknown count mode {self.count_mode!r}")
        if not 0.0 <= self.region_alpha_mix <= 1.0:
            raise ConfigError("region_alpha_mix must be in [0, 1]")

    @property
    def test_start(self) -> dt.date:
        return self.start + dt.timedelta(days=self.train_days)

    @property
    def total_days(self) -> int:
        return self.train_days + self.test_days


@dataclasses.dataclass
class SyntheticWorld:
    """Hidden ground truth: vocabulary, directions, multipliers, pools."""

    spec: WorldSpec
    seed: int
    vocabulary: list[str]
    provider: HashEmbedder
    alpha: np.ndarray
    region_codes: tuple[str, ...]
    region_alphas: dict[str, np.ndarray]
    multipliers: dict[str, float]
    pool_of_term: np.ndarray           # pool index per vocabulary slot
    base_weights: np.ndarray           # unnormalized zipf weight per term


@dataclasses.dataclass
class CellTruth:
    volume: int
    f_value: float
    y_clean: float
    y_observed: float


@dataclasses.dataclass
class WorldTruth:
    """Everything needed to score a fitted model against the generator."""

    alpha: np.ndarray
    region_alphas: dict[str, np.ndarray]
    multipliers: dict[str, float]
    cells: dict[tuple[dt.date, str], CellTruth]
    test_start: dt.date
    provider_fingerprint: str


@dataclasses.dataclass
class GeneratedData:
    records: list[QueryLogRecord]
    targets: dict[tuple[dt.date, str], float]
    truth: WorldTruth


def make_world(spec: WorldSpec, seed: int) -> SyntheticWorld:
    rng = keyed_rng("world", seed)
    vocabulary = [f"q{i:06d}" for i in range(spec.n_terms)]
    provider = HashEmbedder(spec.dim, spec.embed_seed)
    alpha = rng.standard_normal(spec.dim)
    alpha /= np.linalg.norm(alpha)
    region_codes = tuple(f"R{i:02d}" for i in range(spec.n_regions))
    region_alphas = {}
    for code in region_codes:
        if spec.region_alpha_mix > 0:
            own = rng.standard_normal(spec.dim)
            own /= np.linalg.norm(own)
            blended = (1 - spec.region_alpha_mix) * alpha + \
                spec.region_alpha_mix * own
            region_alphas[code] = blended / np.linalg.norm(blended)
        else:
            region_alphas[code] = alpha
    multipliers = {code: float(np.exp(rng.normal(0.0, spec.multiplier_sigma)))
                   for code in region_codes}
    pool_of_term = rng.integers(0, len(POOLS), size=spec.n_terms)
    ranks = rng.permutation(spec.n_terms) + 1
    base_weights = 1.0 / ranks ** spec.zipf_exponent
    return SyntheticWorld(spec, seed, vocabulary, provider, alpha,
                          region_codes, region_alphas, multipliers,
                          pool_of_term, base_weights)


def _pool_mixture(spec: WorldSpec, day: dt.date) -> np.ndarray:
    """Seasonal pool weights; winter peaks around January 1st."""
    phase = 2.0 * math.pi * (day.timetuple().tm_yday - 1) / 365.25
    winter = 0.5 * (1.0 + math.cos(phase))
    strength = spec.seasonal_strength
    weights = np.array([
        (1.0 - strength) + strength * winter,
        (1.0 - strength) + strength * (1.0 - winter),
        1.0,
    ])
    return weights / weights.sum()


def _term_probabilities(world: SyntheticWorld, day: dt.date) -> np.ndarray:
    mixture = _pool_mixture(world.spec, day)
    probs = world.base_weights * mixture[world.pool_of_term]
    return probs / probs.sum()


def _gumbel_top_k(rng: np.random.Generator, log_probs: np.ndarray,
                  k: int) -> np.ndarray:
    """Weighted sample of k distinct indices via the Gumbel-max trick."""
    gumbel = -np.log(-np.log(rng.random(log_probs.size)))
    return np.argpartition(-(log_probs + gumbel), k - 1)[:k]


def generate(world: SyntheticWorld, days: Optional[Sequence[dt.date]] = None,
             regions: Optional[Sequence[str]] = None,
             seed: int = 0) -> GeneratedData:
    """Draw logs, observed targets, and the truth report for a world.

    Cells are generated in sorted (day, region) order from a single keyed
    stream, so the same (world, seed) yields identical output bit for bit.
    """
    spec = world.spec
    if days is None:
        days = [spec.start + dt.timedelta(days=i) for i in range(spec.total_days)]
    if regions is None:
        regions = world.region_codes
    unknown = [r for r in regions if r not in world.region_codes]
    if unknown:
        raise ConfigError(f"regions not in this world: {unknown}")

    rng = keyed_rng("generate", world.seed, seed)
    records: list[QueryLogRecord] = []
    targets: dict[tuple[dt.date, str], float] = {}
    cells: dict[tuple[dt.date, str], CellTruth] = {}
    vocab = np.asarray(world.vocabulary)
    for day in sorted(days):
        probs = _term_probabilities(world, day)
        log_probs = np.log(probs)
        for region in sorted(regions):
            if spec.volume_sigma > 0:
                draw = math.exp(rng.normal(0.0, spec.volume_sigma))
                volume = max(1, int(round(spec.base_volume * draw)))
            else:
                volume = spec.base_volume
            k = min(spec.terms_per_cell, spec.n_terms)
            if k == spec.n_terms:
                chosen = np.arange(spec.n_terms)
            else:
                chosen = np.sort(_gumbel_top_k(rng, log_probs, k))
            sub = probs[chosen]
            sub = sub / sub.sum()
            if spec.count_mode == "multinomial":
                counts = rng.multinomial(volume, sub)
            else:
                # deterministic largest-remainder rounding of expected counts
                exact = sub * volume
                counts = np.floor(exact).astype(np.int64)
                short = volume - int(counts.sum())
                if short > 0:
                    order = np.argsort(-(exact - counts), kind="stable")
                    counts[order[:short]] += 1
            keep = counts > 0
            terms = vocab[chosen[keep]]
            kept_counts = counts[keep]
            mat = world.provider.embed_many(terms)
            raw = (kept_counts[:, None] * mat).sum(axis=0)
            unit, degenerate = normalize_or_flag(raw)
            if degenerate:
                raise ConfigError("generated a degenerate cell; "
                                  "raise terms_per_cell or base_volume")
            f_value = float((1.0 + world.region_alphas[region] @ unit) / 2.0)
            y_clean = float(volume) * f_value * world.multipliers[region]
            if spec.noise_sigma > 0:
                y_obs = y_clean * math.exp(rng.normal(0.0, spec.noise_sigma))
            else:
                y_obs = y_clean
            for term, count in zip(terms, kept_counts):
                records.append(QueryLogRecord(day, region, spec.category,
                                              str(term), int(count)))
            targets[(day, region)] = y_obs
            cells[(day, region)] = CellTruth(int(volume), f_value, y_clean, y_obs)
    truth = WorldTruth(world.alpha, dict(world.region_alphas),
                       dict(world.multipliers), cells, spec.test_start,
                       world.provider.fingerprint)
    return GeneratedData(records, targets, truth)


def per_term_score_sum(world: SyntheticWorld, counts: Mapping[str, int],
                       region: Optional[str] = None) -> float:
    """Brute-force sum of count * f(term embedding) over individual terms.

    This is the slow per-term route that the closed form in (V, gamma)
    replaces; keeping it callable lets tests verify the identity
    sum_s v_s f(e_s) == (V + alpha.gamma) / 2.
    """
    alpha = world.region_alphas[region] if region else world.alpha
    total = 0.0
    for term in sorted(counts):
        e = world.provider.embed(term)
        total += counts[term] * float((1.0 + alpha @ e) / 2.0)
    return total


@dataclasses.dataclass
class OracleReport:
    test_mape: float
    test_r: float
    rollup_mape: float
    rollup_r: float
    multiplier_ratios: dict[str, float]   # fitted/true, geometric mean 1
    n_test_cells: int


def oracle_fit_check(truth: WorldTruth, model: Optional[NowcastModel] = None,
                     embeddings: Optional[Mapping[Key, SearchEmbedding]] = None,
                     predictions: Optional[Mapping[tuple[dt.date, str], float]] = None
                     ) -> OracleReport:
    """Score predictions against the noiseless truth on the test period.

    Pass a fitted model plus its embeddings, or precomputed per-cell
    predictions.  Region-multiplier recovery is reported as fitted/true
    ratios normalized to geometric mean 1 (the absolute level is not
    identifiable because the probability factor can absorb a constant).
    """
    if predictions is None:
        if model is None or embeddings is None:
            raise ConfigError("need either predictions or (model, embeddings)")
        from .interpret import predict_series
        predictions = predict_series(model, embeddings, level="region")
    test_cells = {cell: t for cell, t in truth.cells.items()
                  if cell[0] >= truth.test_start}
    if not test_cells:
        raise ConfigError("truth report has no test cells")
    keys = sorted(test_cells)
    y = np.array([test_cells[c].y_clean for c in keys])
    yhat = np.array([predictions[c] for c in keys])
    by_day: dict[dt.date, list[float]] = {}
    for cell, pred in zip(keys, yhat):
        by_day.setdefault(cell[0], []).append(pred)
    truth_by_day: dict[dt.date, float] = {}
    for cell in keys:
        truth_by_day[cell[0]] = truth_by_day.get(cell[0], 0.0) + \
            test_cells[cell].y_clean
    days = sorted(by_day)
    roll_pred = np.array([sum(by_day[d]) for d in days])
    roll_true = np.array([truth_by_day[d] for d in days])

    ratios: dict[str, float] = {}
    if model is not None and model.config.region_multipliers:
        fitted = {code: model.multiplier_value(f"region:{code}")
                  for code in model.config.regions if code in truth.multipliers}
        if fitted:
            raw = {code: fitted[code] / truth.multipliers[code]
                   for code in fitted}
            log_mean = float(np.mean([math.log(v) for v in raw.values()]))
            ratios = {code: v / math.exp(log_mean) for code, v in raw.items()}
    return OracleReport(mape(y, yhat), pearson_r(y, yhat),
                        mape(roll_true, roll_pred),
                        pearson_r(roll_true, roll_pred) if len(days) > 1 else 1.0,
                        ratios, len(keys))


# ---------------------------------------------------------------------------
# Truth persistence
# ---------------------------------------------------------------------------

def write_truth(path_json: str, path_cells: str, truth: WorldTruth) -> None:
    payload = {
        "alpha": truth.alpha.tolist(),
        "region_alphas": {k: v.tolist() for k, v in truth.region_alphas.items()},
        "multipliers": truth.multipliers,
        "test_start": truth.test_start.isoformat(),
        "provider_fingerprint": truth.provider_fingerprint,
    }
    with open(path_json, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")
    with open(path_cells, "w", encoding="utf-8") as handle:
        handle.write("period\tregion\tvolume\tf_value\ty_clean\ty_observed\n")
        for (period, region) in sorted(truth.cells):
            cell = truth.cells[(period, region)]
            handle.write(f"{period.isoformat()}\t{region}\t{cell.volume}\t"
                         f"{cell.f_value:.17g}\t{cell.y_clean:.17g}\t"
                         f"{cell.y_observed:.17g}\n")


def read_truth(path_json: str, path_cells: str) -> WorldTruth:
    with open(path_json, "r", encoding="utf-8") as handle:
        payload = json.load(handle)
    cells: dict[tuple[dt.date, str], CellTruth] = {}
    with open(path_cells, "r", encoding="utf-8") as handle:
        next(handle)
        for line in handle:
            parts = line.rstrip("\n").split("\t")
            cells[(dt.date.fromisoformat(parts[0]), parts[1])] = CellTruth(
                int(parts[2]), float(parts[3]), float(parts[4]), float(parts[5]))
    return WorldTruth(np.asarray(payload["alpha"]),
                      {k: np.asarray(v)
                       for k, v in payload["region_alphas"].items()},
                      {k: float(v) for k, v in payload["multipliers"].items()},
                      cells, dt.date.fromisoformat(payload["test_start"]),
                      payload["provider_fingerprint"])
