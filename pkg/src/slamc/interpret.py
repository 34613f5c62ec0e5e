"""Batch prediction, zero-shot cross-level evaluation, and term scoring.

Because the aggregated cell embedding and the individual term vectors live
on the same unit sphere, the fitted probability network can score raw terms
directly: a term's score is the network output at its embedding, and its
percentile places it among the other scored terms (mid-rank for ties).
High-scoring terms are the ones the model treats as most predictive of the
target; low scorers are the ones it learned to ignore.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
from typing import Mapping, Optional, Sequence

import numpy as np

from .compress import Key, SearchEmbedding
from .errors import ConfigError, RegionPolicyError
from .model import (ModelConfig, NowcastModel, activation_matrix,
                    forward_pipeline, net_forward, region_onehot)
from .training import mape, pearson_r

REGION_POLICY_ZEROS = "zeros"
REGION_POLICY_UNIFORM = "uniform"


def _region_block(config: ModelConfig, region: Optional[str],
                  policy: Optional[str]) -> np.ndarray:
    """One-hot region features, or a policy-defined stand-in when the region
    is not part of the model's region set."""
    if region is not None and region in config.regions:
        return region_onehot(config, region)
    if policy is None:
        raise RegionPolicyError(
            f"region {region!r} unknown to this model; supply a region "
            f"policy ({REGION_POLICY_ZEROS!r} or {REGION_POLICY_UNIFORM!r})")
    if policy == REGION_POLICY_ZEROS:
        return np.zeros(len(config.regions))
    if policy == REGION_POLICY_UNIFORM:
        return np.full(len(config.regions), 1.0 / len(config.regions))
    raise ConfigError(f"unknown region policy {policy!r}")


def _batch_predict(model: NowcastModel,
                   embeddings: Mapping[Key, SearchEmbedding],
                   region_policy: Optional[str] = None) -> dict[Key, float]:
    """Predictions for every cell, degenerate cells pinned to zero.

    Unknown regions fall back to the region policy for the network features;
    multiplier keys that match nothing simply contribute 1.
    """
    config = model.config
    keys = sorted(embeddings)
    live = [k for k in keys if not embeddings[k].degenerate]
    out: dict[Key, float] = {k: 0.0 for k in keys}
    if not live:
        return out
    rows = []
    for key in live:
        emb = embeddings[key]
        if config.region_in_net:
            rows.append(np.concatenate([
                emb.unit_vector, _region_block(config, key[1], region_policy)]))
        else:
            rows.append(np.asarray(emb.unit_vector, dtype=np.float64))
    inputs = np.stack(rows)
    volumes = np.asarray([embeddings[k].volume for k in live], dtype=np.float64)
    act = activation_matrix(config, [k[0] for k in live], [k[1] for k in live])
    cache = forward_pipeline(model.params, config, inputs, volumes, act)
    for key, value in zip(live, cache.yhat):
        out[key] = float(value)
    return out


def predict_series(model: NowcastModel,
                   embeddings: Mapping[Key, SearchEmbedding],
                   level: str = "region",
                   region_policy: Optional[str] = None):
    """Per-cell predictions ("region") or per-period sums ("rollup")."""
    if level not in ("region", "rollup"):
        raise ConfigError(f"unknown level {level!r}")
    cells = _batch_predict(model, embeddings, region_policy)
    if len({(k[0], k[1]) for k in cells}) != len(cells):
        raise ConfigError("multiple categories per (period, region) cell; "
                          "filter the embeddings to one category first")
    if level == "region":
        return {(key[0], key[1]): value for key, value in sorted(cells.items())}
    series: dict[dt.date, float] = {}
    for key in sorted(cells):
        series[key[0]] = series.get(key[0], 0.0) + cells[key]
    return series


@dataclasses.dataclass
class EvalReport:
    mape: float
    pearson: float
    predictions: dict
    level: str
    region_policy: Optional[str] = None


def _score(targets: Mapping, predictions: Mapping, level: str,
           region_policy: Optional[str]) -> EvalReport:
    keys = sorted(targets)
    missing = [k for k in keys if k not in predictions]
    if missing:
        raise ConfigError(f"no prediction for target {missing[0]}")
    y = np.array([targets[k] for k in keys])
    yhat = np.array([predictions[k] for k in keys])
    return EvalReport(mape(y, yhat), pearson_r(y, yhat),
                      dict(predictions), level, region_policy)


def evaluate(model: NowcastModel, embeddings: Mapping[Key, SearchEmbedding],
             targets: Mapping, level: str = "region",
             region_policy: Optional[str] = None) -> EvalReport:
    """MAPE and Pearson r of model predictions against targets.

    Region-level targets are keyed (period, region); rollup targets are
    keyed by period and compared against the sum over regions.
    """
    predictions = predict_series(model, embeddings, level, region_policy)
    return _score(targets, predictions, level, region_policy)


def zero_shot_eval(model: NowcastModel,
                   embeddings: Mapping[Key, SearchEmbedding],
                   targets: Mapping,
                   direction: str = "to_child",
                   region_policy: Optional[str] = None) -> EvalReport:
    """Evaluate across geographic levels without retraining.

    to_parent: predictions for the child cells are summed per period and
    compared against parent-level targets keyed by period; this is the
    rollup path itself, so parent-level zero-shot equals the rollup of
    child predictions exactly.

    to_child: the model is applied to child-level embeddings directly.
    Regions the model has never seen require a region policy when the
    probability network is region-conditioned; unseen multiplier keys
    contribute 1 on their own.
    """
    if direction == "to_parent":
        return _score(targets,
                      predict_series(model, embeddings, "rollup", region_policy),
                      "rollup", region_policy)
    if direction == "to_child":
        return _score(targets,
                      predict_series(model, embeddings, "region", region_policy),
                      "region", region_policy)
    raise ConfigError(f"unknown zero-shot direction {direction!r}")


# ---------------------------------------------------------------------------
# Term scoring
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class TermScore:
    term: str
    score: float
    percentile: float


def percentiles_midrank(scores: np.ndarray) -> np.ndarray:
    """Mid-rank percentiles in [0, 100]: strictly-smaller count plus half the
    tie count (the value itself included), over the total."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    order = np.sort(scores)
    lower = np.searchsorted(order, scores, side="left")
    upper = np.searchsorted(order, scores, side="right")
    return 100.0 * (lower + 0.5 * (upper - lower)) / n


def score_terms(terms: Sequence[str], model: NowcastModel, provider,
                region: Optional[str] = None,
                region_policy: str = REGION_POLICY_ZEROS,
                chunk_size: int = 4096) -> list[TermScore]:
    """Probability score and percentile for each term.

    Terms the provider cannot embed (table provider, skip policy) are left
    out of the result.  Scoring runs in chunks; output order follows input
    order.
    """
    config = model.config
    kept: list[str] = []
    vectors: list[np.ndarray] = []
    for term in terms:
        vec = provider.embed(term)
        if vec is None:
            continue
        kept.append(term)
        vectors.append(vec)
    if not kept:
        return []
    scores = np.empty(len(kept))
    if config.region_in_net:
        block = _region_block(config, region, region_policy)
    for start in range(0, len(kept), chunk_size):
        mat = np.stack(vectors[start:start + chunk_size])
        if config.region_in_net:
            mat = np.hstack([mat, np.tile(block, (mat.shape[0], 1))])
        cache = net_forward(model.params, config, mat)
        scores[start:start + mat.shape[0]] = cache.probs
    pct = percentiles_midrank(scores)
    return [TermScore(t, float(s), float(p))
            for t, s, p in zip(kept, scores, pct)]


def write_term_scores(path: str, scores: Sequence[TermScore]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("term\tscore\tpercentile\n")
        for row in scores:
            handle.write(f"{row.term}\t{row.score:.17g}\t{row.percentile:.17g}\n")


# ---------------------------------------------------------------------------
# Nearest-neighbour diagnostics
# ---------------------------------------------------------------------------

def nearest_clusters(reference: np.ndarray,
                     candidates: Mapping[str, np.ndarray],
                     k: int = 5) -> list[tuple[str, float]]:
    """The k candidates closest to the reference by Euclidean distance.

    On unit vectors this ordering coincides with descending cosine
    similarity.  Distance ties break lexicographically by label; k larger
    than the candidate set returns everything.
    """
    if k < 1:
        raise ConfigError("k must be positive")
    reference = np.asarray(reference, dtype=np.float64)
    ranked = sorted(
        ((float(np.linalg.norm(np.asarray(vec, dtype=np.float64) - reference)),
          label) for label, vec in candidates.items()))
    return [(label, dist) for dist, label in ranked[:k]]
