"""Full-batch gradient training.

The whole training set fits in memory, so every step uses the exact
gradient of the loss over all training cells.  One step is:

    1. forward + loss (weighted adjusted MAPE, optionally L1-regularized)
    2. add Gaussian noise to the gradient, std = eta / (1 + step)^0.55
    3. clip the global gradient norm
    4. Adam update at the scheduled learning rate
       (linear warmup, then cosine decay to zero)
    5. evaluate the validation loss; snapshot parameters on improvement

Training stops when the validation loss has not improved for more than
`patience` consecutive steps, or at max_steps; the returned parameters are
the best-validation snapshot.  All randomness (init, validation split,
gradient noise) is drawn from counter-based generators keyed on (seed,
purpose, step), so a rerun with the same seed reproduces the history
bit for bit.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .compress import Key, SearchEmbedding
from .errors import ConfigError, DivergenceError, FormatError
from .model import (ModelConfig, NowcastModel, Params, activation_matrix,
                    backward_pipeline, build_input, forward_pipeline,
                    is_net_param, new_model)
from .util import fmt_float, keyed_rng, worker_count

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclasses.dataclass(frozen=True)
class SplitSpec:
    """Date partition: test is everything from test_start on; validation is
    a uniform draw from the earlier dates at val_fraction."""

    test_start: dt.date
    val_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")


def split_dates(dates: Iterable[dt.date],
                spec: SplitSpec) -> tuple[list[dt.date], list[dt.date], list[dt.date]]:
    """Deterministic (train, val, test) partition of the given dates."""
    unique = sorted(set(dates))
    non_test = [d for d in unique if d < spec.test_start]
    test = [d for d in unique if d >= spec.test_start]
    if not non_test:
        raise ConfigError("no dates before test_start: training set empty")
    n_val = int(round(spec.val_fraction * len(non_test)))
    rng = keyed_rng("date-split", spec.seed)
    val_idx = set(rng.choice(len(non_test), size=n_val, replace=False).tolist())
    train = [d for i, d in enumerate(non_test) if i not in val_idx]
    val = [d for i, d in enumerate(non_test) if i in val_idx]
    if not train:
        raise ConfigError("validation fraction leaves no training dates")
    return train, val, test


@dataclasses.dataclass(frozen=True)
class OptimizerConfig:
    """Optimization hyperparameters; defaults follow the standard grid."""

    peak_lr: float = 1e-4
    initial_lr: float = 1e-7
    warmup_steps: int = 100
    decay_steps: int = 5000
    max_steps: int = 10000
    clip_norm: float = 1.0
    noise_scale: float = 0.0
    noise_decay: float = 0.55
    patience: int = 20
    l1_lambda: float = 0.0
    loss_epsilon: float = 1e-6

    def __post_init__(self):
        if self.l1_lambda < 0:
            raise ConfigError("l1_lambda must be non-negative")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be non-negative")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be positive")
        if self.patience < 0:
            raise ConfigError("patience must be non-negative")
        if self.warmup_steps < 0 or self.decay_steps < 1:
            raise ConfigError("bad schedule lengths")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")


def lr_at(step: int, cfg: OptimizerConfig) -> float:
    """Linear warmup to peak, cosine decay to zero, then held at zero."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        frac = step / cfg.warmup_steps
        return cfg.initial_lr + (cfg.peak_lr - cfg.initial_lr) * frac
    done = step - cfg.warmup_steps
    if done >= cfg.decay_steps:
        return 0.0
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * done / cfg.decay_steps))


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def loss_wmape(y: np.ndarray, yhat: np.ndarray,
               weights: Optional[np.ndarray] = None,
               eps: float = 1e-6) -> float:
    """Weighted adjusted MAPE: each residual is scaled by both the target
    and the prediction magnitude, then weight-averaged.  Weights default
    to |y|."""
    loss, _ = _loss_wmape_grad(np.asarray(y, dtype=np.float64),
                               np.asarray(yhat, dtype=np.float64),
                               weights, eps)
    return loss


def _loss_wmape_grad(y: np.ndarray, yhat: np.ndarray,
                     weights: Optional[np.ndarray],
                     eps: float) -> tuple[float, np.ndarray]:
    if y.shape != yhat.shape:
        raise ConfigError("targets and predictions differ in shape")
    if y.size == 0:
        raise ConfigError("empty loss batch")
    w = np.abs(y) if weights is None else np.asarray(weights, dtype=np.float64)
    w_total = w.sum()
    if w_total <= 0:
        raise ConfigError("loss weights sum to zero")
    resid = y - yhat
    abs_resid = np.abs(resid)
    denom_y = np.abs(y) + eps
    denom_p = np.abs(yhat) + eps
    loss = float((w * (abs_resid / denom_y + abs_resid / denom_p)).sum() / w_total)
    # subgradient convention: sign(0) = 0 at both kinks
    sign_r = np.sign(resid)
    dyhat = (w / w_total) * (
        -sign_r / denom_y
        - sign_r / denom_p
        - abs_resid * np.sign(yhat) / denom_p ** 2
    )
    return loss, dyhat


def l1_penalty(params: Params) -> float:
    """Sum of absolute values over probability-network parameters only."""
    return float(sum(np.abs(v).sum() for k, v in params.items()
                     if is_net_param(k)))


def loss_regularized(base_loss: float, params: Params, lam: float) -> float:
    if lam < 0:
        raise ConfigError("l1_lambda must be non-negative")
    return base_loss + lam * l1_penalty(params)


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class Dataset:
    """Training matrices for a fixed cell ordering (sorted by period, region)."""

    periods: list[dt.date]
    regions: list[str]
    inputs: np.ndarray
    volumes: np.ndarray
    targets: np.ndarray
    activations: np.ndarray

    def subset(self, mask: np.ndarray) -> "Dataset":
        idx = np.flatnonzero(mask)
        return Dataset([self.periods[i] for i in idx],
                       [self.regions[i] for i in idx],
                       self.inputs[idx], self.volumes[idx],
                       self.targets[idx], self.activations[idx])

    def date_mask(self, dates: Sequence[dt.date]) -> np.ndarray:
        wanted = set(dates)
        return np.array([p in wanted for p in self.periods])

    def __len__(self) -> int:
        return self.inputs.shape[0]


def build_dataset(config: ModelConfig,
                  embeddings: Mapping[Key, SearchEmbedding],
                  targets: Mapping[tuple[dt.date, str], float]) -> Dataset:
    """Join targets with their embeddings into model-ready matrices.

    Every target must have a matching embedding cell.  Degenerate cells are
    dropped under the skip policy and kept as zero-input rows under zero.
    """
    by_cell: dict[tuple[dt.date, str], SearchEmbedding] = {}
    for key, emb in embeddings.items():
        cell = (key[0], key[1])
        if cell in by_cell:
            raise ConfigError(
                f"multiple embeddings for {cell}: restrict to one category")
        by_cell[cell] = emb
    missing = [cell for cell in targets if cell not in by_cell]
    if missing:
        raise ConfigError(f"{len(missing)} targets without embeddings, "
                          f"first: {missing[0]}")
    periods, regions, rows, volumes, ys = [], [], [], [], []
    for cell in sorted(targets):
        emb = by_cell[cell]
        if emb.degenerate and config.degenerate_policy == "skip":
            continue
        periods.append(cell[0])
        regions.append(cell[1])
        rows.append(build_input(config, emb.unit_vector,
                                cell[1] if config.region_in_net else None))
        volumes.append(emb.volume)
        ys.append(targets[cell])
    if not rows:
        raise ConfigError("no usable cells after degenerate filtering")
    return Dataset(periods, regions, np.stack(rows),
                   np.asarray(volumes, dtype=np.float64),
                   np.asarray(ys, dtype=np.float64),
                   activation_matrix(config, periods, regions))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def mape(y: np.ndarray, yhat: np.ndarray) -> float:
    """Mean absolute percentage error, in percent."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if np.any(y == 0):
        raise ConfigError("MAPE undefined for zero targets")
    return float(100.0 * np.mean(np.abs(y - yhat) / np.abs(y)))


def pearson_r(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2:
        raise ConfigError("need at least two points for a correlation")
    da = a - a.mean()
    db = b - b.mean()
    denom = math.sqrt(float((da * da).sum()) * float((db * db).sum()))
    if denom == 0:
        raise ConfigError("constant series has no correlation")
    return float((da * db).sum() / denom)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class TrainState:
    params: Params
    adam_m: Params
    adam_v: Params
    step: int = 0
    best_val_loss: float = math.inf
    best_params: Optional[Params] = None
    best_step: int = -1
    stall: int = 0


@dataclasses.dataclass
class HistoryRow:
    step: int
    lr: float
    train_loss: float
    val_loss: float


@dataclasses.dataclass
class TrainResult:
    model: NowcastModel
    history: list[HistoryRow]
    best_step: int
    best_val_loss: float
    stopped: str                   # "patience" or "max_steps"


def _clone(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def _zeros_like(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def _global_norm(grads: Params) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def _train_objective(params: Params, config: ModelConfig, data: Dataset,
                     lam: float, eps: float) -> tuple[float, Params]:
    cache = forward_pipeline(params, config, data.inputs, data.volumes,
                             data.activations)
    base, dyhat = _loss_wmape_grad(data.targets, cache.yhat, None, eps)
    grads = backward_pipeline(params, config, cache, data.activations, dyhat)
    if lam > 0:
        for name, value in params.items():
            if is_net_param(name):
                grads[name] = grads[name] + lam * np.sign(value)
        base = base + lam * l1_penalty(params)
    return base, grads


def evaluate_loss(params: Params, config: ModelConfig, data: Dataset,
                  eps: float = 1e-6) -> float:
    cache = forward_pipeline(params, config, data.inputs, data.volumes,
                             data.activations)
    loss, _ = _loss_wmape_grad(data.targets, cache.yhat, None, eps)
    return loss


def train_full_batch(model: NowcastModel,
                     embeddings: Mapping[Key, SearchEmbedding],
                     targets: Mapping[tuple[dt.date, str], float],
                     split: SplitSpec,
                     cfg: OptimizerConfig,
                     seed: int) -> TrainResult:
    """Fit the model on all training cells at once; returns the snapshot
    with the lowest validation loss."""
    data = build_dataset(model.config, embeddings, targets)
    train_dates, val_dates, _ = split_dates(data.periods, split)
    train_data = data.subset(data.date_mask(train_dates))
    val_data = data.subset(data.date_mask(val_dates))
    if len(val_data) == 0:
        raise ConfigError("validation split is empty")

    state = TrainState(_clone(model.params), _zeros_like(model.params),
                       _zeros_like(model.params))
    history: list[HistoryRow] = []
    stopped = "max_steps"
    for step in range(cfg.max_steps):
        loss, grads = _train_objective(state.params, model.config, train_data,
                                       cfg.l1_lambda, cfg.loss_epsilon)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite training loss at step {step}")
        if cfg.noise_scale > 0:
            noise_std = cfg.noise_scale / (1.0 + step) ** cfg.noise_decay
            noise_rng = keyed_rng("grad-noise", seed, step)
            for name in sorted(grads):
                grads[name] = grads[name] + noise_rng.standard_normal(
                    grads[name].shape) * noise_std
        norm = _global_norm(grads)
        if not math.isfinite(norm):
            raise DivergenceError(f"non-finite gradient at step {step}")
        if norm > cfg.clip_norm:
            scale = cfg.clip_norm / norm
            for name in grads:
                grads[name] = grads[name] * scale
        lr = lr_at(step, cfg)
        t = step + 1
        for name, grad in grads.items():
            state.adam_m[name] = ADAM_BETA1 * state.adam_m[name] + \
                (1 - ADAM_BETA1) * grad
            state.adam_v[name] = ADAM_BETA2 * state.adam_v[name] + \
                (1 - ADAM_BETA2) * grad * grad
            m_hat = state.adam_m[name] / (1 - ADAM_BETA1 ** t)
            v_hat = state.adam_v[name] / (1 - ADAM_BETA2 ** t)
            state.params[name] = state.params[name] - \
                lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        state.step = t

        val_loss = evaluate_loss(state.params, model.config, val_data,
                                 cfg.loss_epsilon)
        if not math.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at step {step}")
        history.append(HistoryRow(step, lr, loss, val_loss))
        if val_loss < state.best_val_loss:
            state.best_val_loss = val_loss
            state.best_params = _clone(state.params)
            state.best_step = step
            state.stall = 0
        else:
            state.stall += 1
            if state.stall > cfg.patience:
                stopped = "patience"
                break

    best = state.best_params if state.best_params is not None else state.params
    fitted = NowcastModel(model.config, best, model.provider_fingerprint)
    return TrainResult(fitted, history, state.best_step,
                       state.best_val_loss, stopped)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class GradCheckReport:
    max_error: float
    per_block: dict[str, float]
    failures: list[str]
    tolerance: float

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(model: NowcastModel, data: Dataset, tolerance: float = 1e-4,
               samples_per_block: int = 8, seed: int = 0,
               l1_lambda: float = 0.0, eps: float = 1e-6,
               h: float = 1e-5, grad_fn=None) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Samples coordinates from every parameter block; the relative error uses
    max(1, |analytic|, |numeric|) as the denominator.  `grad_fn` exists for
    fault injection in tests: it replaces the analytic gradient computation.
    """
    params = _clone(model.params)
    config = model.config

    def objective(p: Params) -> float:
        cache = forward_pipeline(p, config, data.inputs, data.volumes,
                                 data.activations)
        base, _ = _loss_wmape_grad(data.targets, cache.yhat, None, eps)
        if l1_lambda > 0:
            base = base + l1_lambda * l1_penalty(p)
        return base

    if grad_fn is None:
        _, analytic = _train_objective(params, config, data, l1_lambda, eps)
    else:
        analytic = grad_fn(params)

    rng = keyed_rng("grad-check", seed)
    per_block: dict[str, float] = {}
    failures: list[str] = []
    for name in sorted(params):
        size = params[name].size
        picks = rng.choice(size, size=min(samples_per_block, size),
                           replace=False)
        worst = 0.0
        for flat_idx in np.atleast_1d(picks):
            flat = params[name].reshape(-1)
            original = flat[flat_idx]
            flat[flat_idx] = original + h
            up = objective(params)
            flat[flat_idx] = original - h
            down = objective(params)
            flat[flat_idx] = original
            numeric = (up - down) / (2 * h)
            a = float(np.asarray(analytic[name]).reshape(-1)[flat_idx])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
        per_block[name] = worst
        if worst > tolerance:
            failures.append(name)
    return GradCheckReport(max(per_block.values()), per_block, failures,
                           tolerance)


# ---------------------------------------------------------------------------
# Seed trials and grid search
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class TrialMetrics:
    seed: int
    val_loss: float
    val_mape: float
    test_mape: float
    val_r: float
    test_r: float
    best_step: int


@dataclasses.dataclass
class GridPointResult:
    point: dict
    trials: list[TrialMetrics]

    def mean(self, field: str) -> float:
        return float(np.mean([getattr(t, field) for t in self.trials]))

    def std(self, field: str) -> float:
        return float(np.std([getattr(t, field) for t in self.trials]))


_MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)}
_OPT_FIELDS = {f.name for f in dataclasses.fields(OptimizerConfig)}


def apply_grid_point(model_config: ModelConfig, opt_config: OptimizerConfig,
                     point: Mapping[str, object]) -> tuple[ModelConfig, OptimizerConfig]:
    model_over = {k: v for k, v in point.items() if k in _MODEL_FIELDS}
    opt_over = {k: v for k, v in point.items() if k in _OPT_FIELDS}
    unknown = set(point) - set(model_over) - set(opt_over)
    if unknown:
        raise ConfigError(f"unknown grid parameters: {sorted(unknown)}")
    if model_over:
        model_config = dataclasses.replace(model_config, **model_over)
    if opt_over:
        opt_config = dataclasses.replace(opt_config, **opt_over)
    return model_config, opt_config


def run_trial(model_config: ModelConfig, opt_config: OptimizerConfig,
              embeddings, targets, split: SplitSpec, seed: int,
              provider_fingerprint: str = "") -> tuple[TrialMetrics, TrainResult]:
    model = new_model(model_config, seed, provider_fingerprint)
    result = train_full_batch(model, embeddings, targets, split, opt_config, seed)
    data = build_dataset(model_config, embeddings, targets)
    _, val_dates, test_dates = split_dates(data.periods, split)
    metrics = {}
    for label, dates in (("val", val_dates), ("test", test_dates)):
        part = data.subset(data.date_mask(dates))
        if len(part) == 0:
            metrics[f"{label}_mape"] = math.nan
            metrics[f"{label}_r"] = math.nan
            continue
        cache = forward_pipeline(result.model.params, model_config, part.inputs,
                                 part.volumes, part.activations)
        metrics[f"{label}_mape"] = mape(part.targets, cache.yhat)
        metrics[f"{label}_r"] = pearson_r(part.targets, cache.yhat)
    trial = TrialMetrics(seed, result.best_val_loss, metrics["val_mape"],
                         metrics["test_mape"], metrics["val_r"],
                         metrics["test_r"], result.best_step)
    return trial, result


def grid_search(model_config: ModelConfig, opt_config: OptimizerConfig,
                grid: Mapping[str, Sequence], embeddings, targets,
                split: SplitSpec, trials: int = 5, base_seed: int = 0,
                provider_fingerprint: str = "") -> list[GridPointResult]:
    """Evaluate every grid point over `trials` seeds; results are ranked by
    mean validation loss (best first)."""
    if not grid:
        raise ConfigError("empty hyperparameter grid")
    for name, values in grid.items():
        if not values:
            raise ConfigError(f"grid parameter {name!r} has no values")
    names = sorted(grid)
    points = [dict(zip(names, combo))
              for combo in itertools.product(*(grid[n] for n in names))]
    seeds = [base_seed + i for i in range(trials)]

    def run_point(point: dict) -> GridPointResult:
        m_cfg, o_cfg = apply_grid_point(model_config, opt_config, point)
        trial_rows = [run_trial(m_cfg, o_cfg, embeddings, targets, split, s,
                                provider_fingerprint)[0] for s in seeds]
        return GridPointResult(point, trial_rows)

    workers = min(worker_count(), len(points))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_point, points))
    else:
        results = [run_point(p) for p in points]
    results.sort(key=lambda r: r.mean("val_loss"))
    return results


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def write_history(path: str, history: list[HistoryRow]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("step\tlr\ttrain_loss\tval_loss\n")
        for row in history:
            handle.write(f"{row.step}\t{fmt_float(row.lr)}\t"
                         f"{fmt_float(row.train_loss)}\t"
                         f"{fmt_float(row.val_loss)}\n")


def write_metrics(path: str, metrics: Mapping[str, float]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("metric\tvalue\n")
        for name in sorted(metrics):
            handle.write(f"{name}\t{fmt_float(metrics[name])}\n")


def read_targets(path: str) -> dict[tuple[dt.date, str], float]:
    """Targets TSV: ``period<TAB>region<TAB>value`` with a header row."""
    out: dict[tuple[dt.date, str], float] = {}
    with open(path, "r", encoding="utf-8") as handle:
        for row_no, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            if row_no == 1 and line.startswith("period"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"{path} row {row_no}: expected 3 columns")
            out[(dt.date.fromisoformat(parts[0]), parts[1])] = float(parts[2])
    return out


def write_targets(path: str, targets: Mapping[tuple[dt.date, str], float]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("period\tregion\tvalue\n")
        for (period, region) in sorted(targets):
            handle.write(f"{period.isoformat()}\t{region}\t"
                         f"{fmt_float(targets[(period, region)])}\n")
