"""Constrained nowcasting model.

The prediction for one (period, region) cell factors into three parts:

    yhat = psi(V) * p(x, r) * prod_k M_k

* psi scales the cell's search volume V: either the identity or the
  constant-one map (which removes volume from the model entirely).
* p is a residual fully-connected network over the unit search embedding,
  optionally concatenated with a one-hot region vector.  Every layer's
  rectified output is added to a running state (not every other layer), and
  the head is a single unit under a sigmoid, so 0 < p < 1 for all inputs
  and parameters.  That bound caps the model's variance regardless of the
  parameter count.
* each multiplier M_k is a learned positive scalar, stored as the exponent
  of an unconstrained parameter, and participates only when its key matches
  the cell: its region code, or a calendar feature of the period
  (day-of-week, week-of-month).  Non-matching keys contribute 1.

A constrained linear scorer over unit vectors, f(e) = (beta + alpha.e)/2
with unit alpha and beta = 1, is provided as the analytic baseline; it is
bounded in [0, 1] by the cosine inequality and admits the closed-form
aggregate sum_s v_s f(e_s) = (V + alpha.gamma)/2, which is what justifies
precomputing embeddings once instead of touching per-term data every
training step.

The forward and backward passes are written out by hand (plain numpy) so
gradients can be audited against finite differences.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
from typing import Mapping, Optional, Sequence

import numpy as np

from .compress import SearchEmbedding
from .errors import ConfigError, UnknownRegion
from .util import day_of_week, keyed_rng, week_of_month

PSI_IDENTITY = "identity"
PSI_CONSTANT_ONE = "constant_one"

CALENDAR_FEATURES = ("day_of_week", "week_of_month")

Params = dict[str, np.ndarray]


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    """Architecture and conditioning flags.

    The three boolean-ish knobs (region_multipliers, region_in_net, psi)
    span the full ablation grid of regional model variants.
    """

    dim: int
    regions: tuple[str, ...]
    layers: int = 1
    hidden: int = 64
    psi: str = PSI_IDENTITY
    region_in_net: bool = False
    region_multipliers: bool = False
    calendar_features: tuple[str, ...] = ()
    degenerate_policy: str = "skip"   # training-time handling of zero cells

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError("embedding dimension must be positive")
        if self.layers < 0 or self.hidden < 1:
            raise ConfigError("layers must be >= 0 and hidden >= 1")
        if self.psi not in (PSI_IDENTITY, PSI_CONSTANT_ONE):
            raise ConfigError(f"unknown volume scaling mode {self.psi!r}")
        for feature in self.calendar_features:
            if feature not in CALENDAR_FEATURES:
                raise ConfigError(f"unknown calendar feature {feature!r}")
        if self.degenerate_policy not in ("skip", "zero"):
            raise ConfigError(f"unknown degenerate policy {self.degenerate_policy!r}")
        if not self.regions:
            raise ConfigError("region set is empty")
        object.__setattr__(self, "regions", tuple(sorted(self.regions)))
        object.__setattr__(self, "calendar_features",
                           tuple(self.calendar_features))

    @property
    def input_width(self) -> int:
        return self.dim + (len(self.regions) if self.region_in_net else 0)


def multiplier_keys(config: ModelConfig) -> list[str]:
    """Ordered multiplier key table implied by the configuration."""
    keys: list[str] = []
    if config.region_multipliers:
        keys.extend(f"region:{r}" for r in config.regions)
    for feature in config.calendar_features:
        if feature == "day_of_week":
            keys.extend(f"dow:{d}" for d in range(7))
        elif feature == "week_of_month":
            keys.extend(f"wom:{w}" for w in range(1, 6))
    return keys


def active_multiplier_keys(config: ModelConfig, period: dt.date,
                           region: str) -> list[str]:
    """Keys matching one cell; anything not returned multiplies by 1."""
    keys = []
    if config.region_multipliers and region in config.regions:
        keys.append(f"region:{region}")
    for feature in config.calendar_features:
        if feature == "day_of_week":
            keys.append(f"dow:{day_of_week(period)}")
        elif feature == "week_of_month":
            keys.append(f"wom:{week_of_month(period)}")
    return keys


def init_params(config: ModelConfig, seed: int) -> Params:
    """Symmetric scaled-uniform weights (bound 1/sqrt(fan-in)), zero biases,
    multipliers at exp(0) = 1."""
    rng = keyed_rng("init", seed)
    params: Params = {}

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    params["proj_w"] = uniform((config.input_width, config.hidden),
                               config.input_width)
    params["proj_b"] = np.zeros(config.hidden)
    for i in range(config.layers):
        params[f"block{i}_w"] = uniform((config.hidden, config.hidden),
                                        config.hidden)
        params[f"block{i}_b"] = np.zeros(config.hidden)
    params["head_w"] = uniform((config.hidden,), config.hidden)
    params["head_b"] = np.zeros(())
    n_mult = len(multiplier_keys(config))
    if n_mult:
        params["log_mult"] = np.zeros(n_mult)
    return params


NET_PARAM_PREFIXES = ("proj_", "block", "head_")


def is_net_param(name: str) -> bool:
    """True for probability-network parameters (the L1-regularized set);
    multipliers are excluded."""
    return name.startswith(NET_PARAM_PREFIXES)


def parameter_count(params: Params) -> int:
    return sum(int(np.size(v)) for v in params.values())


@dataclasses.dataclass
class NowcastModel:
    config: ModelConfig
    params: Params
    provider_fingerprint: str = ""

    @property
    def multiplier_keys(self) -> list[str]:
        return multiplier_keys(self.config)

    def multiplier_value(self, key: str) -> float:
        keys = self.multiplier_keys
        if key not in keys:
            raise ConfigError(f"no multiplier with key {key!r}")
        return float(np.exp(self.params["log_mult"][keys.index(key)]))


def new_model(config: ModelConfig, seed: int,
              provider_fingerprint: str = "") -> NowcastModel:
    return NowcastModel(config, init_params(config, seed), provider_fingerprint)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function, split on the sign of z."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclasses.dataclass
class NetCache:
    inputs: np.ndarray
    states: list[np.ndarray]       # running state before each block
    preacts: list[np.ndarray]      # block pre-activations (for the relu mask)
    final_state: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


def net_forward(params: Params, config: ModelConfig,
                inputs: np.ndarray) -> NetCache:
    """Probability network over input rows: projection, additive rectified
    blocks, sigmoid head."""
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if inputs.shape[1] != config.input_width:
        raise ConfigError(f"input width {inputs.shape[1]} != expected "
                          f"{config.input_width}")
    state = inputs @ params["proj_w"] + params["proj_b"]
    states, preacts = [], []
    for i in range(config.layers):
        states.append(state)
        pre = state @ params[f"block{i}_w"] + params[f"block{i}_b"]
        preacts.append(pre)
        state = state + np.maximum(pre, 0.0)
    logits = state @ params["head_w"] + params["head_b"]
    return NetCache(inputs, states, preacts, state, logits, sigmoid(logits))


def net_backward(params: Params, config: ModelConfig, cache: NetCache,
                 dprob: np.ndarray) -> Params:
    """Gradients of sum(dprob * p) with respect to the network parameters.

    Rectifier subgradient at exactly zero is taken as zero, matching the
    forward mask.
    """
    grads: Params = {}
    dlogit = dprob * cache.probs * (1.0 - cache.probs)
    grads["head_w"] = cache.final_state.T @ dlogit
    grads["head_b"] = np.asarray(dlogit.sum())
    dstate = dlogit[:, None] * params["head_w"][None, :]
    for i in reversed(range(config.layers)):
        mask = cache.preacts[i] > 0.0
        dpre = dstate * mask
        grads[f"block{i}_w"] = cache.states[i].T @ dpre
        grads[f"block{i}_b"] = dpre.sum(axis=0)
        dstate = dstate + dpre @ params[f"block{i}_w"].T
    grads["proj_w"] = cache.inputs.T @ dstate
    grads["proj_b"] = dstate.sum(axis=0)
    return grads


def region_onehot(config: ModelConfig, region: str) -> np.ndarray:
    if region not in config.regions:
        raise UnknownRegion(f"region {region!r} not in model regions")
    vec = np.zeros(len(config.regions))
    vec[config.regions.index(region)] = 1.0
    return vec


def build_input(config: ModelConfig, unit_vector: np.ndarray,
                region: Optional[str]) -> np.ndarray:
    if not config.region_in_net:
        return np.asarray(unit_vector, dtype=np.float64)
    if region is None:
        raise ConfigError("region required: model conditions the "
                          "probability network on it")
    return np.concatenate([unit_vector, region_onehot(config, region)])


def prob_forward(unit_vector: np.ndarray, model: NowcastModel,
                 region: Optional[str] = None) -> float:
    """Probability-network score for one unit embedding, in (0, 1).

    The input must be unit norm (or all-zero, for degenerate cells)."""
    unit_vector = np.asarray(unit_vector, dtype=np.float64)
    norm = np.linalg.norm(unit_vector)
    if norm != 0.0 and abs(norm - 1.0) > 1e-9:
        raise ConfigError(f"expected a unit or zero vector, norm is {norm!r}")
    x = build_input(model.config, unit_vector, region)
    cache = net_forward(model.params, model.config, x[None, :])
    return float(cache.probs[0])


def psi_volume(config: ModelConfig, volume) -> np.ndarray:
    v = np.asarray(volume, dtype=np.float64)
    if config.psi == PSI_CONSTANT_ONE:
        return np.ones_like(v)
    return v


def activation_matrix(config: ModelConfig, periods: Sequence[dt.date],
                      regions: Sequence[str]) -> np.ndarray:
    """Cell-by-multiplier 0/1 matrix selecting the active keys per cell."""
    keys = multiplier_keys(config)
    index = {k: i for i, k in enumerate(keys)}
    act = np.zeros((len(periods), len(keys)))
    for n, (period, region) in enumerate(zip(periods, regions)):
        for key in active_multiplier_keys(config, period, region):
            act[n, index[key]] = 1.0
    return act


@dataclasses.dataclass
class ForwardCache:
    net: NetCache
    psi_v: np.ndarray
    log_product: np.ndarray
    product: np.ndarray
    yhat: np.ndarray


def forward_pipeline(params: Params, config: ModelConfig, inputs: np.ndarray,
                     volumes: np.ndarray, activations: np.ndarray) -> ForwardCache:
    """Batched yhat = psi(V) * p * prod(active multipliers)."""
    net = net_forward(params, config, inputs)
    psi_v = psi_volume(config, volumes)
    if "log_mult" in params and activations.shape[1]:
        log_product = activations @ params["log_mult"]
        product = np.exp(log_product)
    else:
        log_product = np.zeros(inputs.shape[0])
        product = np.ones(inputs.shape[0])
    yhat = psi_v * net.probs * product
    return ForwardCache(net, psi_v, log_product, product, yhat)


def backward_pipeline(params: Params, config: ModelConfig, cache: ForwardCache,
                      activations: np.ndarray, dyhat: np.ndarray) -> Params:
    """Gradients of sum(dyhat * yhat) for all parameters."""
    dprob = dyhat * cache.psi_v * cache.product
    grads = net_backward(params, config, cache.net, dprob)
    if "log_mult" in params:
        # d yhat / d log M_k = yhat on cells where k is active
        grads["log_mult"] = activations.T @ (dyhat * cache.yhat)
    return grads


def predict(model: NowcastModel, embedding: SearchEmbedding,
            period: Optional[dt.date] = None,
            region: Optional[str] = None) -> float:
    """Point prediction for one cell; degenerate embeddings predict 0."""
    period = period if period is not None else embedding.key[0]
    region = region if region is not None else embedding.key[1]
    if embedding.degenerate:
        return 0.0
    p = prob_forward(embedding.unit_vector, model,
                     region if model.config.region_in_net else None)
    value = float(psi_volume(model.config, embedding.volume)) * p
    for key in active_multiplier_keys(model.config, period, region):
        value *= model.multiplier_value(key)
    return value


def rollup(predictions: Mapping[str, float]) -> float:
    """Parent-level value: the sum of child-region predictions, reduced in
    sorted-key order for determinism."""
    return float(sum(predictions[r] for r in sorted(predictions)))


# ---------------------------------------------------------------------------
# Constrained linear baseline
# ---------------------------------------------------------------------------

def _check_unit(name: str, vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    if abs(np.linalg.norm(vec) - 1.0) > 1e-9:
        raise ConfigError(f"{name} must have unit norm")
    return vec


def constrained_linear_prob(e: np.ndarray, alpha: np.ndarray,
                            beta: float = 1.0) -> float:
    """(beta + e.alpha) / 2 for unit vectors; bounded in [0, 1] when beta=1.

    The result is clipped to [0, 1] only to absorb sub-epsilon rounding of
    the dot product; the mathematical value already lies inside.
    """
    e = _check_unit("e", e)
    alpha = _check_unit("alpha", alpha)
    return float(np.clip((beta + e @ alpha) / 2.0, 0.0, 1.0))


def constrained_linear_prob_many(vectors: np.ndarray,
                                 alpha: np.ndarray,
                                 beta: float = 1.0) -> np.ndarray:
    """Vectorized constrained_linear_prob over rows of unit vectors."""
    alpha = _check_unit("alpha", alpha)
    return np.clip((beta + vectors @ alpha) / 2.0, 0.0, 1.0)


def aggregate_score_closed_form(volume: float, raw_embedding: np.ndarray,
                                alpha: np.ndarray, beta: float = 1.0) -> float:
    """Closed form of sum_s v_s * f(e_s) in terms of (V, gamma): the identity
    that lets the per-term sum be precomputed into the embedding."""
    alpha = _check_unit("alpha", alpha)
    return float((beta * volume + alpha @ raw_embedding) / 2.0)
