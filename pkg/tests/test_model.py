import datetime as dt
import itertools
import math

import numpy as np
import pytest

from slamc.compress import SearchEmbedding
from slamc.errors import ConfigError, UnknownRegion
from slamc.model import (ModelConfig, active_multiplier_keys,
                         aggregate_score_closed_form,
                         constrained_linear_prob,
                         constrained_linear_prob_many, multiplier_keys,
                         new_model, parameter_count, predict, prob_forward,
                         rollup, sigmoid)
from slamc.util import keyed_rng

DAY = dt.date(2023, 5, 15)   # a Monday


def unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def zeroed(model):
    for name in model.params:
        model.params[name][...] = 0.0
    return model


def embedding(vector, volume, region="R0", degenerate=False):
    raw = np.asarray(vector, dtype=np.float64) * volume
    return SearchEmbedding((DAY, region, "all"), raw,
                           np.asarray(vector, dtype=np.float64),
                           volume, degenerate=degenerate)


def test_zero_parameters_give_half():
    cfg = ModelConfig(dim=8, regions=("R0",), layers=3, hidden=16)
    model = zeroed(new_model(cfg, seed=0))
    x = unit(keyed_rng("t1"), 8)
    assert prob_forward(x, model) == 0.5


def test_zero_embedding_zero_parameters_give_half():
    cfg = ModelConfig(dim=8, regions=("R0",), layers=1, hidden=4)
    model = zeroed(new_model(cfg, seed=0))
    assert prob_forward(np.zeros(8), model) == 0.5


def test_forward_golden_value():
    # frozen from the first verified run of this configuration
    cfg = ModelConfig(dim=8, regions=("A", "B"), layers=2, hidden=16,
                      region_in_net=True, region_multipliers=True)
    model = new_model(cfg, seed=42)
    x = keyed_rng("golden-input").standard_normal(8)
    x /= np.linalg.norm(x)
    p = prob_forward(x, model, region="B")
    assert float(p).hex() == "0x1.07bd266939173p-1"


def test_forward_reproducible_bitwise():
    cfg = ModelConfig(dim=16, regions=("R0",), layers=2, hidden=8)
    x = unit(keyed_rng("t2"), 16)
    a = prob_forward(x, new_model(cfg, seed=7))
    b = prob_forward(x, new_model(cfg, seed=7))
    assert float(a).hex() == float(b).hex()


def test_output_strictly_inside_unit_interval():
    cfg = ModelConfig(dim=8, regions=("R0",), layers=2, hidden=16)
    rng = keyed_rng("t3")
    for seed in range(50):
        model = new_model(cfg, seed=seed)
        p = prob_forward(unit(rng, 8), model)
        assert 0.0 < p < 1.0


def test_unknown_region_raises():
    cfg = ModelConfig(dim=4, regions=("A",), region_in_net=True)
    model = new_model(cfg, seed=0)
    with pytest.raises(UnknownRegion):
        prob_forward(unit(keyed_rng("t4"), 4), model, region="Z")


def test_region_required_when_conditioned():
    cfg = ModelConfig(dim=4, regions=("A",), region_in_net=True)
    model = new_model(cfg, seed=0)
    with pytest.raises(ConfigError):
        prob_forward(unit(keyed_rng("t5"), 4), model, region=None)


def test_predict_identity_psi_product():
    # p = 0.5 via zero parameters, all multipliers 1: yhat = V * 0.5
    cfg = ModelConfig(dim=4, regions=("R0",), region_multipliers=True)
    model = zeroed(new_model(cfg, seed=0))
    emb = embedding(unit(keyed_rng("t6"), 4), volume=100)
    assert predict(model, emb) == 50.0


def test_predict_constant_one_with_multiplier():
    # psi maps everything to 1; p = 0.3 via the head bias; region multiplier 2
    cfg = ModelConfig(dim=4, regions=("R0",), psi="constant_one",
                      region_multipliers=True)
    model = zeroed(new_model(cfg, seed=0))
    model.params["head_b"][...] = math.log(0.3 / 0.7)
    keys = multiplier_keys(cfg)
    model.params["log_mult"][keys.index("region:R0")] = math.log(2.0)
    emb = embedding(unit(keyed_rng("t7"), 4), volume=12345)
    assert abs(predict(model, emb) - 0.6) < 1e-12


def test_predict_degenerate_is_zero():
    cfg = ModelConfig(dim=4, regions=("R0",))
    model = new_model(cfg, seed=0)
    emb = embedding(np.zeros(4), volume=0, degenerate=True)
    assert predict(model, emb) == 0.0


def test_count_scale_invariance_of_prediction():
    cfg = ModelConfig(dim=6, regions=("R0",), region_multipliers=True)
    model = new_model(cfg, seed=3)
    vec = unit(keyed_rng("t8"), 6)
    base = predict(model, embedding(vec, volume=100))
    scaled = predict(model, embedding(vec, volume=700))
    assert abs(scaled - 7.0 * base) < 1e-9 * abs(base)


def test_multiplier_neutrality():
    # disabling multipliers equals keeping them all at exactly 1
    vec = unit(keyed_rng("t9"), 6)
    cfg_off = ModelConfig(dim=6, regions=("R0",), region_multipliers=False)
    cfg_on = ModelConfig(dim=6, regions=("R0",), region_multipliers=True,
                         calendar_features=("day_of_week",))
    off = new_model(cfg_off, seed=5)
    on = new_model(cfg_on, seed=5)
    for name, value in off.params.items():
        on.params[name] = value.copy()
    assert "log_mult" in on.params
    assert np.all(on.params["log_mult"] == 0.0)
    emb = embedding(vec, volume=250)
    assert predict(off, emb) == predict(on, emb)


def test_calendar_multiplier_keys():
    cfg = ModelConfig(dim=4, regions=("A", "B"), region_multipliers=True,
                      calendar_features=("day_of_week", "week_of_month"))
    keys = multiplier_keys(cfg)
    assert keys[:2] == ["region:A", "region:B"]
    assert "dow:0" in keys and "wom:3" in keys
    active = active_multiplier_keys(cfg, DAY, "B")
    assert active == ["region:B", "dow:0", "wom:3"]


def test_rollup_examples():
    assert rollup({"A": 1.5, "B": 2.5}) == 4.0
    assert rollup({"only": 3.25}) == 3.25


def test_rollup_matches_sorted_sum_oracle():
    rng = keyed_rng("t10")
    values = {f"R{i:02d}": float(rng.normal(10, 3)) for i in range(50)}
    oracle = math.fsum(values[k] for k in sorted(values))
    assert abs(rollup(values) - oracle) < 1e-12


def test_constrained_linear_prob_cosine_cases():
    rng = keyed_rng("t11")
    alpha = unit(rng, 8)
    assert constrained_linear_prob(alpha, alpha) == pytest.approx(1.0, abs=1e-12)
    assert constrained_linear_prob(-alpha, alpha) == pytest.approx(0.0, abs=1e-12)
    perp = unit(rng, 8)
    perp -= (perp @ alpha) * alpha
    perp /= np.linalg.norm(perp)
    assert constrained_linear_prob(perp, alpha) == pytest.approx(0.5, abs=1e-12)


def test_constrained_linear_prob_requires_unit_inputs():
    with pytest.raises(ConfigError):
        constrained_linear_prob(np.array([2.0, 0.0]), np.array([1.0, 0.0]))


def test_precompute_identity_small():
    # per-term brute force equals the closed form in (V, gamma)
    rng = keyed_rng("t12")
    d, n = 16, 400
    alpha = unit(rng, d)
    vectors = rng.standard_normal((n, d))
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    counts = rng.integers(0, 100, size=n).astype(np.float64)
    brute = math.fsum(float(c) * constrained_linear_prob(e, alpha)
                      for c, e in zip(counts, vectors))
    gamma = (counts[:, None] * vectors).sum(axis=0)
    closed = aggregate_score_closed_form(counts.sum(), gamma, alpha)
    assert abs(brute - closed) <= 1e-9 * max(1.0, abs(closed))


def test_constrained_linear_prob_many_matches_scalar():
    rng = keyed_rng("t13")
    alpha = unit(rng, 8)
    mat = rng.standard_normal((20, 8))
    mat /= np.linalg.norm(mat, axis=1, keepdims=True)
    batch = constrained_linear_prob_many(mat, alpha)
    singles = [constrained_linear_prob(row, alpha) for row in mat]
    np.testing.assert_allclose(batch, singles, rtol=0, atol=1e-15)


def test_sigmoid_stability_extremes():
    z = np.array([-800.0, -40.0, 0.0, 40.0, 800.0])
    p = sigmoid(z)
    assert np.all(np.isfinite(p))
    assert p[2] == 0.5
    assert p[0] >= 0.0 and p[-1] <= 1.0


def test_ablation_grid_reachable_and_counts_distinct():
    regions = tuple(f"R{i}" for i in range(6))
    counts = {}
    configs = {}
    for mult, geo, vol in itertools.product((False, True), repeat=3):
        cfg = ModelConfig(dim=8, regions=regions, layers=1, hidden=16,
                          psi="identity" if vol else "constant_one",
                          region_in_net=geo, region_multipliers=mult)
        model = new_model(cfg, seed=0)
        configs[(mult, geo, vol)] = cfg
        counts.setdefault((mult, geo), parameter_count(model.params))
    # volume scaling carries no parameters, so distinctness is over the
    # four multiplier/conditioning combinations; psi is a config property
    assert len(set(counts.values())) == 4
    assert len({(c.region_multipliers, c.region_in_net, c.psi)
                for c in configs.values()}) == 8
