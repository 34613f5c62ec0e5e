import numpy as np
import pytest

from slamc.errors import ConfigError
from slamc.model import ModelConfig, new_model
from slamc.training import _train_objective
from slamc.util import (day_of_week, derive_key, fmt_float, keyed_rng,
                        parse_date, week_of_month, worker_count)


def test_derive_key_stable_and_distinct():
    assert derive_key("a", 1) == derive_key("a", 1)
    assert derive_key("a", 1) != derive_key("a", 2)
    assert derive_key("ab", "c") != derive_key("a", "bc")


def test_keyed_rng_reproducible():
    a = keyed_rng("x", 3).standard_normal(5)
    b = keyed_rng("x", 3).standard_normal(5)
    np.testing.assert_array_equal(a, b)


def test_parse_date():
    import datetime as dt
    assert parse_date(" 2023-05-01 ") == dt.date(2023, 5, 1)
    with pytest.raises(ConfigError):
        parse_date("yesterday")


def test_calendar_features():
    import datetime as dt
    assert day_of_week(dt.date(2023, 5, 15)) == 0   # a Monday
    assert week_of_month(dt.date(2023, 5, 1)) == 1
    assert week_of_month(dt.date(2023, 5, 8)) == 2
    assert week_of_month(dt.date(2023, 5, 31)) == 5


def test_fmt_float_roundtrip():
    values = [1 / 3, 1e-7, 123456.789, 2.0 ** -52]
    assert all(float(fmt_float(v)) == v for v in values)


def test_worker_count_env(monkeypatch):
    monkeypatch.delenv("SLAMC_THREADS", raising=False)
    assert worker_count() == 1
    monkeypatch.setenv("SLAMC_THREADS", "4")
    assert worker_count() == 4
    monkeypatch.setenv("SLAMC_THREADS", "0")
    assert worker_count() == 1
    monkeypatch.setenv("SLAMC_THREADS", "lots")
    with pytest.raises(ConfigError):
        worker_count()


def test_l1_subgradient_at_zero_is_zero():
    # a parameter sitting exactly at zero contributes no penalty gradient
    import datetime as dt
    from slamc.model import activation_matrix
    from slamc.training import Dataset
    cfg = ModelConfig(dim=4, regions=("A",), layers=1, hidden=6)
    model = new_model(cfg, seed=2)
    model.params["proj_w"][0, 0] = 0.0
    rng = keyed_rng("l1zero")
    n = 10
    X = rng.standard_normal((n, 4))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    periods = [dt.date(2023, 1, 1) + dt.timedelta(days=i) for i in range(n)]
    regions = ["A"] * n
    data = Dataset(periods, regions, X, np.full(n, 50.0),
                   np.abs(rng.normal(20, 5, n)) + 1,
                   activation_matrix(cfg, periods, regions))
    _, plain = _train_objective(model.params, cfg, data, 0.0, 1e-6)
    _, reg = _train_objective(model.params, cfg, data, 3.0, 1e-6)
    penalty_grad = reg["proj_w"] - plain["proj_w"]
    assert penalty_grad[0, 0] == 0.0
    nonzero = model.params["proj_w"] != 0.0
    np.testing.assert_allclose(
        penalty_grad[nonzero], 3.0 * np.sign(model.params["proj_w"][nonzero]))
