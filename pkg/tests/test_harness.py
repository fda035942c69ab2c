import csv
import json
import math

import numpy as np
import pytest

from dmoe import harness
from dmoe.em_fit import EmConfig
from dmoe.exceptions import FitFailureError, InsufficientDataError, InvalidConfigurationError, RegimeMismatchError
from dmoe.harness import (
    BUNDLED,
    Metric,
    RateStudyConfig,
    StudyAbortedError,
    check_regime,
    config_from_dict,
    fit_loglog_slope,
    load_bundled,
    load_config,
    rescore,
    run_rate_study,
    trial_seeds,
    worker_count,
)
from dmoe.model import measure_from_lists
from dmoe.voronoi_loss import Regime

G0 = measure_from_lists([0.5, 0.5], [[0.2, 0.1, 0.01], [0.1, 0.0, 0.01]])
GS = measure_from_lists([1.0], [[1.0, 1.0, 1.0]])


def tiny_config(**kw):
    base = dict(
        lam_star=0.5,
        G_star=GS,
        g0=G0,
        k=1,
        metric=Metric.D1,
        n_grid=(50, 100, 200),
        trials=2,
        em=EmConfig(k=1, restarts=1, max_iters=50, init="perturb_truth", truth=(0.5, GS)),
        seed=7,
    )
    base.update(kw)
    return RateStudyConfig(**base)


# -- slope fit ---------------------------------------------------------------

def test_slope_of_inverse_square_root():
    pts = [(n, n**-0.5) for n in (100, 200, 400, 800, 1600)]
    fit = fit_loglog_slope(pts)
    assert fit.slope == pytest.approx(-0.5, abs=1e-12)
    assert fit.ci95[0] == pytest.approx(-0.5, abs=1e-9) and fit.ci95[1] == pytest.approx(-0.5, abs=1e-9)


def test_slope_constant_and_intercept():
    assert fit_loglog_slope([(n, 0.2) for n in (10, 20, 40)]).slope == pytest.approx(0.0, abs=1e-12)
    fit = fit_loglog_slope([(n, 3.0 / n) for n in (10, 20, 40, 80)])
    assert fit.slope == pytest.approx(-1.0, abs=1e-12)
    assert fit.intercept == pytest.approx(math.log(3.0), abs=1e-12)


def test_slope_ci_against_textbook_formula():
    rng = np.random.default_rng(1)
    ns = np.array([100, 200, 400, 800, 1600])
    vals = ns**-0.5 * np.exp(0.1 * rng.standard_normal(5))
    fit = fit_loglog_slope(list(zip(ns, vals)))
    x, y = np.log(ns), np.log(vals)
    xc = x - x.mean()
    slope = (xc @ (y - y.mean())) / (xc @ xc)
    resid = y - y.mean() - slope * xc
    se = math.sqrt(resid @ resid / 3 / (xc @ xc))
    half = 3.182446305284263 * se  # t_{0.975, 3}
    assert fit.slope == pytest.approx(slope, rel=1e-12)
    assert fit.ci95 == pytest.approx((slope - half, slope + half), rel=1e-9)


def test_slope_drops_nonpositive_points():
    fit = fit_loglog_slope([(10, 0.0), (20, 0.5), (40, 0.25), (80, 0.125)])
    assert fit.excluded == [(10.0, 0.0)]
    assert fit.slope == pytest.approx(-1.0)
    with pytest.raises(InsufficientDataError):
        fit_loglog_slope([(10, 1.0), (20, 0.0), (40, 0.5)])


# -- configuration -----------------------------------------------------------

def test_config_validation():
    with pytest.raises(InvalidConfigurationError):
        tiny_config(n_grid=(100, 200))
    with pytest.raises(InvalidConfigurationError):
        tiny_config(n_grid=(100, 100, 200))
    with pytest.raises(InvalidConfigurationError):
        tiny_config(trials=0)
    with pytest.raises(InvalidConfigurationError):
        tiny_config(failure_budget=1.5)


def test_em_order_follows_study_k():
    cfg = tiny_config(k=2)
    assert cfg.em.k == 2


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_configs_load_and_match_regime(name):
    cfg = load_bundled(name)
    check_regime(cfg)
    assert cfg.trials == 20


def test_bundled_settings():
    d = load_bundled("distinguishable")
    assert d.n_grid == (100, 200, 400, 800, 1600) and d.metric is Metric.D1 and d.k == 2
    assert d.lam_star == 0.5 and d.G_star.allclose(GS) and d.g0.allclose(G0)
    nd = load_bundled("nondistinguishable")
    assert nd.k == 4 and nd.metric is Metric.D2
    assert check_regime(nd) is Regime.PARTIAL_OVERLAP
    assert load_bundled("distinguishable_short_grid").n_grid == tuple(range(100, 201, 10))


def test_regime_guard():
    with pytest.raises(RegimeMismatchError):
        check_regime(tiny_config(metric=Metric.D2))
    with pytest.raises(RegimeMismatchError):
        check_regime(tiny_config(metric=Metric.VANISHING_LAMBDA))
    with pytest.raises(RegimeMismatchError):
        run_rate_study(tiny_config(metric=Metric.D4))


def test_toml_round_trip(tmp_path):
    path = tmp_path / "s.toml"
    path.write_text(
        """
name = "mini"
[truth]
lambda = 0.5
weights = [1.0]
atoms = [[1.0, 1.0, 1.0]]
[g0]
weights = [0.5, 0.5]
atoms = [[0.2, 0.1, 0.01], [0.1, 0.0, 0.01]]
[fit]
k = 2
restarts = 2
[study]
metric = "D1"
n_grid = [100, 200, 400]
trials = 3
seed = 5
"""
    )
    cfg = load_config(path)
    assert cfg.name == "mini" and cfg.k == 2 and cfg.em.restarts == 2 and cfg.seed == 5
    assert cfg.em.init.value == "perturb_truth"


def test_toml_errors(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[truth\n")
    with pytest.raises(InvalidConfigurationError):
        load_config(path)
    with pytest.raises(InvalidConfigurationError):
        config_from_dict({"truth": {}, "g0": {}, "fit": {}})
    doc = {
        "truth": {"lambda": 0.5, "weights": [1.0], "atoms": [[1, 1, 1]]},
        "g0": {"weights": [1.0], "atoms": [[0, 0, 1]]},
        "fit": {"k": 1, "bogus": 3},
        "study": {"metric": "D1"},
    }
    with pytest.raises(InvalidConfigurationError):
        config_from_dict(doc)
    with pytest.raises(InvalidConfigurationError):
        load_bundled("missing")


# -- seeds and workers -------------------------------------------------------

def test_trial_seeds_are_distinct_and_stable():
    a = trial_seeds(1, 0, 0)
    b = trial_seeds(1, 0, 0)
    assert a[1] == b[1] and np.array_equal(a[0].generate_state(4), b[0].generate_state(4))
    seeds = {trial_seeds(1, i, t)[1] for i in range(5) for t in range(20)}
    assert len(seeds) == 100


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("DMOE_THREADS", "1")
    assert worker_count() == 1
    assert worker_count(8) == 1
    monkeypatch.setenv("DMOE_THREADS", "many")
    with pytest.raises(InvalidConfigurationError):
        worker_count()
    monkeypatch.delenv("DMOE_THREADS")
    assert worker_count(3) == 3


# -- running -----------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_result():
    return run_rate_study(tiny_config(), workers=1)


def test_study_result_shape(tiny_result):
    assert len(tiny_result.records) == 6
    assert [p.n for p in tiny_result.per_n] == [50, 100, 200]
    assert all(not r.failed for r in tiny_result.records)
    assert all(r.max_row_error <= 1e-12 for r in tiny_result.records)
    assert math.isfinite(tiny_result.slope)


def test_study_is_deterministic(tiny_result):
    again = run_rate_study(tiny_config(), workers=1)
    assert again.to_json(include_wall_time=False) == tiny_result.to_json(include_wall_time=False)


def test_study_parallel_matches_serial(tiny_result):
    par = run_rate_study(tiny_config(), workers=2)
    assert [r.metric_value for r in par.records] == [r.metric_value for r in tiny_result.records]


def test_seed_changes_results(tiny_result):
    other = run_rate_study(tiny_config(seed=8), workers=1)
    assert other.records[0].metric_value != tiny_result.records[0].metric_value


def test_outputs(tiny_result, tmp_path):
    doc = json.loads(tiny_result.to_json(tmp_path / "s.json"))
    assert {"config", "per_n", "slope", "ci95", "version", "wall_seconds"} <= set(doc)
    tiny_result.write_csv(tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["n", "trial", "metric_value", "lambda_hat", "converged"]
    assert len(rows) == 7
    tiny_result.write_per_n_csv(tmp_path / "p.csv")
    assert open(tmp_path / "p.csv").readline().strip() == "n,mean,stderr,excluded"


def test_rescore_keeps_fits(tiny_result):
    h = rescore(tiny_result, Metric.HELLINGER)
    assert h.config.metric is Metric.HELLINGER
    assert [r.lambda_hat for r in h.records] == [r.lambda_hat for r in tiny_result.records]
    assert all(0 < r.metric_value < 1 for r in h.records)


def test_failure_budget_aborts_with_partial(tmp_path, monkeypatch):
    def always_fail(*args, **kwargs):
        raise FitFailureError("all EM restarts degenerated", diagnostics=["forced"])

    monkeypatch.setattr(harness, "fit_mle", always_fail)
    partial = tmp_path / "partial.json"
    with pytest.raises(StudyAbortedError) as info:
        run_rate_study(tiny_config(failure_budget=0.0), workers=1, partial_path=partial)
    assert info.value.partial.aborted
    assert len(info.value.partial.records) == 1
    assert json.loads(partial.read_text())["aborted"] is True


def test_failures_within_budget_are_excluded(monkeypatch):
    real = harness.fit_mle
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 1:
            raise FitFailureError("forced", diagnostics=[])
        return real(*args, **kwargs)

    monkeypatch.setattr(harness, "fit_mle", flaky)
    res = run_rate_study(tiny_config(failure_budget=0.2), workers=1)
    assert sum(r.failed for r in res.records) == 1
    assert res.per_n[0].excluded == 1
