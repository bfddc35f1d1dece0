from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from crowdquake.detectors import DetectorConfig
from crowdquake.intensity import DataError, IntensityModel
from crowdquake.threshold import (
    ONE_YEAR_SECONDS,
    BudgetError,
    CalibrationReport,
    FalseAlarmBudget,
    GpdFitWarning,
    GpdTailModel,
    calibrate,
    derive_threshold,
    fit_gpd,
    fit_gpd_exceedances,
    gpd_cdf,
    gpd_pwm,
    gpd_quantile,
    null_statistics,
)

from conftest import T0, make_list


@pytest.mark.parametrize("gap, p1", [(18.0, 0.99994), (38.2, 0.99988), (88.6, 0.99972)])
def test_table2_p1(gap, p1):
    b = FalseAlarmBudget(gap, ONE_YEAR_SECONDS, 0.99)
    assert abs(b.p1 - p1) < 1e-5
    assert b.alpha == pytest.approx(gap / ONE_YEAR_SECONDS)


def test_budget_outside_tail():
    with pytest.raises(BudgetError):
        FalseAlarmBudget(1.0, 50.0).validate()
    tail = GpdTailModel(0.99, 1.0, 0.0, 1.0, 100)
    with pytest.raises(BudgetError):
        derive_threshold(tail, FalseAlarmBudget(1.0, 50.0))


def test_exponential_tail_closed_form():
    tail = GpdTailModel(p0=0.99, u=3.0, xi=0.0, sigma=0.5, n_exceedances=100)
    budget = FalseAlarmBudget(6.0, 1e7, 0.99)  # alpha = 6e-7, p1 = 0.99994
    assert budget.p1 == pytest.approx(0.99994, abs=1e-15)
    # h is the p1 quantile of the exceedance distribution
    assert derive_threshold(tail, budget) == pytest.approx(3 - 0.5 * math.log(6e-5), rel=1e-12)
    # reading p1 as a level of the whole distribution instead
    assert derive_threshold(tail, budget, conditional=False) == pytest.approx(3 + 0.5 * math.log(0.01 / 6e-5), rel=1e-12)
    assert derive_threshold(tail, budget, conditional=False) == pytest.approx(5.558, abs=1e-3)


def test_threshold_hits_target_exceedance_probability():
    tail = GpdTailModel(0.99, 2.0, 0.15, 0.7, 500)
    budget = FalseAlarmBudget(20.0, 30 * 86400, 0.99)
    h = derive_threshold(tail, budget)
    p_exceed = (1 - tail.p0) * (1 - gpd_cdf(h - tail.u, tail.xi, tail.sigma))
    assert p_exceed == pytest.approx(budget.alpha, rel=1e-10)


@settings(max_examples=100, deadline=None)
@given(st.floats(-0.4, 0.8), st.floats(0.1, 3.0), st.floats(5.0, 60.0), st.floats(1e6, 1e8))
def test_h_monotone_in_budget(xi, sigma, gap, delta_t):
    tail = GpdTailModel(0.99, 1.0, xi, sigma, 100)
    h = derive_threshold(tail, FalseAlarmBudget(gap, delta_t))
    assert derive_threshold(tail, FalseAlarmBudget(gap, delta_t * 1.5)) > h
    assert derive_threshold(tail, FalseAlarmBudget(gap * 1.5, delta_t)) < h


@pytest.mark.parametrize("xi", [-0.3, 0.0, 1e-9, 0.2, 0.7])
def test_quantile_cdf_inverse(xi):
    q = np.array([0.5, 0.9, 0.999])
    np.testing.assert_allclose(gpd_cdf(gpd_quantile(q, xi, 1.3), xi, 1.3), q, atol=1e-12)


def test_exponential_exceedances_oracle():
    y = np.random.default_rng(0).exponential(0.5, 5000)
    tail = fit_gpd_exceedances(y)
    assert abs(tail.xi) < 0.1
    assert abs(tail.sigma / 0.5 - 1) < 0.1
    assert tail.method == "ml"


def test_gpd_recovery_within_three_se():
    y = stats.genpareto.rvs(0.2, scale=1.0, size=10_000, random_state=1)
    tail = fit_gpd_exceedances(y)
    assert abs(tail.xi - 0.2) < 3 * tail.se_xi
    assert abs(tail.sigma - 1.0) < 3 * tail.se_sigma


def test_ml_agrees_with_scipy():
    y = stats.genpareto.rvs(-0.1, scale=2.0, size=4000, random_state=2)
    tail = fit_gpd_exceedances(y)
    c, _, scale = stats.genpareto.fit(y, floc=0)
    assert tail.xi == pytest.approx(c, abs=2e-3)
    assert tail.sigma == pytest.approx(scale, rel=2e-3)


def test_pwm_reasonable():
    y = stats.genpareto.rvs(0.1, scale=1.0, size=20_000, random_state=3)
    xi, sigma = gpd_pwm(y)
    assert abs(xi - 0.1) < 0.05 and abs(sigma - 1) < 0.05


def test_fit_gpd_threshold_and_errors():
    values = np.random.default_rng(5).normal(size=10_000)
    tail = fit_gpd(values)
    assert tail.u == np.quantile(values, 0.99)
    assert tail.n_exceedances == int((values > tail.u).sum())
    with pytest.raises(DataError):
        fit_gpd(np.arange(100.0))  # one exceedance
    with pytest.raises(DataError):
        fit_gpd_exceedances(np.ones(50))
    with pytest.raises(DataError):
        fit_gpd_exceedances(-np.ones(50))


def test_ml_failure_falls_back_to_pwm(monkeypatch):
    from scipy import optimize

    class Bad:
        success, fun, message = False, math.inf, "forced"
        x = np.array([0.0, 0.0])

    monkeypatch.setattr(optimize, "minimize", lambda *a, **k: Bad())
    y = np.random.default_rng(0).exponential(1.0, 500)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        tail = fit_gpd_exceedances(y)
    assert tail.method == "pwm"
    assert any(issubclass(x.category, GpdFitWarning) for x in w)


def test_null_statistics_centered_on_homogeneous_stream():
    model = IntensityModel(beta0=math.log(0.2), beta1=0.0)
    rng = np.random.default_rng(6)
    span = 600_000_000
    times = np.sort(rng.integers(1, span, rng.poisson(0.2 * span / 1000)))
    sl = make_list(T0 + times, active=[(T0, "a")], t_frame=(T0, T0 + span))
    from crowdquake.core import NuTrack

    values = null_statistics(sl, model, DetectorConfig(epsilon_seconds=30), NuTrack.constant(1, T0))
    assert len(values) == len(times) > 100_000
    # evaluated at arrivals, N includes the arrival itself: E[N] = eps*lambda + 1
    assert abs(np.mean(values) - 1 / (30 * 0.2)) < 0.05


def test_continuity_correction_bounds(short_background):
    from crowdquake.simulator import SANTIAGO_MODEL

    cfg = DetectorConfig()
    raw = null_statistics(short_background, SANTIAGO_MODEL, cfg)
    cc = null_statistics(short_background, SANTIAGO_MODEL, cfg, continuity_seed=0)
    assert np.all(cc >= raw)
    step = cc - raw
    from crowdquake.core import NuTrack

    t = short_background.vibration_times()
    upper = 1 / (30 * SANTIAGO_MODEL.rates(NuTrack.from_signals(short_background)(t).astype(np.int64)))
    assert np.all(step < upper)
    np.testing.assert_array_equal(cc, null_statistics(short_background, SANTIAGO_MODEL, cfg, continuity_seed=0))


def test_calibration_report_roundtrip(short_background, tmp_path):
    from crowdquake.simulator import SANTIAGO_MODEL

    rep = calibrate(short_background, SANTIAGO_MODEL, epsilon=30, delta_T=30 * 86400)
    assert rep.p0 < rep.p1 < 1 and rep.h > rep.u
    rep.save(tmp_path / "c.json")
    back = CalibrationReport.load(tmp_path / "c.json")
    assert back == rep
    keys = {"p0", "u", "xi", "sigma", "n_exceedances", "mean_interarrival", "delta_T", "alpha", "p1", "h", "epsilon"}
    assert keys <= set(rep.to_dict())
