from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdquake.detectors import (
    Detector,
    DetectorConfig,
    DomainError,
    WindowState,
    delta_hat_from_rates,
    detect_offline,
    glr_delta_hat,
    glr_from_rates,
    glr_statistic,
    score_approx,
    score_exact,
    score_sup,
    window_count,
    window_counts,
)
from crowdquake.intensity import IntensityModel

MODEL = IntensityModel(beta0=-3.3, beta1=0.0016)


def test_score_approx_values_and_domain():
    assert score_approx(10, 30, 0.1) == pytest.approx(10 / 3 - 1)
    assert score_approx(0, 30, 0.1) == -1
    with pytest.raises(DomainError):
        score_approx(1, 30, 0.0)
    with pytest.raises(DomainError):
        score_approx(1, 0, 0.1)


def test_window_is_half_open():
    ws = WindowState(60)
    for t in (0, 10_000, 30_000):
        ws.push(t, 1.0)
    # (30000 - 30000, 30000] excludes t=0
    assert window_count(ws, 30_000, 30) == 2
    assert window_counts(np.array([0, 10_000, 30_000]), 30).tolist() == [1, 2, 2]


def test_window_counts_with_ties_follow_stream_order():
    times = np.array([5, 5, 5, 7])
    assert window_counts(times, 1).tolist() == [1, 2, 3, 4]


def test_delta_hat_known_root():
    # two arrivals with eps*lambda = 0.5: 2/(0.5 + D) = 1 -> D = 1.5
    assert delta_hat_from_rates([0.05, 0.05], 10) == pytest.approx(1.5, abs=1e-12)
    assert glr_delta_hat([1, 2], 10, 0.05) == pytest.approx(1.5, abs=1e-12)
    # a sparse window gives zero bump
    assert delta_hat_from_rates([1.0], 10) == 0.0
    assert delta_hat_from_rates([], 10) == 0.0


def test_glr_value_known():
    g, d = glr_from_rates([0.05, 0.05], 10)
    assert d == pytest.approx(1.5)
    assert g == pytest.approx(2 * math.log(4) - 1.5, rel=1e-12)


rates = st.floats(0.01, 5.0)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 60), st.floats(1.0, 60.0), rates)
def test_constant_rate_identities(n, eps, lam):
    arrivals = list(range(n))
    assert abs(score_exact(arrivals, eps, lam) - score_approx(n, eps, lam)) <= 1e-12 * max(1, n / (eps * lam))
    d = glr_delta_hat(arrivals, eps, lam)
    assert abs(d - max(0.0, n - eps * lam)) <= 1e-10 * max(1.0, n)
    assert (glr_statistic(arrivals, eps, lam) == 0.0) == (d == 0.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(rates, min_size=1, max_size=40), st.floats(1.0, 60.0))
def test_delta_hat_solves_likelihood_equation(rs, eps):
    d = delta_hat_from_rates(rs, eps)
    assert d >= 0
    total = math.fsum(1 / (eps * r + d) for r in rs)
    if d > 0:
        assert total == pytest.approx(1.0, abs=1e-9)
    else:
        assert total <= 1.0 + 1e-12
    g, _ = glr_from_rates(rs, eps)
    assert g >= 0


def test_score_sup_prefers_smallest_epsilon_on_ties():
    ws = WindowState(40)
    ws.push(1000, 0.1)
    # with one arrival and equal rates, 1/(eps*0.1) - 1 is largest at eps=5
    value, eps = score_sup(ws, 1000, (5, 10, 20))
    assert eps == 5 and value == pytest.approx(1.0)
    ws2 = WindowState(40)
    value, eps = score_sup(ws2, 1000, (5, 10, 20))
    assert eps == 5 and value == -1.0


def test_detector_refractory_period():
    cfg = DetectorConfig(epsilon_seconds=10, threshold_h=2.0, refractory_seconds=300)
    det = Detector(MODEL, cfg)
    fired = []
    burst = lambda start: [start + 100 * k for k in range(20)]  # noqa: E731
    for t in burst(1_000_000) + burst(1_100_000) + burst(1_400_000):
        if det.step(t, 100).alarm:
            fired.append(t)
    assert fired == [1_000_000 + 100 * min(k for k in range(20) if (k + 1) / (10 * MODEL.rate(100)) - 1 > 2),
                     1_400_000 + 100 * min(k for k in range(20) if (k + 1) / (10 * MODEL.rate(100)) - 1 > 2)]


def test_detector_config_validation():
    with pytest.raises(ValueError):
        DetectorConfig(statistic="bogus")
    with pytest.raises(ValueError):
        DetectorConfig(epsilon_seconds=0)


@pytest.mark.parametrize("statistic", ["score", "score_exact", "glr", "score_sup", "glr_sup"])
def test_offline_equals_streaming(statistic):
    rng = np.random.default_rng(4)
    times = np.sort(rng.integers(0, 3_600_000, 600)).astype(np.int64)
    times = np.concatenate([times, 1_800_000 + np.sort(rng.integers(0, 5_000, 30))])
    times.sort()
    nus = rng.integers(50, 400, len(times)).astype(np.int64)
    h = 1.5 if statistic.startswith("glr") else 4.0
    cfg = DetectorConfig(epsilon_seconds=20, threshold_h=h, statistic=statistic)
    offline = detect_offline(times, nus, MODEL, cfg)
    det = Detector(MODEL, cfg)
    online = [(t, o.statistic_value) for t, nu in zip(times.tolist(), nus.tolist()) if (o := det.step(t, nu)).alarm]
    assert [(a.t_star, a.statistic) for a in offline] == online
    assert offline  # the burst must trigger


def test_offline_eval_from_keeps_refractory_history():
    times = np.array([0, 1, 2, 3, 4, 100_000, 100_001, 100_002, 100_003, 100_004], np.int64)
    nus = np.full(len(times), 100, np.int64)
    cfg = DetectorConfig(epsilon_seconds=5, threshold_h=3.0, refractory_seconds=300)
    assert len(detect_offline(times, nus, MODEL, cfg)) == 1
    # the early alarm is hidden but still blocks the second burst
    assert detect_offline(times, nus, MODEL, cfg, eval_from=50_000) == []
