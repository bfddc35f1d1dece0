"""Sliding-window burst statistics on the vibration stream.

The window ``(t - eps, t]`` is half-open. Every statistic is evaluated at
vibration arrivals only.
"""

from __future__ import annotations

import bisect
import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .intensity import IntensityModel

DEFAULT_EPSILON = 30.0
DEFAULT_GRID = (5.0, 10.0, 20.0, 30.0, 40.0)
DEFAULT_REFRACTORY = 300.0
STATISTICS = ("score", "score_exact", "score_sup", "glr", "glr_sup")

RateSource = Callable[[np.ndarray], np.ndarray] | float


class DomainError(ValueError):
    pass


class NumericError(RuntimeError):
    def __init__(self, message: str, trace: list | None = None):
        super().__init__(message)
        self.trace = trace or []


def to_ms(seconds: float) -> int:
    return int(round(seconds * 1000))


@dataclass(frozen=True)
class DetectorConfig:
    epsilon_seconds: float = DEFAULT_EPSILON
    threshold_h: float = math.inf
    epsilon_grid: tuple[float, ...] = DEFAULT_GRID
    statistic: str = "score"
    refractory_seconds: float = DEFAULT_REFRACTORY

    def __post_init__(self):
        if self.epsilon_seconds <= 0:
            raise ValueError("epsilon must be positive")
        grid = tuple(float(e) for e in self.epsilon_grid)
        if not grid or any(e <= 0 for e in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("epsilon grid must be nonempty, positive and strictly increasing")
        object.__setattr__(self, "epsilon_grid", grid)
        if self.statistic not in STATISTICS:
            raise ValueError(f"unknown statistic {self.statistic!r}; choose from {STATISTICS}")
        if self.refractory_seconds < 0:
            raise ValueError("refractory period must be nonnegative")

    @property
    def horizon_seconds(self) -> float:
        if self.statistic.endswith("_sup"):
            return max(self.epsilon_grid)
        return self.epsilon_seconds


@dataclass
class DetectionOutcome:
    alarm: bool
    t_star: int | None
    statistic_value: float
    window_count: int
    nu_at_alarm: int
    epsilon: float


class WindowState:
    """Recent arrivals, with the background rate each one was observed at."""

    def __init__(self, horizon_seconds: float):
        self.horizon_ms = to_ms(horizon_seconds)
        self.times: deque[int] = deque()
        self.rates: deque[float] = deque()

    def push(self, t: int, rate: float) -> None:
        if self.times and t < self.times[-1]:
            # late arrival accepted within the transport tolerance
            i = bisect.bisect_right(list(self.times), t)
            self.times.insert(i, t)
            self.rates.insert(i, rate)
        else:
            self.times.append(t)
            self.rates.append(rate)

    def prune(self, t: int) -> None:
        cutoff = t - self.horizon_ms
        while self.times and self.times[0] <= cutoff:
            self.times.popleft()
            self.rates.popleft()

    def window(self, t: int, epsilon: float) -> tuple[list[int], list[float]]:
        lo = t - to_ms(epsilon)
        ts, rs = [], []
        for tj, rj in zip(reversed(self.times), reversed(self.rates)):
            if tj <= lo:
                break
            if tj <= t:
                ts.append(tj)
                rs.append(rj)
        ts.reverse()
        rs.reverse()
        return ts, rs


def window_count(state: WindowState, t: int, epsilon: float) -> int:
    lo = t - to_ms(epsilon)
    n = 0
    for tj in reversed(state.times):
        if tj <= lo:
            break
        if tj <= t:
            n += 1
    return n


def score_approx(n: int, epsilon: float, lambda0: float) -> float:
    """Score with the background rate held constant over the window."""
    if lambda0 <= 0:
        raise DomainError("background rate must be positive")
    if epsilon <= 0:
        raise DomainError("window size must be positive")
    return n / (epsilon * lambda0) - 1


def _rates(arrivals, lambda0: RateSource) -> np.ndarray:
    arrivals = np.asarray(arrivals)
    if callable(lambda0):
        r = np.asarray(lambda0(arrivals), dtype=float)
    else:
        r = np.full(arrivals.shape, float(lambda0))
    if np.any(r <= 0):
        raise DomainError("background rate must be positive at every arrival")
    return r


def score_exact_from_rates(rates: Sequence[float], epsilon: float) -> float:
    return math.fsum(1.0 / (epsilon * r) for r in rates) - 1


def score_exact(arrivals, epsilon: float, lambda0: RateSource) -> float:
    """Efficient score ``sum_j 1 / (eps * lambda0(t_j)) - 1``.

    ``lambda0`` is a rate or a callable mapping arrival times to rates.
    """
    return score_exact_from_rates(_rates(arrivals, lambda0).tolist(), epsilon)


def _likelihood_eq(delta: float, a: Sequence[float]) -> tuple[float, float]:
    f = math.fsum(1.0 / (aj + delta) for aj in a) - 1.0
    df = -math.fsum(1.0 / (aj + delta) ** 2 for aj in a)
    return f, df


def delta_hat_from_rates(
    rates: Sequence[float],
    epsilon: float,
    expected: float | None = None,
    tol: float = 1e-10,
    max_iter: int = 200,
) -> float:
    """Nonnegative root of ``sum 1/(eps*lambda_j + Delta) - 1 = 0``.

    Newton's method from the moment estimate ``N - Lambda0(window)``,
    safeguarded by the bracket ``[0, N]``. ``expected`` is the integrated
    background over the window; when absent it is approximated by
    ``eps * mean(lambda_j)``.
    """
    n = len(rates)
    if n == 0:
        return 0.0
    a = [epsilon * r for r in rates]
    if any(aj <= 0 for aj in a):
        raise DomainError("background rate must be positive at every arrival")
    f0, _ = _likelihood_eq(0.0, a)
    if f0 <= 0:
        return 0.0
    # f is convex and decreasing; f(0) > 0 and f(N) < 0 bracket the root
    lo, hi = 0.0, float(n)
    if expected is None:
        expected = math.fsum(a) / n
    delta = n - expected
    if not lo < delta < hi:
        delta = 0.5 * (lo + hi)
    trace = []
    for it in range(max_iter):
        f, df = _likelihood_eq(delta, a)
        trace.append((it, delta, f))
        if f > 0:
            lo = delta
        else:
            hi = delta
        step = -f / df
        if abs(f) < tol and (abs(step) <= 1e-13 * max(1.0, delta) or hi - lo <= 1e-14 * max(1.0, hi)):
            return delta
        nxt = delta + step
        if not lo < nxt < hi:
            nxt = 0.5 * (lo + hi)
        if nxt == delta:
            return delta
        delta = nxt
    raise NumericError("likelihood equation did not converge", trace)


def glr_delta_hat(arrivals, epsilon: float, lambda0: RateSource, expected: float | None = None) -> float:
    return delta_hat_from_rates(_rates(arrivals, lambda0).tolist(), epsilon, expected)


def glr_from_rates(rates: Sequence[float], epsilon: float, expected: float | None = None) -> tuple[float, float]:
    """Returns (GLR, Delta_hat)."""
    delta = delta_hat_from_rates(rates, epsilon, expected)
    if delta == 0.0:
        return 0.0, 0.0
    value = math.fsum(math.log1p(delta / (epsilon * r)) for r in rates) - delta
    return max(value, 0.0), delta


def glr_statistic(arrivals, epsilon: float, lambda0: RateSource, expected: float | None = None) -> float:
    return glr_from_rates(_rates(arrivals, lambda0).tolist(), epsilon, expected)[0]


def _sup(state: WindowState, t: int, grid: Sequence[float], stat) -> tuple[float, float, int]:
    best, best_eps, best_n = -math.inf, grid[0], 0
    for eps in grid:
        _, rates = state.window(t, eps)
        value = stat(rates, eps)
        # strict comparison keeps the smallest epsilon on ties
        if value > best:
            best, best_eps, best_n = value, eps, len(rates)
    return best, best_eps, best_n


def score_sup(state: WindowState, t: int, grid: Sequence[float]) -> tuple[float, float]:
    value, eps, _ = _sup(state, t, grid, score_exact_from_rates)
    return value, eps


def glr_sup(state: WindowState, t: int, grid: Sequence[float]) -> tuple[float, float]:
    value, eps, _ = _sup(state, t, grid, lambda r, e: glr_from_rates(r, e)[0])
    return value, eps


class Detector:
    """Streaming detector for one subnetwork.

    ``step`` is called once per vibration arrival with the current ``nu``;
    the first exceedance of ``h`` raises an alarm and later exceedances
    within the refractory period are swallowed.
    """

    def __init__(self, model: IntensityModel, config: DetectorConfig):
        self.model = model
        self.config = config
        self.state = WindowState(config.horizon_seconds)
        self.refractory_ms = to_ms(config.refractory_seconds)
        self.last_alarm: int | None = None

    def evaluate(self, t: int, nu: int) -> tuple[float, float, int]:
        cfg = self.config
        if cfg.statistic == "score":
            n = window_count(self.state, t, cfg.epsilon_seconds)
            return score_approx(n, cfg.epsilon_seconds, self.model.rate(nu)), cfg.epsilon_seconds, n
        if cfg.statistic == "score_exact":
            _, rates = self.state.window(t, cfg.epsilon_seconds)
            return score_exact_from_rates(rates, cfg.epsilon_seconds), cfg.epsilon_seconds, len(rates)
        if cfg.statistic == "glr":
            _, rates = self.state.window(t, cfg.epsilon_seconds)
            return glr_from_rates(rates, cfg.epsilon_seconds)[0], cfg.epsilon_seconds, len(rates)
        if cfg.statistic == "score_sup":
            return _sup(self.state, t, cfg.epsilon_grid, score_exact_from_rates)
        return _sup(self.state, t, cfg.epsilon_grid, lambda r, e: glr_from_rates(r, e)[0])

    def step(self, t: int, nu: int) -> DetectionOutcome:
        self.state.push(t, self.model.rate(nu))
        self.state.prune(max(t, self.state.times[-1]))
        value, eps, n = self.evaluate(t, nu)
        alarm = False
        if value > self.config.threshold_h:
            if self.last_alarm is None or t - self.last_alarm >= self.refractory_ms:
                alarm = True
                self.last_alarm = t
        return DetectionOutcome(alarm, t if alarm else None, value, n, nu, eps)


def step_detector(detector: Detector, t: int, nu: int) -> DetectionOutcome:
    return detector.step(t, nu)


@dataclass
class Alarm:
    index: int
    t_star: int
    statistic: float
    n_window: int
    nu: int
    epsilon: float


def window_counts(times: np.ndarray, epsilon: float) -> np.ndarray:
    """``N`` at every arrival, counting only arrivals at or before it in
    stream order (ties resolved as a streaming pass would)."""
    times = np.asarray(times, dtype=np.int64)
    first = np.searchsorted(times, times - to_ms(epsilon), side="right")
    return np.arange(len(times)) - first + 1


def score_series(times: np.ndarray, nus: np.ndarray, model: IntensityModel, epsilon: float) -> tuple[np.ndarray, np.ndarray]:
    counts = window_counts(times, epsilon)
    return counts / (epsilon * model.rates(nus)) - 1, counts


def apply_refractory(
    exceed_idx: np.ndarray, times: np.ndarray, refractory_ms: int, last_alarm: int | None = None
) -> list[int]:
    out = []
    for i in exceed_idx.tolist():
        t = int(times[i])
        if last_alarm is None or t - last_alarm >= refractory_ms:
            out.append(i)
            last_alarm = t
    return out


def detect_offline(
    times: np.ndarray,
    nus: np.ndarray,
    model: IntensityModel,
    config: DetectorConfig,
    eval_from: int | None = None,
) -> list[Alarm]:
    """Full-recompute counterpart of :class:`Detector` over sorted arrivals.

    ``eval_from`` drops alarms before that time; earlier arrivals still fill
    the window and earlier alarms still start a refractory period.
    """
    times = np.asarray(times, dtype=np.int64)
    nus = np.asarray(nus, dtype=np.int64)
    if len(times) == 0:
        return []
    if config.statistic != "score":
        det = Detector(model, config)
        alarms = []
        for i, (t, nu) in enumerate(zip(times.tolist(), nus.tolist())):
            out = det.step(t, nu)
            if out.alarm and (eval_from is None or t >= eval_from):
                alarms.append(Alarm(i, t, out.statistic_value, out.window_count, nu, out.epsilon))
        return alarms
    stats, counts = score_series(times, nus, model, config.epsilon_seconds)
    idx = apply_refractory(np.flatnonzero(stats > config.threshold_h), times, to_ms(config.refractory_seconds))
    if eval_from is not None:
        idx = [i for i in idx if times[i] >= eval_from]
    return [
        Alarm(i, int(times[i]), float(stats[i]), int(counts[i]), int(nus[i]), config.epsilon_seconds)
        for i in idx
    ]
