"""Alarm threshold from the right tail of the no-earthquake statistic.

Values above the empirical ``p0`` quantile ``u`` are modelled as
``u + GPD(xi, sigma)``; the threshold is the quantile that leaves a
probability ``alpha = mean_interarrival / delta_T`` per evaluation, which
gives on average one false alarm per ``delta_T``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import optimize

from .core import NuTrack, SignalList
from .detectors import Detector, DetectorConfig, score_series
from .intensity import DataError, IntensityModel

ONE_YEAR_SECONDS = 365 * 24 * 3600
DEFAULT_P0 = 0.99
MIN_EXCEEDANCES = 30
XI_ZERO = 1e-8


class BudgetError(ValueError):
    """The requested false-alarm rate falls outside the modelled tail."""


class GpdFitWarning(UserWarning):
    pass


@dataclass(frozen=True)
class GpdTailModel:
    p0: float
    u: float
    xi: float
    sigma: float
    n_exceedances: int
    se_xi: float = math.nan
    se_sigma: float = math.nan
    method: str = "ml"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("GPD scale must be positive")


@dataclass(frozen=True)
class FalseAlarmBudget:
    mean_interarrival_seconds: float
    delta_T_seconds: float = ONE_YEAR_SECONDS
    p0: float = DEFAULT_P0

    @property
    def alpha(self) -> float:
        return self.mean_interarrival_seconds / self.delta_T_seconds

    @property
    def p1(self) -> float:
        return 1.0 - self.alpha / (1.0 - self.p0)

    def validate(self) -> None:
        if not 0 < self.alpha < 1 - self.p0:
            raise BudgetError(
                f"alpha={self.alpha:.3g} must lie in (0, 1 - p0={1 - self.p0:.3g}); "
                "the false-alarm target is not inside the modelled tail"
            )


def gpd_cdf(y, xi: float, sigma: float):
    y = np.asarray(y, dtype=float)
    if abs(xi) < XI_ZERO:
        return -np.expm1(-y / sigma)
    z = np.maximum(1 + xi * y / sigma, 0.0)
    with np.errstate(divide="ignore"):
        return -np.expm1(-np.log(z) / xi)


def gpd_quantile(q, xi: float, sigma: float):
    q = np.asarray(q, dtype=float)
    if abs(xi) < XI_ZERO:
        return -sigma * np.log1p(-q)
    return sigma * np.expm1(-xi * np.log1p(-q)) / xi


def gpd_negloglik(xi: float, sigma: float, y: np.ndarray) -> float:
    if sigma <= 0:
        return math.inf
    n = len(y)
    if abs(xi) < XI_ZERO:
        return n * math.log(sigma) + float(y.sum()) / sigma
    z = 1 + xi * y / sigma
    if np.any(z <= 0):
        return math.inf
    return n * math.log(sigma) + (1 + 1 / xi) * float(np.log(z).sum())


def gpd_pwm(y: np.ndarray) -> tuple[float, float]:
    """Probability-weighted-moment estimates (Hosking and Wallis)."""
    y = np.sort(np.asarray(y, dtype=float))
    n = len(y)
    p = (np.arange(1, n + 1) - 0.35) / n
    a0 = y.mean()
    a1 = np.mean((1 - p) * y)
    k = a0 / (a0 - 2 * a1) - 2
    sigma = 2 * a0 * a1 / (a0 - 2 * a1)
    return -k, sigma


def _asymptotic_se(xi: float, sigma: float, n: int) -> tuple[float, float]:
    if xi <= -0.5:
        return math.nan, math.nan
    return (1 + xi) / math.sqrt(n), sigma * math.sqrt(2 * (1 + xi) / n)


def fit_gpd_exceedances(y, p0: float = DEFAULT_P0, u: float = 0.0) -> GpdTailModel:
    """Maximum-likelihood GPD fit to exceedances ``y >= 0``, started from PWM.

    Falls back to the PWM estimate, with a :class:`GpdFitWarning`, when the
    optimiser fails.
    """
    y = np.asarray(y, dtype=float)
    n = len(y)
    if n < MIN_EXCEEDANCES:
        raise DataError(f"{n} exceedances; at least {MIN_EXCEEDANCES} are needed for a tail fit")
    if np.any(y < 0):
        raise DataError("exceedances must be nonnegative")
    if np.ptp(y) == 0:
        raise DataError("exceedances are constant; the tail is degenerate")

    xi0, sigma0 = gpd_pwm(y)
    if not (np.isfinite(xi0) and sigma0 > 0):
        xi0, sigma0 = 0.0, float(y.mean())
    # keep the start inside the support when PWM suggests a short upper tail
    if xi0 < 0 and np.any(1 + xi0 * y / sigma0 <= 0):
        xi0 = -0.99 * sigma0 / y.max()

    def nll(theta):
        return gpd_negloglik(theta[0], math.exp(theta[1]), y)

    res = optimize.minimize(
        nll, [xi0, math.log(sigma0)], method="Nelder-Mead",
        options={"xatol": 1e-10, "fatol": 1e-10, "maxiter": 20_000, "maxfev": 40_000},
    )
    xi, sigma = float(res.x[0]), math.exp(float(res.x[1]))
    if not (res.success and np.isfinite(res.fun) and xi > -1):
        warnings.warn(f"GPD maximum likelihood failed ({res.message}); using PWM estimate", GpdFitWarning)
        se = _asymptotic_se(xi0, sigma0, n)
        return GpdTailModel(p0, u, float(xi0), float(sigma0), n, se[0], se[1], method="pwm")
    se = _asymptotic_se(xi, sigma, n)
    return GpdTailModel(p0, u, xi, sigma, n, se[0], se[1], method="ml")


def fit_gpd(values, p0: float = DEFAULT_P0) -> GpdTailModel:
    """Tail fit above the empirical ``p0`` quantile (linear interpolation)."""
    values = np.asarray(values, dtype=float)
    if len(values) == 0:
        raise DataError("empty statistic sample")
    u = float(np.quantile(values, p0))
    y = values[values > u] - u
    return fit_gpd_exceedances(y, p0=p0, u=u)


def derive_threshold(tail: GpdTailModel, budget: FalseAlarmBudget, conditional: bool = True) -> float:
    """Alarm threshold from the fitted tail.

    By default ``h`` is the ``p1`` quantile of the GPD itself, so
    ``P(S > h) = (1 - p0) * (1 - p1) = alpha`` and one false exceedance is
    expected per ``delta_T``. ``conditional=False`` instead reads ``p1`` as
    a level of the whole distribution, ``P(S > h) = 1 - p1``, which uses the
    tail ratio ``(1 - p1) / (1 - p0)`` and gives a lower threshold.
    """
    budget.validate()
    p1 = budget.p1
    if p1 <= tail.p0:
        raise BudgetError(f"p1={p1} does not exceed p0={tail.p0}")
    ratio = (1 - p1) if conditional else (1 - p1) / (1 - tail.p0)
    if abs(tail.xi) < XI_ZERO:
        return tail.u - tail.sigma * math.log(ratio)
    return tail.u + tail.sigma / tail.xi * (ratio ** (-tail.xi) - 1)


def mean_interarrival_seconds(times: np.ndarray) -> float:
    times = np.asarray(times)
    if len(times) < 2:
        raise DataError("need at least two vibration signals for an inter-arrival time")
    return float(np.diff(times).mean()) / 1000.0


def null_statistics(
    signals: SignalList,
    model: IntensityModel,
    config: DetectorConfig,
    nu_track: NuTrack | None = None,
    continuity_seed: int | None = None,
) -> np.ndarray:
    """Detector statistic at every vibration arrival of a no-earthquake list.

    With ``continuity_seed`` set, the score statistics get a randomised
    continuity correction ``U / (eps * lambda0(t))``, ``U ~ Uniform(0, 1)``:
    the count ``N`` becomes ``N + U``. The raw statistic lives on a lattice
    (integer counts, integer ``nu``) whose atoms next to ``u`` wreck the
    likelihood of a continuous tail model. The corrected value is never
    below the raw one, so a threshold fitted to it errs towards fewer false
    alarms. GLR values are returned unchanged.
    """
    times = signals.vibration_times()
    if len(times) == 0:
        return np.empty(0)
    if nu_track is None:
        nu_track = NuTrack.from_signals(signals)
    nus = np.asarray(nu_track(times), dtype=np.int64)
    if config.statistic == "score":
        values = score_series(times, nus, model, config.epsilon_seconds)[0]
    else:
        det = Detector(model, config)
        values = np.array([det.step(t, nu).statistic_value for t, nu in zip(times.tolist(), nus.tolist())])
    if continuity_seed is not None and config.statistic in ("score", "score_exact"):
        rng = np.random.default_rng(continuity_seed)
        values = values + rng.random(len(values)) / (config.epsilon_seconds * model.rates(nus))
    return values


@dataclass
class CalibrationReport:
    p0: float
    u: float
    xi: float
    sigma: float
    n_exceedances: int
    mean_interarrival: float
    delta_T: float
    alpha: float
    p1: float
    h: float
    epsilon: float
    statistic: str = "score"
    fit_method: str = "ml"
    se_xi: float = math.nan
    se_sigma: float = math.nan

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> CalibrationReport:
        fields = cls.__dataclass_fields__
        return cls(**{k: (math.nan if v is None else v) for k, v in d.items() if k in fields})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> CalibrationReport:
        return cls.from_dict(json.loads(Path(path).read_text()))


def calibrate(
    signals: SignalList,
    model: IntensityModel,
    epsilon: float = 30.0,
    delta_T: float = ONE_YEAR_SECONDS,
    p0: float = DEFAULT_P0,
    statistic: str = "score",
    nu_track: NuTrack | None = None,
    continuity_seed: int | None = 0,
) -> CalibrationReport:
    """Threshold for one (subnetwork, epsilon) pair from its no-earthquake list.

    ``continuity_seed=None`` fits the raw lattice-valued statistic.
    """
    config = DetectorConfig(epsilon_seconds=epsilon, statistic=statistic)
    values = null_statistics(signals, model, config, nu_track, continuity_seed)
    tail = fit_gpd(values, p0)
    budget = FalseAlarmBudget(mean_interarrival_seconds(signals.vibration_times()), delta_T, p0)
    h = derive_threshold(tail, budget)
    return CalibrationReport(
        p0=p0, u=tail.u, xi=tail.xi, sigma=tail.sigma, n_exceedances=tail.n_exceedances,
        mean_interarrival=budget.mean_interarrival_seconds, delta_T=delta_T,
        alpha=budget.alpha, p1=budget.p1, h=h, epsilon=epsilon, statistic=statistic,
        fit_method=tail.method, se_xi=tail.se_xi, se_sigma=tail.se_sigma,
    )
