"""Background intensity of vibration signals, ``lambda0 = exp(beta0 + beta1 * nu)``.

Rates are events per second throughout the engine.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from scipy.special import gammaln

from .core import NuTrack, SignalList

DEFAULT_BIN_SECONDS = 60.0


class NoDataError(ValueError):
    pass


class DataError(ValueError):
    pass


class RankDeficientError(DataError):
    """The design matrix cannot identify both coefficients."""


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, trace: list[dict]):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class IntensityModel:
    beta0: float
    beta1: float
    se_beta0: float = 0.0
    se_beta1: float = 0.0
    bin_seconds: float = DEFAULT_BIN_SECONDS
    fitted_at: str | None = None
    subnetwork: str | None = None
    rate_unit: str = "events/s"
    _table: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def rate(self, nu: float) -> float:
        return math.exp(self.beta0 + self.beta1 * nu)

    def rates(self, nu) -> np.ndarray:
        """Vectorised :meth:`rate` that is bit-identical to the scalar path.

        ``nu`` is an integer count, so rates are looked up in a table built
        with ``math.exp``; numpy's SIMD ``exp`` can differ in the last ulp.
        """
        nu = np.asarray(nu)
        if nu.size == 0:
            return np.zeros(nu.shape)
        if not np.issubdtype(nu.dtype, np.integer):
            return np.array([self.rate(float(v)) for v in nu.ravel()]).reshape(nu.shape)
        top = int(nu.max())
        table = self._table.get("t")
        if table is None or len(table) <= top:
            table = np.array([self.rate(k) for k in range(max(top + 1, 2 * len(table) if table is not None else 0, 512))])
            self._table["t"] = table
        return table[nu]

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("_table")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> IntensityModel:
        keys = {"beta0", "beta1", "se_beta0", "se_beta1", "bin_seconds", "fitted_at", "subnetwork", "rate_unit"}
        return cls(**{k: v for k, v in d.items() if k in keys})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> IntensityModel:
        return cls.from_dict(json.loads(Path(path).read_text()))


def intensity_at(model: IntensityModel, nu: float) -> float:
    if nu < 0:
        raise ValueError("nu must be nonnegative")
    return model.rate(nu)


def integrated_intensity(model: IntensityModel, interval: tuple[int, int], nu_track: NuTrack | int) -> float:
    """Expected number of vibrations in ``(a, b]`` (timestamps in ms).

    ``nu`` is piecewise constant, so the integral is an exact sum of
    ``rate * duration`` pieces.
    """
    a, b = interval
    if a >= b:
        raise ValueError("interval must satisfy a < b")
    if isinstance(nu_track, (int, np.integer)):
        return (b - a) / 1000.0 * model.rate(int(nu_track))
    durations, nus = nu_track.segments(a, b)
    return math.fsum(d / 1000.0 * r for d, r in zip(durations.tolist(), model.rates(nus).tolist()))


@dataclass
class BinnedData:
    counts: np.ndarray
    nu: np.ndarray
    exposure: np.ndarray  # seconds

    @property
    def design(self) -> np.ndarray:
        return np.column_stack([np.ones_like(self.nu, dtype=float), self.nu.astype(float)])


def bin_arrivals(times: np.ndarray, nu_track, time_frame: tuple[int, int], bin_seconds: float) -> BinnedData:
    """Counts per fixed-width bin with ``nu`` read at bin midpoints."""
    if bin_seconds <= 0:
        raise ValueError("bin_seconds must be positive")
    t0, t1 = time_frame
    bin_ms = int(round(bin_seconds * 1000))
    n_bins = max(1, -(-(t1 - t0) // bin_ms))
    starts = t0 + bin_ms * np.arange(n_bins, dtype=np.int64)
    ends = np.minimum(starts + bin_ms, t1)
    idx = np.clip((np.asarray(times, dtype=np.int64) - t0) // bin_ms, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins).astype(float)
    nu = np.asarray(nu_track((starts + ends) // 2), dtype=float)
    exposure = (ends - starts) / 1000.0
    keep = exposure > 0
    return BinnedData(counts[keep], nu[keep], exposure[keep])


def poisson_loglik(beta: np.ndarray, data: BinnedData) -> float:
    eta = data.design @ beta + np.log(data.exposure)
    return float(np.sum(data.counts * eta - np.exp(eta) - gammaln(data.counts + 1)))


def poisson_score(beta: np.ndarray, data: BinnedData) -> np.ndarray:
    X = data.design
    mu = np.exp(X @ beta + np.log(data.exposure))
    return X.T @ (data.counts - mu)


def poisson_information(beta: np.ndarray, data: BinnedData) -> np.ndarray:
    X = data.design
    mu = np.exp(X @ beta + np.log(data.exposure))
    return X.T @ (X * mu[:, None])


def _solve(info: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(info, rhs)
    except np.linalg.LinAlgError:
        return np.linalg.solve(info + 1e-8 * np.eye(len(rhs)), rhs)


def fit_binned(data: BinnedData, max_iter: int = 100, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray, list[dict]]:
    """Newton / IRLS for the log-link Poisson GLM with exposure offset.

    Returns (beta, covariance, trace).
    """
    if data.counts.sum() == 0:
        raise NoDataError("no arrivals to fit")
    if not np.all(np.isfinite(data.nu)):
        raise DataError("non-finite covariate values")
    if np.ptp(data.nu) == 0 or np.linalg.matrix_rank(data.design) < 2:
        raise RankDeficientError("nu is constant over the fitting window; beta1 is not identifiable")

    beta = np.array([math.log(data.counts.sum() / data.exposure.sum()), 0.0])
    ll = poisson_loglik(beta, data)
    trace = [{"iter": 0, "beta": beta.tolist(), "loglik": ll}]
    for it in range(1, max_iter + 1):
        step = _solve(poisson_information(beta, data), poisson_score(beta, data))
        new_beta = beta + step
        new_ll = poisson_loglik(new_beta, data)
        # step halving keeps the ascent monotone far from the optimum
        halvings = 0
        while not new_ll >= ll - 1e-12 * abs(ll) and halvings < 30:
            step /= 2
            new_beta = beta + step
            new_ll = poisson_loglik(new_beta, data)
            halvings += 1
        trace.append({"iter": it, "beta": new_beta.tolist(), "loglik": new_ll, "halvings": halvings})
        done = abs(new_ll - ll) < tol * max(1.0, abs(ll))
        beta, ll = new_beta, new_ll
        if done:
            # one extra Newton step polishes the gradient to round-off level
            beta = beta + _solve(poisson_information(beta, data), poisson_score(beta, data))
            cov = np.linalg.inv(poisson_information(beta, data))
            return beta, cov, trace
    raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations", trace)


def fit_glm(
    signals: SignalList,
    nu_track: NuTrack | None = None,
    bin_seconds: float = DEFAULT_BIN_SECONDS,
    subnetwork: str | None = None,
) -> IntensityModel:
    """Maximum-likelihood fit of ``log lambda0 = beta0 + beta1 * nu`` on a
    no-earthquake list.

    Vibration arrivals are binned into ``bin_seconds`` bins, each carrying
    ``nu`` at its midpoint and an exposure offset. ``nu_track`` defaults to
    the heartbeat-derived track of ``signals`` itself.
    """
    times = signals.vibration_times()
    if len(times) == 0:
        raise NoDataError("signal list holds no vibration signals")
    if nu_track is None:
        nu_track = NuTrack.from_signals(signals)
    data = bin_arrivals(times, nu_track, signals.time_frame, bin_seconds)
    beta, cov, _ = fit_binned(data)
    se = np.sqrt(np.diag(cov))
    fitted_at = datetime.fromtimestamp(signals.time_frame[1] / 1000.0, tz=timezone.utc).isoformat()
    return IntensityModel(
        beta0=float(beta[0]),
        beta1=float(beta[1]),
        se_beta0=float(se[0]),
        se_beta1=float(se[1]),
        bin_seconds=float(bin_seconds),
        fitted_at=fitted_at,
        subnetwork=subnetwork,
    )
