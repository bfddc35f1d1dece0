"""Monte-Carlo study of detection probability and delay.

A synthetic no-earthquake stream stands in for a recorded one; simulated
earthquakes add ``round(nu_tau * phi)`` vibration signals uniformly over
``(tau, tau + sigma)`` and the detector is replayed around them.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ACTIVE_WINDOW_MS, NuTrack, SignalList
from .detectors import DEFAULT_REFRACTORY, DetectorConfig, detect_offline, to_ms
from .intensity import IntensityModel

DAY_MS = 86_400_000

# daily cycle (UTC hours) fitted, together with the weekend dip below, so the
# time-weighted 5th percentile / mean / 95th percentile of nu over the frame
# are close to 51 / 183 / 416
SANTIAGO_NU_ANCHORS = (
    (0.0, 329.0), (2.0, 414.0), (4.0, 429.0), (6.0, 326.0), (8.0, 138.0), (10.0, 67.0),
    (12.0, 67.0), (14.0, 53.0), (16.0, 64.0), (19.0, 100.0), (21.5, 222.0),
)
SANTIAGO_WEEKEND_FACTOR = 0.75
SANTIAGO_UTC_OFFSET_HOURS = -3.0
# published coefficients are read as per-minute rates; shifted to per second
SANTIAGO_MODEL = IntensityModel(beta0=0.7694 - math.log(60.0), beta1=0.0016, subnetwork="santiago")
SANTIAGO_CENTER = (-33.45, -70.66)
SANTIAGO_DIAMETER_KM = 40.0


def _utc_ms(*args) -> int:
    return int(datetime(*args, tzinfo=timezone.utc).timestamp() * 1000)


SANTIAGO_FRAME = (_utc_ms(2015, 1, 7), _utc_ms(2015, 4, 9))

PAPER_PHI = (0.01, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80)
PAPER_SIGMA = (2.0, 3.0, 5.0, 10.0, 15.0, 20.0, 25.0)
PAPER_EPSILONS = (5.0, 10.0, 20.0, 30.0, 40.0)


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class NuProfile:
    """Periodic daily cycle, piecewise linear through (hour, nu) anchors."""

    anchors: tuple[tuple[float, float], ...] = SANTIAGO_NU_ANCHORS
    # Saturdays and Sundays (in local time) run at this fraction of a weekday
    weekend_factor: float = 1.0
    utc_offset_hours: float = 0.0

    def __post_init__(self):
        if not self.weekend_factor > 0:
            raise ValueError("weekend_factor must be positive")
        hours = [h for h, _ in self.anchors]
        if any(b <= a for a, b in zip(hours, hours[1:])) or hours[0] < 0 or hours[-1] >= 24:
            raise ValueError("anchor hours must be increasing within [0, 24)")
        if any(v < 0 for _, v in self.anchors):
            raise ValueError("nu anchors must be nonnegative")

    def __call__(self, t_ms):
        hours = np.array([h for h, _ in self.anchors] + [self.anchors[0][0] + 24.0])
        values = np.array([v for _, v in self.anchors] + [self.anchors[0][1]])
        tod = (np.asarray(t_ms, dtype=np.int64) % DAY_MS) / 3_600_000.0
        tod = np.where(tod < hours[0], tod + 24.0, tod)
        nu = np.interp(tod, hours, values)
        if self.weekend_factor != 1.0:
            local_day = (np.asarray(t_ms, dtype=np.int64) + int(self.utc_offset_hours * 3_600_000)) // DAY_MS
            weekend = (local_day + 3) % 7 >= 5  # day 0 of the epoch was a Thursday
            nu = np.where(weekend, nu * self.weekend_factor, nu)
        return nu

    @property
    def peak(self) -> float:
        return max(v for _, v in self.anchors)


@dataclass
class BackgroundModel:
    model: IntensityModel
    nu_profile: NuProfile = field(default_factory=NuProfile)
    seed: int = 0
    center: tuple[float, float] = SANTIAGO_CENTER
    radius_km: float = SANTIAGO_DIAMETER_KM / 2
    heartbeat_ms: int = ACTIVE_WINDOW_MS


def _device_positions(rng: np.random.Generator, n: int, center, radius_km) -> tuple[np.ndarray, np.ndarray]:
    r = radius_km * np.sqrt(rng.random(n))
    theta = 2 * np.pi * rng.random(n)
    lat = center[0] + r * np.cos(theta) / 111.19
    lon = center[1] + r * np.sin(theta) / (111.19 * math.cos(math.radians(center[0])))
    return lat, lon


def generate_heartbeats(bg: BackgroundModel, time_frame, rng) -> tuple[np.ndarray, np.ndarray]:
    """Active signals so that ``nu_t`` follows the profile.

    Device ``i`` heartbeats once per ``heartbeat_ms`` slot, at a fixed phase,
    whenever ``i`` is below the profile value for that slot.
    """
    t0, t1 = time_frame
    hb = bg.heartbeat_ms
    n_dev = int(math.ceil(bg.nu_profile.peak))
    phase = rng.integers(0, hb, size=n_dev)
    slot_start = np.arange((t0 // hb) * hb, t1 + 1, hb, dtype=np.int64)
    per_slot = np.rint(bg.nu_profile(slot_start + hb // 2)).astype(np.int64)
    slot_of = np.repeat(np.arange(len(slot_start)), per_slot)
    offsets = np.cumsum(per_slot) - per_slot
    device = np.arange(len(slot_of)) - np.repeat(offsets, per_slot)
    t = slot_start[slot_of] + phase[device]
    keep = (t >= t0) & (t <= t1)
    t, device = t[keep], device[keep]
    order = np.argsort(t, kind="stable")
    return t[order], device[order]


def thin_arrivals(model: IntensityModel, nu_track: NuTrack, time_frame, nu_max: float, rng) -> np.ndarray:
    """Nonhomogeneous Poisson arrivals by thinning a homogeneous process at
    ``exp(beta0 + beta1 * nu_max)``."""
    t0, t1 = time_frame
    if t1 <= t0:
        return np.empty(0, dtype=np.int64)
    lam_max = math.exp(model.beta0 + model.beta1 * nu_max) if model.beta1 >= 0 else math.exp(model.beta0)
    span_s = (t1 - t0) / 1000.0
    n = rng.poisson(lam_max * span_s)
    cand = np.sort(t0 + rng.random(n) * (t1 - t0))
    ms = np.minimum(np.floor(cand).astype(np.int64) + 1, t1)  # arrivals in (t0, t1]
    accept = rng.random(n) * lam_max < model.rates(nu_track(ms))
    return ms[accept]


def generate_background(bg: BackgroundModel, time_frame) -> SignalList:
    """Synthetic no-earthquake list: heartbeats plus thinned vibrations.

    Deterministic for a given seed.
    """
    t0, t1 = int(time_frame[0]), int(time_frame[1])
    if t1 <= t0:
        return SignalList.empty((t0, max(t0, t1)))
    rng = np.random.default_rng(bg.seed)
    n_dev = int(math.ceil(bg.nu_profile.peak))
    dev_lat, dev_lon = _device_positions(rng, max(n_dev, 1), bg.center, bg.radius_km)
    ids = np.array([f"dev{i:05d}" for i in range(max(n_dev, 1))], dtype=object)

    hb_t, hb_dev = generate_heartbeats(bg, (t0, t1), rng)
    track = NuTrack.from_active(hb_t, ids[hb_dev], bg.heartbeat_ms)
    vib_t = thin_arrivals(bg.model, track, (t0, t1), float(bg.nu_profile.peak), rng)
    # a vibration comes from one of the currently active devices
    nu_v = np.maximum(np.asarray(track(vib_t)), 1)
    vib_dev = np.minimum((rng.random(len(vib_t)) * nu_v).astype(np.int64), n_dev - 1)

    kind = np.concatenate([np.zeros(len(hb_t), np.int8), np.ones(len(vib_t), np.int8)])
    t = np.concatenate([hb_t, vib_t])
    dev = np.concatenate([hb_dev, vib_dev])
    return SignalList(kind, t, ids[dev], dev_lat[dev], dev_lon[dev], time_frame=(t0, t1))


def santiago_profile() -> NuProfile:
    return NuProfile(SANTIAGO_NU_ANCHORS, SANTIAGO_WEEKEND_FACTOR, SANTIAGO_UTC_OFFSET_HOURS)


def santiago_background(seed: int = 0, days: float | None = None, model: IntensityModel = SANTIAGO_MODEL) -> SignalList:
    """Santiago-like synthetic stream (whole published time frame by default)."""
    t0 = SANTIAGO_FRAME[0]
    t1 = SANTIAGO_FRAME[1] if days is None else t0 + int(days * DAY_MS)
    return generate_background(BackgroundModel(model=model, nu_profile=santiago_profile(), seed=seed), (t0, t1))


@dataclass
class PreparedStream:
    """Vibration times with ``nu`` attached, ready for repeated replays."""

    times: np.ndarray
    nus: np.ndarray
    nu_track: NuTrack
    time_frame: tuple[int, int]

    @classmethod
    def from_signals(cls, signals: SignalList) -> PreparedStream:
        track = NuTrack.from_signals(signals)
        times = signals.vibration_times()
        return cls(times, np.asarray(track(times), dtype=np.int64), track, signals.time_frame)


@dataclass(frozen=True)
class QuakeScenario:
    phi: float
    sigma_seconds: float
    epsilon_seconds: float = 30.0
    threshold_h: float = math.inf
    n_sim: int = 1000
    refractory_seconds: float = DEFAULT_REFRACTORY

    def __post_init__(self):
        if not 0 <= self.phi <= 1:
            raise ValueError("phi must lie in [0, 1]")
        if self.sigma_seconds <= 0:
            raise ValueError("sigma must be positive")
        if self.n_sim < 1:
            raise ValueError("n_sim must be at least 1")

    @property
    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(
            epsilon_seconds=self.epsilon_seconds, threshold_h=self.threshold_h,
            refractory_seconds=self.refractory_seconds,
        )


@dataclass
class RunRecord:
    tau: int
    nu_tau: int
    n_injected: int
    detected: bool
    t_star: int | None
    delay: float | None

    @property
    def injected_zero(self) -> bool:
        return self.n_injected == 0


def simulate_quake(
    stream: PreparedStream,
    scenario: QuakeScenario,
    model: IntensityModel,
    rng: np.random.Generator,
) -> RunRecord:
    """One simulated earthquake; detected when an alarm falls in
    ``(tau, tau + sigma + eps]``."""
    eps_ms = to_ms(scenario.epsilon_seconds)
    sig_ms = max(to_ms(scenario.sigma_seconds), 2)
    lookback = to_ms(scenario.refractory_seconds) + 2 * eps_ms
    t0, t1 = stream.time_frame
    lo_t, hi_t = t0 + lookback, t1 - sig_ms - eps_ms
    if hi_t <= lo_t:
        raise ConfigurationError("time frame too short for the scenario")
    tau = int(rng.integers(lo_t, hi_t))
    nu_tau = int(stream.nu_track(tau))
    k = int(np.rint(nu_tau * scenario.phi))
    injected = tau + 1 + np.floor(rng.random(k) * (sig_ms - 1)).astype(np.int64)
    horizon = tau + sig_ms + eps_ms

    lo = np.searchsorted(stream.times, tau - lookback, side="right")
    hi = np.searchsorted(stream.times, horizon, side="right")
    times = np.concatenate([stream.times[lo:hi], injected])
    nus = np.concatenate([stream.nus[lo:hi], np.atleast_1d(stream.nu_track(injected)).astype(np.int64)])
    order = np.argsort(times, kind="stable")
    times, nus = times[order], nus[order]

    alarms = detect_offline(times, nus, model, scenario.detector_config, eval_from=tau - lookback + eps_ms)
    for a in alarms:
        if tau < a.t_star <= horizon:
            return RunRecord(tau, nu_tau, k, True, a.t_star, (a.t_star - tau) / 1000.0)
        if a.t_star > horizon:
            break
    return RunRecord(tau, nu_tau, k, False, None, None)


@dataclass
class SimulationResult:
    phi: float
    sigma: float
    epsilon: float
    runs: list[RunRecord]

    @property
    def detection_fraction(self) -> float:
        return 100.0 * sum(r.detected for r in self.runs) / len(self.runs)

    @property
    def mean_delay_seconds(self) -> float | None:
        delays = [r.delay for r in self.runs if r.detected]
        return float(np.mean(delays)) if delays else None


def cell_rng(seed: int, cell: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(cell,)))


def run_cell(stream, model, phi, sigma, epsilon, h, n_sim, seed, cell, refractory=DEFAULT_REFRACTORY) -> SimulationResult:
    scenario = QuakeScenario(phi, sigma, epsilon, h, n_sim, refractory)
    rng = cell_rng(seed, cell)
    runs = [simulate_quake(stream, scenario, model, rng) for _ in range(n_sim)]
    return SimulationResult(phi, sigma, epsilon, runs)


_WORKER: dict = {}


def _init_worker(stream, model):
    _WORKER["stream"], _WORKER["model"] = stream, model


def _run_cell_worker(args):
    return run_cell(_WORKER["stream"], _WORKER["model"], *args)


@dataclass
class GridResult:
    phis: tuple[float, ...]
    sigmas: tuple[float, ...]
    epsilon: float
    threshold_h: float
    cells: dict[tuple[int, int], SimulationResult]

    def fraction_table(self) -> np.ndarray:
        return np.array([[self.cells[i, j].detection_fraction for j in range(len(self.sigmas))] for i in range(len(self.phis))])

    def delay_table(self) -> np.ndarray:
        return np.array([
            [np.nan if (d := self.cells[i, j].mean_delay_seconds) is None else d for j in range(len(self.sigmas))]
            for i in range(len(self.phis))
        ])

    def cell(self, phi: float, sigma: float) -> SimulationResult:
        i = min(range(len(self.phis)), key=lambda k: abs(self.phis[k] - phi))
        j = min(range(len(self.sigmas)), key=lambda k: abs(self.sigmas[k] - sigma))
        return self.cells[i, j]


def run_grid(
    stream: PreparedStream,
    model: IntensityModel,
    phis: Sequence[float],
    sigmas: Sequence[float],
    n_sim: int,
    epsilon: float,
    threshold_h: float,
    seed: int = 0,
    workers: int = 1,
    refractory: float = DEFAULT_REFRACTORY,
) -> GridResult:
    """Full factorial (phi, sigma) sweep.

    Cell ``(i, j)`` draws from its own substream of ``seed`` so results do not
    depend on worker count or evaluation order.
    """
    phis, sigmas = tuple(float(p) for p in phis), tuple(float(s) for s in sigmas)
    if not phis or not sigmas:
        raise ValueError("phi and sigma grids must be nonempty")
    jobs = [
        (phis[i], sigmas[j], epsilon, threshold_h, n_sim, seed, i * len(sigmas) + j, refractory)
        for i in range(len(phis)) for j in range(len(sigmas))
    ]
    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(stream, model)) as pool:
            results = list(pool.map(_run_cell_worker, jobs))
    else:
        results = [run_cell(stream, model, *job) for job in jobs]
    cells = {(i, j): results[i * len(sigmas) + j] for i in range(len(phis)) for j in range(len(sigmas))}
    return GridResult(phis, sigmas, float(epsilon), float(threshold_h), cells)


@dataclass
class SweepResult:
    grids: dict[float, GridResult]

    @property
    def epsilons(self) -> list[float]:
        return sorted(self.grids)

    def delay_vs_epsilon(self) -> dict[float, float]:
        """Mean delay per epsilon, averaged over (phi, sigma) cells with detections."""
        return {eps: float(np.nanmean(self.grids[eps].delay_table())) for eps in self.epsilons}

    def fraction_vs_sigma(self) -> dict[float, np.ndarray]:
        """Detection fraction per sigma, averaged over phi, for each epsilon."""
        return {eps: self.grids[eps].fraction_table().mean(axis=0) for eps in self.epsilons}


def sweep_epsilon(
    stream: PreparedStream,
    model: IntensityModel,
    phis: Sequence[float],
    sigmas: Sequence[float],
    n_sim: int,
    thresholds: dict[float, float],
    epsilons: Sequence[float] = PAPER_EPSILONS,
    seed: int = 0,
    workers: int = 1,
) -> SweepResult:
    """One grid per window size, each with the threshold calibrated for it.

    Every epsilon reuses the same per-cell seeds (common random numbers).
    """
    missing = [e for e in epsilons if float(e) not in {float(k) for k in thresholds}]
    if missing:
        raise ConfigurationError(f"no calibrated threshold for epsilon {missing}")
    h_of = {float(k): v for k, v in thresholds.items()}
    return SweepResult({
        float(eps): run_grid(stream, model, phis, sigmas, n_sim, float(eps), h_of[float(eps)], seed, workers)
        for eps in epsilons
    })


def write_table_csv(grid: GridResult, which: str, path: str | Path) -> None:
    """Rows are phi, columns sigma."""
    table = grid.fraction_table() if which == "fraction" else grid.delay_table()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["phi"] + [f"{s:g}" for s in grid.sigmas])
        for phi, row in zip(grid.phis, table):
            w.writerow([f"{phi:.2f}"] + ["" if np.isnan(v) else f"{v:.{1 if which == 'fraction' else 2}f}" for v in row])


def write_runs_jsonl(grid: GridResult, path: str | Path) -> None:
    with open(path, "w") as fh:
        for (i, j), res in sorted(grid.cells.items()):
            for r in res.runs:
                rec = {"phi": res.phi, "sigma": res.sigma, "epsilon": res.epsilon, **asdict(r)}
                fh.write(json.dumps(rec) + "\n")


def write_sweep_files(sweep: SweepResult, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "delay_vs_epsilon.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epsilon", "mean_delay"])
        for eps, d in sweep.delay_vs_epsilon().items():
            w.writerow([f"{eps:g}", f"{d:.4f}"])
    fractions = sweep.fraction_vs_sigma()
    sigmas = next(iter(sweep.grids.values())).sigmas
    with open(out / "fraction_vs_sigma.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epsilon"] + [f"{s:g}" for s in sigmas])
        for eps, row in fractions.items():
            w.writerow([f"{eps:g}"] + [f"{v:.2f}" for v in row])
