"""Domain types shared across the engine: signal events, signal lists and the
rolling count of active smartphones (``nu``)."""

from __future__ import annotations

import enum
import heapq
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
import pandas as pd

ACTIVE_WINDOW_MS = 30 * 60 * 1000
DEFAULT_TOLERANCE_MS = 5_000

SIGNAL_CSV_COLUMNS = ["kind", "t_ms", "device_id", "lat", "lon"]


class MonotonicityError(ValueError):
    """Raised when an event arrives too far behind the stream clock."""


class SignalKind(str, enum.Enum):
    VIBRATION = "vibration"
    ACTIVE = "active"


# sort key: active signals sort ahead of vibrations sharing a timestamp so
# that nu at a vibration already reflects heartbeats stamped the same ms
_KIND_CODE = {SignalKind.ACTIVE: 0, SignalKind.VIBRATION: 1}


@dataclass(frozen=True, slots=True)
class SignalEvent:
    kind: SignalKind
    t: int
    device_id: str
    lat: float = 0.0
    lon: float = 0.0

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude out of range: {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude out of range: {self.lon}")
        if self.t <= 0:
            raise ValueError(f"timestamp must be positive, got {self.t}")


@dataclass(frozen=True)
class SubnetworkConfig:
    name: str
    center_lat: float
    center_lon: float
    diameter_km: float
    time_frame: tuple[int, int] | None = None

    def __post_init__(self):
        if self.diameter_km <= 0:
            raise ValueError("diameter_km must be positive")
        if self.time_frame is not None and self.time_frame[0] >= self.time_frame[1]:
            raise ValueError("time_frame must satisfy t_start < t_end")


class SignalList:
    """Time-ordered signals stored column-wise.

    Lists routinely hold millions of heartbeats, so the columns live in numpy
    arrays and :class:`SignalEvent` objects are only built on iteration.
    """

    def __init__(self, kind, t, device_id, lat, lon, time_frame=None, *, presorted=False):
        kind = np.asarray(kind, dtype=np.int8)
        t = np.asarray(t, dtype=np.int64)
        device_id = np.asarray(device_id, dtype=object)
        lat = np.asarray(lat, dtype=float)
        lon = np.asarray(lon, dtype=float)
        if not (len(kind) == len(t) == len(device_id) == len(lat) == len(lon)):
            raise ValueError("column lengths differ")
        if not presorted:
            order = np.lexsort((kind, t))
            kind, t, device_id, lat, lon = kind[order], t[order], device_id[order], lat[order], lon[order]
        self.kind = kind
        self.t = t
        self.device_id = device_id
        self.lat = lat
        self.lon = lon
        if time_frame is None:
            time_frame = (int(t[0]), int(t[-1])) if len(t) else (0, 0)
        self.time_frame = (int(time_frame[0]), int(time_frame[1]))
        if len(t) and (t[0] < self.time_frame[0] or t[-1] > self.time_frame[1]):
            raise ValueError("events fall outside the declared time frame")

    @classmethod
    def empty(cls, time_frame=(0, 0)) -> SignalList:
        return cls([], [], [], [], [], time_frame=time_frame, presorted=True)

    @classmethod
    def from_events(cls, events: Iterable[SignalEvent], time_frame=None) -> SignalList:
        events = list(events)
        return cls(
            [_KIND_CODE[e.kind] for e in events],
            [e.t for e in events],
            [e.device_id for e in events],
            [e.lat for e in events],
            [e.lon for e in events],
            time_frame=time_frame,
        )

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[SignalEvent]:
        kinds = (SignalKind.ACTIVE, SignalKind.VIBRATION)
        for k, t, d, la, lo in zip(self.kind, self.t, self.device_id, self.lat, self.lon):
            yield SignalEvent(kinds[k], int(t), str(d), float(la), float(lo))

    def __eq__(self, other) -> bool:
        if not isinstance(other, SignalList):
            return NotImplemented
        return (
            np.array_equal(self.kind, other.kind)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.device_id, other.device_id)
            and np.array_equal(self.lat, other.lat)
            and np.array_equal(self.lon, other.lon)
        )

    def select(self, mask: np.ndarray, time_frame=None) -> SignalList:
        return SignalList(
            self.kind[mask], self.t[mask], self.device_id[mask], self.lat[mask], self.lon[mask],
            time_frame=time_frame or self.time_frame, presorted=True,
        )

    @property
    def vibration_mask(self) -> np.ndarray:
        return self.kind == _KIND_CODE[SignalKind.VIBRATION]

    @property
    def active_mask(self) -> np.ndarray:
        return self.kind == _KIND_CODE[SignalKind.ACTIVE]

    def vibration_times(self) -> np.ndarray:
        return self.t[self.vibration_mask]

    def merge(self, other: SignalList) -> SignalList:
        frame = (min(self.time_frame[0], other.time_frame[0]), max(self.time_frame[1], other.time_frame[1]))
        return SignalList(
            np.concatenate([self.kind, other.kind]),
            np.concatenate([self.t, other.t]),
            np.concatenate([self.device_id, other.device_id]),
            np.concatenate([self.lat, other.lat]),
            np.concatenate([self.lon, other.lon]),
            time_frame=frame,
        )


def kind_code(kind: SignalKind | str) -> int:
    return _KIND_CODE[SignalKind(kind)]


def read_signals_csv(path: str | Path, time_frame=None) -> SignalList:
    df = pd.read_csv(
        path,
        dtype={"kind": str, "t_ms": np.int64, "device_id": str, "lat": float, "lon": float},
        keep_default_na=False,
    )
    missing = set(SIGNAL_CSV_COLUMNS) - set(df.columns)
    if missing:
        raise ValueError(f"signal CSV missing columns: {sorted(missing)}")
    try:
        kind = df["kind"].str.lower().map({"vibration": 1, "active": 0})
    except AttributeError:  # empty frame
        kind = pd.Series([], dtype=float)
    if kind.isna().any():
        bad = df.loc[kind.isna(), "kind"].iloc[0]
        raise ValueError(f"unknown signal kind {bad!r}")
    return SignalList(
        kind.to_numpy(dtype=np.int8), df["t_ms"].to_numpy(), df["device_id"].to_numpy(dtype=object),
        df["lat"].to_numpy(), df["lon"].to_numpy(), time_frame=time_frame,
    )


def write_signals_csv(signals: SignalList, path: str | Path | io.TextIOBase) -> None:
    names = np.array(["active", "vibration"], dtype=object)
    df = pd.DataFrame({
        "kind": names[signals.kind.astype(int)] if len(signals) else [],
        "t_ms": signals.t,
        "device_id": signals.device_id,
        "lat": signals.lat,
        "lon": signals.lon,
    })
    df.to_csv(path, index=False, lineterminator="\n")


class NetworkState:
    """Rolling set of devices that sent an active signal in ``(t - window, t]``.

    Single writer. Queries are only answered at or after the stream clock;
    historical look-ups go through :class:`NuTrack`.
    """

    def __init__(self, window_ms: int = ACTIVE_WINDOW_MS, tolerance_ms: int = DEFAULT_TOLERANCE_MS):
        self.window_ms = int(window_ms)
        self.tolerance_ms = int(tolerance_ms)
        self.last_active: dict[str, int] = {}
        self._heap: list[tuple[int, str]] = []
        self.clock = 0

    def _check_order(self, t: int) -> None:
        if t < self.clock - self.tolerance_ms:
            raise MonotonicityError(
                f"event at {t} ms is {self.clock - t} ms behind stream clock {self.clock}"
            )

    def update(self, ev: SignalEvent) -> NetworkState:
        if ev.kind is not SignalKind.ACTIVE:
            raise ValueError("only active signals update the network state")
        self.observe(ev.t)
        prev = self.last_active.get(ev.device_id)
        if prev is None or ev.t > prev:
            self.last_active[ev.device_id] = ev.t
            heapq.heappush(self._heap, (ev.t, ev.device_id))
        return self

    def observe(self, t: int) -> None:
        """Advance the stream clock (vibration arrivals call this too)."""
        self._check_order(t)
        if t > self.clock:
            self.clock = t

    def _evict(self, t: int) -> None:
        cutoff = t - self.window_ms
        heap = self._heap
        while heap and heap[0][0] <= cutoff:
            ts, dev = heapq.heappop(heap)
            if self.last_active.get(dev) == ts:
                del self.last_active[dev]

    def nu_at(self, t: int) -> int:
        if t < self.clock:
            raise ValueError(f"query at {t} precedes stream clock {self.clock}; use NuTrack")
        self._evict(t)
        return len(self.last_active)

    def snapshot(self) -> dict[str, int]:
        return dict(self.last_active)


class NuTrack:
    """Piecewise-constant ``nu_t`` over a whole history.

    ``values[i]`` holds on ``[times[i], times[i+1])``; before ``times[0]`` the
    count is zero.
    """

    def __init__(self, times: np.ndarray, values: np.ndarray):
        self.times = np.asarray(times, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.int64)
        if len(self.times) != len(self.values):
            raise ValueError("times and values differ in length")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("breakpoints must be strictly increasing")

    @classmethod
    def constant(cls, nu: int, start: int = 0) -> NuTrack:
        return cls(np.array([start]), np.array([nu]))

    @classmethod
    def from_active(cls, t: np.ndarray, device_id: np.ndarray, window_ms: int = ACTIVE_WINDOW_MS) -> NuTrack:
        """Distinct devices with a heartbeat in ``(s - window, s]``.

        A heartbeat at ``t`` covers ``[t, t + window)``; per-device coverage is
        merged before counting so repeated heartbeats never double count.
        """
        t = np.asarray(t, dtype=np.int64)
        if len(t) == 0:
            return cls(np.array([0]), np.array([0]))
        dev_codes, _ = pd.factorize(pd.Series(np.asarray(device_id, dtype=object)))
        order = np.lexsort((t, dev_codes))
        d, ts = dev_codes[order], t[order]
        ends = ts + window_ms
        # a new coverage run starts at a device change or at a gap in coverage
        # heartbeats are sorted within a device, so coverage ends are too
        new_run = np.ones(len(ts), dtype=bool)
        new_run[1:] = (d[1:] != d[:-1]) | (ts[1:] >= ends[:-1])
        starts = ts[new_run]
        run_id = np.cumsum(new_run) - 1
        stops = np.zeros(len(starts), dtype=np.int64)
        np.maximum.at(stops, run_id, ends)
        edges = np.concatenate([starts, stops])
        delta = np.concatenate([np.ones(len(starts), np.int64), -np.ones(len(stops), np.int64)])
        uniq, inv = np.unique(edges, return_inverse=True)
        step = np.zeros(len(uniq), dtype=np.int64)
        np.add.at(step, inv, delta)
        values = np.cumsum(step)
        keep = np.r_[True, values[1:] != values[:-1]]
        return cls(uniq[keep], values[keep])

    @classmethod
    def from_signals(cls, signals: SignalList, window_ms: int = ACTIVE_WINDOW_MS) -> NuTrack:
        mask = signals.active_mask
        return cls.from_active(signals.t[mask], signals.device_id[mask], window_ms)

    def __call__(self, t):
        t = np.asarray(t, dtype=np.int64)
        idx = np.searchsorted(self.times, t, side="right") - 1
        out = np.where(idx >= 0, self.values[np.clip(idx, 0, None)], 0)
        return out if out.ndim else int(out)

    def segments(self, a: int, b: int) -> tuple[np.ndarray, np.ndarray]:
        """Split ``(a, b]`` into constant pieces; returns (durations_ms, nu)."""
        inner = self.times[(self.times > a) & (self.times < b)]
        bounds = np.concatenate([[a], inner, [b]])
        return np.diff(bounds), np.atleast_1d(self(bounds[:-1]))


def nu_from_scratch(active_t: np.ndarray, device_id: np.ndarray, t: int, window_ms: int = ACTIVE_WINDOW_MS) -> int:
    """Brute-force ``nu_t``; test oracle for the incremental paths."""
    active_t = np.asarray(active_t)
    mask = (active_t > t - window_ms) & (active_t <= t)
    return len(set(np.asarray(device_id, dtype=object)[mask].tolist()))
