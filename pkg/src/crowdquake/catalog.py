"""Building the no-earthquake list from a raw signal list and a seismic catalog."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .core import SignalList, SubnetworkConfig

EARTH_RADIUS_KM = 6371.0
DEFAULT_RADIUS_KM = 1000.0
DEFAULT_REMOVAL_SECONDS = 300.0
# stand-in for "likely felt": the catalog gives no felt flag
DEFAULT_MIN_MAGNITUDE = 3.0

CATALOG_CSV_COLUMNS = ["t_ms", "lat", "lon", "depth_km", "mag", "scale"]


class CatalogCoverageWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CatalogEvent:
    t: int
    lat: float
    lon: float
    depth_km: float
    magnitude: float
    scale: str = "M"

    def __post_init__(self):
        if not math.isfinite(self.magnitude):
            raise ValueError("magnitude must be finite")
        if self.depth_km < 0:
            raise ValueError("depth must be nonnegative")


def haversine_km(a: tuple[float, float], b: tuple[float, float]) -> float:
    lat1, lon1 = map(math.radians, a)
    lat2, lon2 = map(math.radians, b)
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def read_catalog_csv(path: str | Path) -> list[CatalogEvent]:
    df = pd.read_csv(path, keep_default_na=False, dtype={"scale": str})
    missing = set(CATALOG_CSV_COLUMNS) - set(df.columns)
    if missing:
        raise ValueError(f"catalog CSV missing columns: {sorted(missing)}")
    return [
        CatalogEvent(int(r.t_ms), float(r.lat), float(r.lon), float(r.depth_km), float(r.mag), str(r.scale))
        for r in df.itertuples(index=False)
    ]


def qualifying_events(
    catalog: list[CatalogEvent],
    subnet: SubnetworkConfig,
    radius_km: float = DEFAULT_RADIUS_KM,
    min_magnitude: float = DEFAULT_MIN_MAGNITUDE,
) -> list[CatalogEvent]:
    center = (subnet.center_lat, subnet.center_lon)
    return [
        ev for ev in catalog
        if ev.magnitude >= min_magnitude and haversine_km(center, (ev.lat, ev.lon)) <= radius_km
    ]


def removal_windows(events: list[CatalogEvent], removal_seconds: float = DEFAULT_REMOVAL_SECONDS) -> list[tuple[int, int]]:
    """Closed windows ``[t, t + removal]``, merged where they overlap."""
    span = int(round(removal_seconds * 1000))
    merged: list[list[int]] = []
    for t in sorted(ev.t for ev in events):
        if merged and t <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], t + span)
        else:
            merged.append([t, t + span])
    return [(a, b) for a, b in merged]


def removal_mask(times: np.ndarray, windows: list[tuple[int, int]]) -> np.ndarray:
    times = np.asarray(times)
    mask = np.zeros(len(times), dtype=bool)
    for a, b in windows:
        mask[np.searchsorted(times, a, side="left"):np.searchsorted(times, b, side="right")] = True
    return mask


def build_l0(
    raw: SignalList,
    catalog: list[CatalogEvent],
    subnet: SubnetworkConfig,
    radius_km: float = DEFAULT_RADIUS_KM,
    removal_seconds: float = DEFAULT_REMOVAL_SECONDS,
    min_magnitude: float = DEFAULT_MIN_MAGNITUDE,
    catalog_frame: tuple[int, int] | None = None,
) -> SignalList:
    """Drop every vibration signal received from the start of a nearby
    catalog event up to ``removal_seconds`` later. Active signals are kept."""
    if catalog_frame is None and catalog:
        catalog_frame = (min(ev.t for ev in catalog), max(ev.t for ev in catalog))
    if len(raw) and (
        catalog_frame is None or catalog_frame[0] > raw.time_frame[0] or catalog_frame[1] < raw.time_frame[1]
    ):
        warnings.warn("catalog does not cover the whole signal time frame", CatalogCoverageWarning, stacklevel=2)
    windows = removal_windows(qualifying_events(catalog, subnet, radius_km, min_magnitude), removal_seconds)
    drop = removal_mask(raw.t, windows) & raw.vibration_mask
    return raw.select(~drop)
