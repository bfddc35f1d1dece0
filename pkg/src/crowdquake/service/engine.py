"""Per-subnetwork detection state and message routing.

Everything here is synchronous and single-writer; the TCP and HTTP front
ends call :meth:`DetectionEngine.ingest` from one event loop.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from pathlib import Path

from pydantic import ValidationError

from ..core import MonotonicityError, NetworkState, SignalEvent, SignalKind, SubnetworkConfig
from ..detectors import DEFAULT_EPSILON, Detector, DetectorConfig
from ..intensity import IntensityModel
from ..threshold import CalibrationReport
from .geometry import ForewarningGeometry
from .schemas import InboundSignal, ServiceConfig, SubnetSettings

log = logging.getLogger(__name__)

WARNING_KEYS = ("subnet", "t_star", "statistic", "nu", "n_window", "lat", "lon")

# reject codes reported back to clients
PARSE_ERROR = "parse_error"
INVALID = "invalid_message"
UNKNOWN_SUBNET = "unknown_subnet"
OUT_OF_ORDER = "out_of_order"


class ConfigError(ValueError):
    pass


def warning_record(subnet: str, t_star: int, statistic: float, nu: int, n_window: int, lat: float, lon: float) -> dict:
    return dict(zip(WARNING_KEYS, (subnet, int(t_star), float(statistic), int(nu), int(n_window), float(lat), float(lon))))


def warning_line(rec: dict) -> str:
    """Canonical JSON line shared by the online feed and offline ``detect``."""
    return json.dumps({k: rec[k] for k in WARNING_KEYS})


@dataclass
class SubnetRuntime:
    subnet: SubnetworkConfig
    model: IntensityModel
    config: DetectorConfig
    tolerance_ms: int = 5000
    state: NetworkState = field(init=False)
    detector: Detector = field(init=False)
    accepted: int = 0
    n_warnings: int = 0

    def __post_init__(self):
        self.state = NetworkState(tolerance_ms=self.tolerance_ms)
        self.detector = Detector(self.model, self.config)

    @property
    def name(self) -> str:
        return self.subnet.name

    def apply(self, kind: str, t: int, device: str) -> dict | None:
        """Apply one signal; returns a warning record when an alarm fires."""
        state = self.state
        if kind == "active":
            state.update(SignalEvent(SignalKind.ACTIVE, t, device))
            self.accepted += 1
            return None
        state.observe(t)
        nu = state.nu_at(max(t, state.clock))
        self.accepted += 1
        out = self.detector.step(t, nu)
        if not out.alarm:
            return None
        self.n_warnings += 1
        return warning_record(self.name, t, out.statistic_value, nu, out.window_count,
                              self.subnet.center_lat, self.subnet.center_lon)


def _resolve(path: str, base: Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else base / p


def build_runtime(s: SubnetSettings, base: Path, tolerance_ms: int = 5000) -> SubnetRuntime:
    try:
        model = IntensityModel.from_dict(s.model) if isinstance(s.model, dict) else IntensityModel.load(_resolve(s.model, base))
    except (OSError, TypeError, ValueError) as exc:
        raise ConfigError(f"subnet {s.name!r}: cannot load model: {exc}") from exc
    h, eps, stat = s.threshold_h, s.epsilon, s.statistic
    if s.calibration is not None:
        try:
            cal = CalibrationReport.load(_resolve(s.calibration, base))
        except (OSError, TypeError, ValueError) as exc:
            raise ConfigError(f"subnet {s.name!r}: cannot load calibration: {exc}") from exc
        h = cal.h if h is None else h
        eps = cal.epsilon if eps is None else eps
        stat = cal.statistic if stat is None else stat
    if h is None or not math.isfinite(h):
        raise ConfigError(f"subnet {s.name!r}: threshold must be finite")
    config = DetectorConfig(
        epsilon_seconds=eps or DEFAULT_EPSILON, threshold_h=h, statistic=stat or "score",
        refractory_seconds=s.refractory_seconds,
    )
    subnet = SubnetworkConfig(s.name, s.center_lat, s.center_lon, s.diameter_km)
    return SubnetRuntime(subnet, model, config, tolerance_ms)


class DetectionEngine:
    """Routes signals to subnetworks and keeps the recent warnings.

    ``recent`` is bounded and drops its oldest entries; detection state is
    never dropped.
    """

    def __init__(self, runtimes: list[SubnetRuntime], feed_size: int = 1000,
                 warning_log: str | Path | None = None, geometry: ForewarningGeometry | None = None):
        self.subnets = {rt.name: rt for rt in runtimes}
        self.recent: deque[dict] = deque(maxlen=feed_size)
        self.rejects: Counter = Counter()
        self.geometry = geometry or ForewarningGeometry()
        self.listeners: list = []
        self._log = open(warning_log, "a", buffering=1) if warning_log else None

    @classmethod
    def from_config(cls, cfg: ServiceConfig, base: str | Path = ".") -> DetectionEngine:
        base = Path(base)
        runtimes = [build_runtime(s, base, cfg.tolerance_ms) for s in cfg.subnets]
        log_path = _resolve(cfg.warning_log, base) if cfg.warning_log else None
        return cls(runtimes, cfg.feed_queue, log_path, ForewarningGeometry(**cfg.geometry.model_dump()))

    @property
    def accepted(self) -> int:
        return sum(rt.accepted for rt in self.subnets.values())

    @property
    def rejected(self) -> int:
        return sum(self.rejects.values())

    def close(self) -> None:
        if self._log is not None:
            self._log.close()
            self._log = None

    def _reject(self, code: str) -> tuple[None, str]:
        self.rejects[code] += 1
        return None, code

    def ingest_line(self, line: str | bytes) -> tuple[dict | None, str | None]:
        """Parse and apply one wire line. Returns ``(warning or None, reject code or None)``."""
        try:
            raw = json.loads(line)
        except (ValueError, UnicodeDecodeError):
            return self._reject(PARSE_ERROR)
        return self.ingest_obj(raw)

    def ingest_obj(self, raw) -> tuple[dict | None, str | None]:
        try:
            msg = raw if isinstance(raw, InboundSignal) else InboundSignal.model_validate(raw)
        except ValidationError:
            return self._reject(INVALID)
        rt = self.subnets.get(msg.subnet)
        if rt is None:
            return self._reject(UNKNOWN_SUBNET)
        try:
            warning = rt.apply(msg.type, msg.t, msg.device)
        except MonotonicityError:
            return self._reject(OUT_OF_ORDER)
        if warning is not None:
            self._publish(warning)
        return warning, None

    def _publish(self, warning: dict) -> None:
        self.recent.append(warning)
        line = warning_line(warning)
        if self._log is not None:
            self._log.write(line + "\n")
        for fn in list(self.listeners):
            try:
                fn(warning)
            except Exception:  # a broken subscriber must not stall ingestion
                log.exception("warning listener failed")
