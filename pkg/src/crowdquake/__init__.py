"""Earthquake detection from crowdsourced smartphone vibration signals."""

from .core import (
    MonotonicityError,
    NetworkState,
    NuTrack,
    SignalEvent,
    SignalKind,
    SignalList,
    SubnetworkConfig,
    read_signals_csv,
    write_signals_csv,
)
from .detectors import Detector, DetectorConfig, DetectionOutcome, detect_offline
from .intensity import IntensityModel, fit_glm, integrated_intensity, intensity_at
from .threshold import CalibrationReport, FalseAlarmBudget, GpdTailModel, calibrate, derive_threshold, fit_gpd

__version__ = "0.1.0"

__all__ = [
    "CalibrationReport",
    "Detector",
    "DetectionOutcome",
    "DetectorConfig",
    "FalseAlarmBudget",
    "GpdTailModel",
    "IntensityModel",
    "MonotonicityError",
    "NetworkState",
    "NuTrack",
    "SignalEvent",
    "SignalKind",
    "SignalList",
    "SubnetworkConfig",
    "calibrate",
    "derive_threshold",
    "detect_offline",
    "fit_glm",
    "fit_gpd",
    "integrated_intensity",
    "intensity_at",
    "read_signals_csv",
    "write_signals_csv",
]
