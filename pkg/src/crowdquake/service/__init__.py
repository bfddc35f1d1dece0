from .engine import ConfigError, DetectionEngine, SubnetRuntime, warning_line, warning_record
from .geometry import ForewarningGeometry, forewarning_radius, warning_time_at

__all__ = [
    "ConfigError",
    "DetectionEngine",
    "ForewarningGeometry",
    "SubnetRuntime",
    "forewarning_radius",
    "warning_line",
    "warning_record",
    "warning_time_at",
]
