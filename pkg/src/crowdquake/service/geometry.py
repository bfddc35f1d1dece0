"""Forewarning circles around an epicentre.

Waves travel isotropically at a fixed angular speed, so a warning issued
``total_delay`` seconds after the origin time reaches a person at angular
distance ``d`` with ``d / speed - total_delay`` seconds to spare.
"""

from __future__ import annotations

from dataclasses import dataclass

WAVE_SPEED_DEG_PER_S = 0.0715


@dataclass(frozen=True)
class ForewarningGeometry:
    wave_speed_deg_per_s: float = WAVE_SPEED_DEG_PER_S
    detect_lag_s: float = 1.5  # first phone senses shaking
    uplink_lag_s: float = 0.5  # phone to server
    notify_lag_s: float = 0.5  # server to users
    detection_delay_s: float = 0.0  # server-side detection delay, measured

    def __post_init__(self):
        if self.wave_speed_deg_per_s <= 0:
            raise ValueError("wave speed must be positive")
        for name in ("detect_lag_s", "uplink_lag_s", "notify_lag_s", "detection_delay_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def total_delay_s(self) -> float:
        return self.detect_lag_s + self.uplink_lag_s + self.detection_delay_s + self.notify_lag_s


def forewarning_radius(geom: ForewarningGeometry, total_delay_s: float, warning_s: float = 0.0) -> float:
    """Angular radius (degrees) of the circle with forewarning time ``warning_s``."""
    if total_delay_s < 0:
        raise ValueError("total delay must be nonnegative")
    return geom.wave_speed_deg_per_s * (total_delay_s + warning_s)


def warning_time_at(geom: ForewarningGeometry, total_delay_s: float, distance_deg: float) -> float:
    """Seconds of warning at ``distance_deg``; negative once shaking has arrived."""
    if distance_deg < 0:
        raise ValueError("distance must be nonnegative")
    return distance_deg / geom.wave_speed_deg_per_s - total_delay_s
