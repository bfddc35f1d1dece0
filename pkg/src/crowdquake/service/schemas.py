"""Wire and configuration models for the detection service."""

from __future__ import annotations

import math
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..detectors import STATISTICS


class InboundSignal(BaseModel):
    """One line of the ingest stream."""

    model_config = ConfigDict(extra="ignore")

    type: Literal["vibration", "active"]
    t: int = Field(gt=0, description="epoch milliseconds")
    device: str = Field(min_length=1)
    lat: float = Field(ge=-90, le=90)
    lon: float = Field(ge=-180, le=180)
    subnet: str = Field(min_length=1)


class WarningOut(BaseModel):
    subnet: str
    t_star: int
    statistic: float
    nu: int
    n_window: int
    lat: float
    lon: float


class IngestResult(BaseModel):
    accepted: int = 0
    rejected: int = 0
    codes: dict[str, int] = Field(default_factory=dict)
    warnings: list[WarningOut] = Field(default_factory=list)


class GeometryConfig(BaseModel):
    wave_speed_deg_per_s: float = Field(0.0715, gt=0)
    detect_lag_s: float = Field(1.5, ge=0)
    uplink_lag_s: float = Field(0.5, ge=0)
    notify_lag_s: float = Field(0.5, ge=0)


class SubnetSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = Field(min_length=1)
    center_lat: float = Field(ge=-90, le=90)
    center_lon: float = Field(ge=-180, le=180)
    diameter_km: float = Field(gt=0)
    # either a path to model.json or the coefficients inline
    model: str | dict
    # threshold from a calibration.json, or given directly
    calibration: str | None = None
    threshold_h: float | None = None
    epsilon: float | None = None
    statistic: str | None = None
    refractory_seconds: float = Field(300.0, ge=0)

    @field_validator("statistic")
    @classmethod
    def _known_statistic(cls, v):
        if v is not None and v not in STATISTICS:
            raise ValueError(f"statistic must be one of {STATISTICS}")
        return v

    @model_validator(mode="after")
    def _needs_threshold(self):
        if self.calibration is None and self.threshold_h is None:
            raise ValueError(f"subnet {self.name!r}: give calibration or threshold_h")
        if self.threshold_h is not None and math.isnan(self.threshold_h):
            raise ValueError("threshold_h is NaN")
        return self


class ServiceConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    listen: str | None = "127.0.0.1:7070"
    http: str = "127.0.0.1:8080"
    feed: str | None = None
    warning_log: str | None = "warnings.jsonl"
    feed_queue: int = Field(1000, gt=0)
    tolerance_ms: int = Field(5000, ge=0)
    geometry: GeometryConfig = Field(default_factory=GeometryConfig)
    subnets: list[SubnetSettings] = Field(min_length=1)

    @model_validator(mode="after")
    def _unique_names(self):
        names = [s.name for s in self.subnets]
        if len(set(names)) != len(names):
            raise ValueError("subnet names must be unique")
        return self


class SubnetStatus(BaseModel):
    name: str
    nu: int
    clock: int
    threshold_h: float
    epsilon: float
    statistic: str
    accepted: int
    warnings: int
    last_alarm: int | None


class Health(BaseModel):
    status: Literal["ok"] = "ok"
    subnets: int
    accepted: int
    rejected: int
    warnings: int
    ingest_listening: str | None = None


class Forewarning(BaseModel):
    total_delay_s: float
    radius_deg: float
    warning_s: float
    distance_deg: float | None = None
    warning_time_s: float | None = None
