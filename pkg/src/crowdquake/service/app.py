"""HTTP front end of the detection service.

The app owns one :class:`DetectionEngine`; its lifespan starts the TCP
ingest listener (and the optional warning feed) on the same event loop, so
every signal is applied by a single writer.

Run with ``crowdquake serve config.json`` or
``uvicorn --factory crowdquake.service.app:app_from_env``.
"""

from __future__ import annotations

import json
import os
from contextlib import asynccontextmanager
from pathlib import Path

from fastapi import FastAPI, HTTPException, Query
from pydantic import ValidationError

from .engine import ConfigError, DetectionEngine
from .geometry import forewarning_radius, warning_time_at
from .schemas import Forewarning, Health, IngestResult, ServiceConfig, SubnetStatus, WarningOut
from .tcp import IngestServer

ENV_CONFIG = "CROWDQUAKE_CONFIG"
ENV_LISTEN = "CROWDQUAKE_LISTEN"
ENV_HTTP = "CROWDQUAKE_HTTP"


def load_config(path: str | Path | None = None, env: dict | None = None) -> tuple[ServiceConfig, Path]:
    """Read the JSON config; ``CROWDQUAKE_LISTEN`` / ``CROWDQUAKE_HTTP``
    override the addresses and ``CROWDQUAKE_CONFIG`` the path."""
    env = os.environ if env is None else env
    path = env.get(ENV_CONFIG) or path
    if not path:
        raise ConfigError(f"no config file given (argument or ${ENV_CONFIG})")
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if env.get(ENV_LISTEN):
        raw["listen"] = env[ENV_LISTEN]
    if env.get(ENV_HTTP):
        raw["http"] = env[ENV_HTTP]
    try:
        cfg = ServiceConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, path.parent


def create_app(engine: DetectionEngine, listen: str | None = None, feed: str | None = None, feed_queue: int = 1000) -> FastAPI:
    server = IngestServer(engine, feed_queue)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        await server.start(listen, feed)
        try:
            yield
        finally:
            await server.stop()
            engine.close()

    app = FastAPI(title="crowdquake detection service", lifespan=lifespan)
    app.state.engine = engine
    app.state.ingest = server

    @app.get("/health", response_model=Health)
    def health():
        addr = server.ingest_address
        return Health(
            subnets=len(engine.subnets), accepted=engine.accepted, rejected=engine.rejected,
            warnings=sum(rt.n_warnings for rt in engine.subnets.values()),
            ingest_listening=f"{addr[0]}:{addr[1]}" if addr else None,
        )

    @app.get("/subnets", response_model=list[SubnetStatus])
    def subnets():
        out = []
        for rt in engine.subnets.values():
            st = rt.state
            out.append(SubnetStatus(
                name=rt.name, nu=st.nu_at(st.clock), clock=st.clock,
                threshold_h=rt.config.threshold_h, epsilon=rt.config.epsilon_seconds,
                statistic=rt.config.statistic, accepted=rt.accepted, warnings=rt.n_warnings,
                last_alarm=rt.detector.last_alarm,
            ))
        return out

    @app.get("/warnings", response_model=list[WarningOut])
    def warnings(limit: int = Query(100, ge=1, le=10_000), subnet: str | None = None):
        items = [w for w in engine.recent if subnet is None or w["subnet"] == subnet]
        return items[-limit:]

    @app.post("/ingest", response_model=IngestResult)
    def ingest(messages: list[dict]):
        # same path as the socket; a bad item is rejected on its own
        res = IngestResult()
        for raw in messages:
            warning, code = engine.ingest_obj(raw)
            if code is None:
                res.accepted += 1
            else:
                res.rejected += 1
                res.codes[code] = res.codes.get(code, 0) + 1
            if warning is not None:
                res.warnings.append(WarningOut(**warning))
        return res

    @app.get("/forewarning", response_model=Forewarning)
    def forewarning(
        detection_delay_s: float = Query(0.0, ge=0),
        warning_s: float = 0.0,
        distance_deg: float | None = Query(None, ge=0),
    ):
        geom = engine.geometry
        total = geom.total_delay_s + detection_delay_s
        radius = forewarning_radius(geom, total, warning_s)
        if radius < 0:
            raise HTTPException(422, "forewarning time earlier than the shaking at the epicentre")
        wt = None if distance_deg is None else warning_time_at(geom, total, distance_deg)
        return Forewarning(total_delay_s=total, radius_deg=radius, warning_s=warning_s,
                           distance_deg=distance_deg, warning_time_s=wt)

    return app


def app_from_config(path: str | Path | None = None) -> tuple[FastAPI, ServiceConfig]:
    cfg, base = load_config(path)
    engine = DetectionEngine.from_config(cfg, base)
    return create_app(engine, cfg.listen, cfg.feed, cfg.feed_queue), cfg


def app_from_env() -> FastAPI:
    return app_from_config()[0]
