"""Command-line entry points.

Batch subcommands (clean, fit, calibrate, detect, simulate, sweep-eps, synth)
run in-process on files. ``serve`` starts the detection service; ``replay``
and ``status`` are thin clients of a running one.

Exit codes: 0 ok, 2 usage or configuration error, 3 numeric failure.
"""

from __future__ import annotations

import json
import logging
import math
import sys
import warnings
from pathlib import Path

import click
import numpy as np
import pandas as pd

EXIT_CONFIG = 2
EXIT_NUMERIC = 3

_UNITS = {"s": 1, "m": 60, "h": 3600, "d": 86_400, "w": 604_800, "y": 31_536_000}


def parse_duration(text: str) -> float:
    """``"3600"``, ``"30d"``, ``"1y"`` -> seconds (a year is 365 days)."""
    text = str(text).strip().lower()
    unit = _UNITS.get(text[-1:]) if text[-1:].isalpha() else 1
    if unit is None:
        raise click.BadParameter(f"unknown unit in {text!r}; use one of {''.join(_UNITS)}")
    number = text[:-1] if text[-1:].isalpha() else text
    try:
        value = float(number) * unit
    except ValueError:
        raise click.BadParameter(f"not a duration: {text!r}") from None
    if not value > 0:
        raise click.BadParameter("duration must be positive")
    return value


def parse_floats(text: str | None, default):
    if text is None:
        return tuple(default)
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {text!r}") from None


def fail(message: str, code: int) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_subnet(path: str | None, name: str | None = None):
    from .core import SubnetworkConfig

    if path is None:
        return None
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        fail(f"cannot read subnet config {path}: {exc}", EXIT_CONFIG)
    if "subnets" in raw:  # a service config: pick the named entry
        entries = {s["name"]: s for s in raw["subnets"]}
        if name is None and len(entries) == 1:
            name = next(iter(entries))
        if name not in entries:
            fail(f"subnet {name!r} not in {path}", EXIT_CONFIG)
        raw = entries[name]
    try:
        tf = raw.get("time_frame")
        return SubnetworkConfig(
            raw["name"], float(raw["center_lat"]), float(raw["center_lon"]), float(raw["diameter_km"]),
            tuple(tf) if tf else None,
        )
    except (KeyError, TypeError, ValueError) as exc:
        fail(f"bad subnet config {path}: {exc}", EXIT_CONFIG)


def _read_signals(path: str):
    from .core import read_signals_csv

    try:
        return read_signals_csv(path)
    except (OSError, ValueError, KeyError) as exc:
        fail(f"cannot read signal list {path}: {exc}", EXIT_CONFIG)


def _read_model(path: str):
    from .intensity import IntensityModel

    try:
        return IntensityModel.load(path)
    except (OSError, ValueError, TypeError) as exc:
        fail(f"cannot read model {path}: {exc}", EXIT_CONFIG)


def _read_calibration(path: str):
    from .threshold import CalibrationReport

    try:
        return CalibrationReport.load(path)
    except (OSError, ValueError, TypeError) as exc:
        fail(f"cannot read calibration {path}: {exc}", EXIT_CONFIG)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
@click.version_option(package_name="artifact")
def main(verbose: bool):
    """Crowdsourced earthquake detection: pipeline tools and service."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("raw_csv", type=click.Path(exists=True, dir_okay=False))
@click.argument("catalog_csv", type=click.Path(exists=True, dir_okay=False))
@click.option("--subnet-config", "subnet_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="JSON with name, center_lat, center_lon, diameter_km.")
@click.option("--subnet", "subnet_name", help="Entry to use when the config lists several subnets.")
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True)
@click.option("--radius-km", default=1000.0, show_default=True)
@click.option("--removal", "removal", default="300", show_default=True, help="Removal window after each event.")
@click.option("--min-magnitude", default=3.0, show_default=True)
def clean(raw_csv, catalog_csv, subnet_path, subnet_name, output, radius_km, removal, min_magnitude):
    """Drop earthquake-induced vibrations to build the no-earthquake list.

    Kept rows are copied verbatim, so a run that removes nothing reproduces
    the input byte for byte.
    """
    from .catalog import qualifying_events, read_catalog_csv, removal_windows

    subnet = _load_subnet(subnet_path, subnet_name)
    try:
        catalog = read_catalog_csv(catalog_csv)
        df = pd.read_csv(raw_csv, usecols=["kind", "t_ms"], dtype={"kind": str})
    except (OSError, ValueError) as exc:
        fail(str(exc), EXIT_CONFIG)
    with open(raw_csv, newline="") as fh:
        lines = fh.read().splitlines(keepends=True)
    if len(lines) - 1 < len(df):
        fail(f"{raw_csv}: row count does not match line count (quoted newlines are not supported)", EXIT_CONFIG)

    events = qualifying_events(catalog, subnet, radius_km, min_magnitude)
    windows = removal_windows(events, parse_duration(removal))
    t = df["t_ms"].to_numpy(np.int64)
    if windows:
        starts = np.array([a for a, _ in windows], dtype=np.int64)
        ends = np.array([b for _, b in windows], dtype=np.int64)
        k = np.searchsorted(starts, t, side="right") - 1
        inside = (k >= 0) & (t <= ends[np.maximum(k, 0)])
    else:
        inside = np.zeros(len(t), dtype=bool)
    drop = inside & (df["kind"].str.strip().str.lower() == "vibration").to_numpy()

    with open(output, "w", newline="") as out:
        out.write(lines[0])
        for line, d in zip(lines[1:], drop):
            if not d:
                out.write(line)
    n_vib = int((df["kind"].str.strip().str.lower() == "vibration").sum())
    click.echo(f"raw signals: {len(df)} ({n_vib} vibration)")
    click.echo(f"qualifying catalog events: {len(events)}; merged removal windows: {len(windows)}")
    click.echo(f"removed vibration signals: {int(drop.sum())}")
    click.echo(f"|L0| = {n_vib - int(drop.sum())} vibration signals -> {output}")


@main.command()
@click.argument("l0_csv", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True, help="model.json")
@click.option("--bin", "bin_seconds", default=60.0, show_default=True, help="Bin width in seconds.")
@click.option("--subnet", "subnet_name", default=None)
def fit(l0_csv, output, bin_seconds, subnet_name):
    """Fit log lambda0 = beta0 + beta1 * nu by Poisson maximum likelihood."""
    from .intensity import ConvergenceError, DataError, NoDataError, fit_glm

    signals = _read_signals(l0_csv)
    try:
        model = fit_glm(signals, bin_seconds=bin_seconds, subnetwork=subnet_name)
    except (ConvergenceError, DataError, NoDataError) as exc:
        fail(str(exc), EXIT_NUMERIC)
    model.save(output)
    per_min = model.beta0 + math.log(60.0)
    click.echo(f"beta0 = {model.beta0:.6f} (SE {model.se_beta0:.2e})  [per second; {per_min:.4f} per minute]")
    click.echo(f"beta1 = {model.beta1:.6g} (SE {model.se_beta1:.2e})")
    click.echo(f"model -> {output}")


@main.command("calibrate")
@click.argument("l0_csv", type=click.Path(exists=True, dir_okay=False))
@click.argument("model_json", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True, help="calibration.json")
@click.option("--epsilon", default=30.0, show_default=True, help="Window length in seconds.")
@click.option("--delta-t", "delta_t", default="1y", show_default=True, help="One false alarm per this period.")
@click.option("--p0", default=0.99, show_default=True)
@click.option("--statistic", default="score", show_default=True,
              type=click.Choice(["score", "score_exact", "score_sup", "glr", "glr_sup"]))
@click.option("--seed", default=0, show_default=True, help="Seed of the continuity correction.")
@click.option("--raw-tail", is_flag=True, help="Fit the uncorrected lattice-valued statistic.")
def calibrate_cmd(l0_csv, model_json, output, epsilon, delta_t, p0, statistic, seed, raw_tail):
    """Alarm threshold h from the generalized Pareto tail of the null statistic."""
    from .intensity import DataError
    from .threshold import BudgetError, GpdFitWarning, calibrate

    signals = _read_signals(l0_csv)
    model = _read_model(model_json)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", GpdFitWarning)
        try:
            report = calibrate(signals, model, epsilon, parse_duration(delta_t), p0, statistic,
                               continuity_seed=None if raw_tail else seed)
        except (BudgetError, DataError) as exc:
            fail(str(exc), EXIT_NUMERIC)
    for w in caught:
        click.echo(f"warning: {w.message}", err=True)
    report.save(output)
    click.echo(f"mean inter-arrival = {report.mean_interarrival:.2f} s; alpha = {report.alpha:.4g}")
    click.echo(f"p1 = {report.p1:.5f}")
    click.echo(f"u = {report.u:.4f}; xi = {report.xi:.4f}; sigma = {report.sigma:.4f} ({report.n_exceedances} exceedances, {report.fit_method})")
    click.echo(f"h = {report.h:.4f}")
    click.echo(f"calibration -> {output}")


@main.command()
@click.argument("signals_csv", type=click.Path(exists=True, dir_okay=False))
@click.argument("model_json", type=click.Path(exists=True, dir_okay=False))
@click.argument("calibration_json", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True, help="detections.jsonl")
@click.option("--subnet-config", "subnet_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--subnet", "subnet_name", default=None)
@click.option("--refractory", default=300.0, show_default=True, help="Seconds before a new alarm.")
def detect(signals_csv, model_json, calibration_json, output, subnet_path, subnet_name, refractory):
    """Replay a signal list off-line and write one warning line per alarm."""
    from .core import NuTrack
    from .detectors import DetectorConfig, NumericError, detect_offline
    from .service.engine import warning_line, warning_record

    subnet = _load_subnet(subnet_path, subnet_name)
    signals = _read_signals(signals_csv)
    model = _read_model(model_json)
    cal = _read_calibration(calibration_json)
    config = DetectorConfig(epsilon_seconds=cal.epsilon, threshold_h=cal.h, statistic=cal.statistic,
                            refractory_seconds=refractory)
    times = signals.vibration_times()
    nus = NuTrack.from_signals(signals)(times)
    try:
        alarms = detect_offline(times, np.asarray(nus, dtype=np.int64), model, config)
    except NumericError as exc:
        fail(str(exc), EXIT_NUMERIC)
    with open(output, "w") as fh:
        for a in alarms:
            rec = warning_record(subnet.name, a.t_star, a.statistic, a.nu, a.n_window, subnet.center_lat, subnet.center_lon)
            fh.write(warning_line(rec) + "\n")
    click.echo(f"{len(times)} vibration signals replayed; {len(alarms)} alarm(s) -> {output}")


def _background(path: str | None, synthetic_days: float | None, seed: int):
    from .simulator import santiago_background

    if path is not None:
        return _read_signals(path)
    return santiago_background(seed=seed, days=synthetic_days)


_bg_options = [
    click.option("--background", "background", type=click.Path(exists=True, dir_okay=False),
                 help="No-earthquake list CSV; default is the synthetic Santiago-like stream."),
    click.option("--synthetic-days", type=float, default=None, help="Length of the synthetic stream (default: full frame)."),
    click.option("--model", "model_json", type=click.Path(exists=True, dir_okay=False),
                 help="model.json; default fits the background."),
    click.option("--phis", default=None, help="Comma-separated report fractions (default: the 17-row grid)."),
    click.option("--sigmas", default=None, help="Comma-separated spreads in seconds (default: the 7-column grid)."),
    click.option("--n-sim", default=1000, show_default=True),
    click.option("--seed", default=0, show_default=True),
    click.option("--workers", default=1, show_default=True),
    click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True),
]


def bg_options(fn):
    for opt in reversed(_bg_options):
        fn = opt(fn)
    return fn


def _prepare(background, synthetic_days, model_json, seed):
    from .intensity import ConvergenceError, DataError, NoDataError, fit_glm
    from .simulator import PreparedStream

    signals = _background(background, synthetic_days, seed)
    if model_json:
        model = _read_model(model_json)
    else:
        try:
            model = fit_glm(signals)
        except (ConvergenceError, DataError, NoDataError) as exc:
            fail(str(exc), EXIT_NUMERIC)
    return signals, model, PreparedStream.from_signals(signals)


def _threshold(signals, model, epsilon, cal_path, delta_t, seed):
    from .intensity import DataError
    from .threshold import BudgetError, calibrate

    if cal_path:
        cal = _read_calibration(cal_path)
        if not math.isclose(cal.epsilon, epsilon):
            fail(f"{cal_path} was calibrated for epsilon={cal.epsilon}, not {epsilon}", EXIT_CONFIG)
        return cal.h
    try:
        return calibrate(signals, model, epsilon, parse_duration(delta_t), continuity_seed=seed).h
    except (BudgetError, DataError) as exc:
        fail(str(exc), EXIT_NUMERIC)


@main.command()
@bg_options
@click.option("--epsilon", default=30.0, show_default=True)
@click.option("--calibration", "cal_path", type=click.Path(exists=True, dir_okay=False),
              help="calibration.json; default calibrates on the background.")
@click.option("--delta-t", "delta_t", default="1y", show_default=True)
def simulate(background, synthetic_days, model_json, phis, sigmas, n_sim, seed, workers, out_dir, epsilon, cal_path, delta_t):
    """Detection fraction and delay over a (phi, sigma) grid.

    Writes fraction.csv and delay.csv (rows phi, columns sigma) and
    runs.jsonl with one record per simulated earthquake.
    """
    from .simulator import PAPER_PHI, PAPER_SIGMA, ConfigurationError, run_grid, write_runs_jsonl, write_table_csv

    signals, model, stream = _prepare(background, synthetic_days, model_json, seed)
    h = _threshold(signals, model, epsilon, cal_path, delta_t, seed)
    try:
        grid = run_grid(stream, model, parse_floats(phis, PAPER_PHI), parse_floats(sigmas, PAPER_SIGMA),
                        n_sim, epsilon, h, seed=seed, workers=workers)
    except (ConfigurationError, ValueError) as exc:
        fail(str(exc), EXIT_CONFIG)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_table_csv(grid, "fraction", out / "fraction.csv")
    write_table_csv(grid, "delay", out / "delay.csv")
    write_runs_jsonl(grid, out / "runs.jsonl")
    click.echo(f"h = {h:.4f}; {len(grid.phis)}x{len(grid.sigmas)} cells x {n_sim} runs -> {out}")


@main.command("sweep-eps")
@bg_options
@click.option("--epsilons", default=None, help="Comma-separated window lengths (default 5,10,20,30,40).")
@click.option("--calibration", "cal_paths", multiple=True, type=click.Path(exists=True, dir_okay=False),
              help="calibration.json per epsilon (repeatable); missing ones are calibrated on the background.")
@click.option("--delta-t", "delta_t", default="1y", show_default=True)
def sweep_eps(background, synthetic_days, model_json, phis, sigmas, n_sim, seed, workers, out_dir, epsilons, cal_paths, delta_t):
    """Mean delay against epsilon and detection fraction against sigma."""
    from .simulator import (
        PAPER_EPSILONS, PAPER_PHI, PAPER_SIGMA, ConfigurationError, sweep_epsilon, write_sweep_files, write_table_csv,
    )

    signals, model, stream = _prepare(background, synthetic_days, model_json, seed)
    eps_list = parse_floats(epsilons, PAPER_EPSILONS)
    given = {}
    for p in cal_paths:
        cal = _read_calibration(p)
        given[float(cal.epsilon)] = cal.h
    thresholds = {e: given[e] if e in given else _threshold(signals, model, e, None, delta_t, seed) for e in eps_list}
    try:
        sweep = sweep_epsilon(stream, model, parse_floats(phis, PAPER_PHI), parse_floats(sigmas, PAPER_SIGMA),
                              n_sim, thresholds, eps_list, seed=seed, workers=workers)
    except (ConfigurationError, ValueError) as exc:
        fail(str(exc), EXIT_CONFIG)
    out = Path(out_dir)
    write_sweep_files(sweep, out)
    for eps, grid in sweep.grids.items():
        write_table_csv(grid, "fraction", out / f"fraction_eps{eps:g}.csv")
        write_table_csv(grid, "delay", out / f"delay_eps{eps:g}.csv")
    with open(out / "thresholds.json", "w") as fh:
        json.dump({f"{e:g}": h for e, h in thresholds.items()}, fh, indent=2)
    for eps, d in sweep.delay_vs_epsilon().items():
        click.echo(f"epsilon {eps:>4g} s: h = {thresholds[eps]:.4f}, mean delay {d:.2f} s")
    click.echo(f"-> {out}")


@main.command()
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True)
@click.option("--days", type=float, default=None, help="Length in days (default: the full Santiago frame).")
@click.option("--seed", default=0, show_default=True)
def synth(output, days, seed):
    """Write a synthetic Santiago-like no-earthquake list."""
    from .core import write_signals_csv
    from .simulator import santiago_background

    signals = santiago_background(seed=seed, days=days)
    write_signals_csv(signals, output)
    click.echo(f"{len(signals)} signals ({int(signals.vibration_mask.sum())} vibration) -> {output}")


@main.command()
@click.argument("config_json", type=click.Path(dir_okay=False), required=False)
@click.option("--listen", default=None, help="Ingest address host:port (overrides config).")
@click.option("--http", "http_addr", default=None, help="HTTP address host:port (overrides config).")
def serve(config_json, listen, http_addr):
    """Run the detection service (TCP ingest + HTTP API)."""
    import uvicorn

    from .service.app import create_app, load_config
    from .service.engine import ConfigError, DetectionEngine
    from .service.tcp import parse_address

    try:
        cfg, base = load_config(config_json)
        if listen:
            cfg.listen = listen
        if http_addr:
            cfg.http = http_addr
        host, port = parse_address(cfg.http)
        engine = DetectionEngine.from_config(cfg, base)
    except (ConfigError, ValueError) as exc:
        fail(str(exc), EXIT_CONFIG)
    app = create_app(engine, cfg.listen, cfg.feed, cfg.feed_queue)
    uvicorn.run(app, host=host, port=port, log_level="info")


@main.command()
@click.argument("signals_csv", type=click.Path(exists=True, dir_okay=False))
@click.option("--to", "address", default="127.0.0.1:7070", show_default=True, help="Ingest address host:port.")
@click.option("--subnet", "subnet_name", required=True)
def replay(signals_csv, address, subnet_name):
    """Stream a signal list to a running service, in time order."""
    from .service.tcp import parse_address, send_lines

    signals = _read_signals(signals_csv)
    host, port = parse_address(address)
    kinds = np.where(signals.kind == 0, "active", "vibration")

    def lines():
        for k, t, d, la, lo in zip(kinds.tolist(), signals.t.tolist(), signals.device_id.tolist(),
                                   signals.lat.tolist(), signals.lon.tolist()):
            yield json.dumps({"type": k, "t": t, "device": d, "lat": la, "lon": lo, "subnet": subnet_name})

    try:
        ack = send_lines(host, port, lines())
    except OSError as exc:
        fail(f"cannot reach {address}: {exc}", EXIT_CONFIG)
    click.echo(json.dumps(ack))


@main.command()
@click.option("--http", "http_addr", default="127.0.0.1:8080", show_default=True)
@click.option("--warnings", "n_warnings", default=0, help="Also list the last N warnings.")
def status(http_addr, n_warnings):
    """Print health and per-subnetwork state of a running service."""
    from urllib.error import URLError
    from urllib.request import urlopen

    base = f"http://{http_addr}"
    try:
        for path in ["/health", "/subnets"] + ([f"/warnings?limit={n_warnings}"] if n_warnings else []):
            with urlopen(base + path, timeout=10) as resp:
                click.echo(json.dumps(json.load(resp), indent=2))
    except URLError as exc:
        fail(f"cannot reach {base}: {exc}", EXIT_CONFIG)


if __name__ == "__main__":
    main()
