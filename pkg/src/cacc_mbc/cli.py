"""Command-line front end: ``run``, ``sweep`` and ``pred-stats``.

Scenarios are described by TOML files with the sections ``[scenario]``,
``[vehicle]``, ``[mpc]``, ``[channel]`` and ``[sweep]`` (see ``configs/``).
Every command writes its artifacts plus a ``manifest.json`` that records the
resolved configuration and a SHA-256 checksum per emitted file.

Exit codes: 0 success, 1 configuration or input error, 2 collision flagged.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .sim import (
    ConfigError,
    EmptySample,
    ScenarioConfig,
    prediction_error_stats,
    run_scenario,
    run_sweep,
    summarize_cell,
    trial_seeds,
)
from .smpc import MpcConfig
from .vehicle import VehicleParams

LOG = logging.getLogger("cacc_mbc")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_COLLISION = 2

TRACE_COLUMNS = (
    "tick", "t_s_elapsed", "vehicle", "x_m", "v_mps", "a_mps2", "u_mps2",
    "gap_m", "desired_gap_m", "mode", "n_links_received",
)
SWEEP_COLUMNS = (
    "per", "r", "trials", "mean_emergency_s", "std_emergency_s", "mean_min_gap_m",
    "collision_count", "mean_emergency_per_vehicle_s",
)
PRED_COLUMNS = ("horizon_step", "source", "mean_abs_err_mps", "p95_abs_err_mps")

_SCENARIO_KEYS = {
    "n_vehicles", "duration_s", "t_s", "r", "per", "trial_seed", "cruise_speed",
    "leader_u_min", "gap_source", "leader_profile", "log_packets",
}
_CHANNEL_KEYS = {"per": "per", "seed": "trial_seed"}
_VEHICLE_KEYS = {f.name for f in dataclasses.fields(VehicleParams)}
_MPC_KEYS = {f.name for f in dataclasses.fields(MpcConfig)} - {"r", "t_s"}
_SWEEP_KEYS = {"pers", "rs", "trials", "base_seed"}
_SECTIONS = {
    "scenario": _SCENARIO_KEYS,
    "vehicle": _VEHICLE_KEYS,
    "mpc": _MPC_KEYS,
    "channel": set(_CHANNEL_KEYS),
    "sweep": _SWEEP_KEYS,
}


@dataclass(frozen=True)
class SweepConfig:
    pers: tuple = (0.0, 0.2, 0.4, 0.6)
    rs: tuple = (1, 9)
    trials: int = 20
    base_seed: int = 0

    def __post_init__(self):
        if not self.pers or not self.rs:
            raise ConfigError("sweep axes must not be empty")
        if any(not 0.0 <= p <= 1.0 for p in self.pers):
            raise ConfigError("sweep pers must lie in [0, 1]")
        if any(int(r) != r or r < 1 for r in self.rs):
            raise ConfigError("sweep rs must be positive integers")
        if self.trials < 1:
            raise ConfigError("sweep trials must be at least 1")


class ConfigFileError(Exception):
    """A configuration problem tied to a location in the source file."""

    def __init__(self, path, message, line=None):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line else self.path
        super().__init__(f"{where}: {message}")


def _line_of(text: str, section: str | None, key: str | None = None) -> int | None:
    """1-based line of ``key`` inside ``[section]`` (or of the header itself)."""
    current = None
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line.strip("[] ")
            if key is None and current == section:
                return number
            continue
        if key is not None and current == section and line.split("=", 1)[0].strip() == key:
            return number
    return None


def load_config(path) -> tuple[ScenarioConfig, SweepConfig]:
    """Parse and validate a scenario file; raises ``ConfigFileError``."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigFileError(path, f"cannot read config: {exc.strerror}") from None
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigFileError(path, f"malformed TOML: {exc}", line) from None

    for section, body in data.items():
        if section not in _SECTIONS:
            raise ConfigFileError(path, f"unknown section [{section}]", _line_of(text, section))
        if not isinstance(body, dict):
            raise ConfigFileError(path, f"[{section}] must be a table", _line_of(text, None, section))
        for key in body:
            if key not in _SECTIONS[section]:
                raise ConfigFileError(path, f"unknown key '{key}' in [{section}]", _line_of(text, section, key))

    scenario = dict(data.get("scenario", {}))
    for key, target in _CHANNEL_KEYS.items():
        if key in data.get("channel", {}):
            if target in scenario:
                raise ConfigFileError(
                    path, f"'{target}' set in both [scenario] and [channel]", _line_of(text, "channel", key)
                )
            scenario[target] = data["channel"][key]
    t_s = scenario.get("t_s", ScenarioConfig.t_s)
    mpc = dict(data.get("mpc", {}), t_s=t_s)

    def build(section, factory):
        try:
            return factory()
        except (TypeError, ValueError) as exc:
            raise ConfigFileError(path, f"invalid [{section}]: {exc}", _line_of(text, section)) from None

    cfg = build("scenario", lambda: ScenarioConfig.from_dict(
        dict(scenario, vehicle=data.get("vehicle", {}), mpc=mpc)))
    sweep_data = data.get("sweep", {})
    sweep = build("sweep", lambda: SweepConfig(
        pers=tuple(float(p) for p in sweep_data.get("pers", SweepConfig.pers)),
        rs=tuple(int(r) for r in sweep_data.get("rs", SweepConfig.rs)),
        trials=int(sweep_data.get("trials", SweepConfig.trials)),
        base_seed=int(sweep_data.get("base_seed", SweepConfig.base_seed)),
    ))
    return cfg, sweep


def _fmt(value) -> str:
    """Full-precision text for a CSV field."""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return "%.17g" % float(value)


def _csv_bytes(columns, rows) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([v if isinstance(v, str) else _fmt(v) for v in row])
    return buf.getvalue().encode()


def trace_rows(result):
    n_ticks, n_veh = result.x.shape
    for k in range(n_ticks):
        for n in range(n_veh):
            yield (
                k, result.time[k], n, result.x[k, n], result.v[k, n], result.a[k, n], result.u[k, n],
                result.gap[k, n], result.desired_gap[k, n], int(result.mode[k, n]), int(result.received[k, n]),
            )


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def _sha256(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def _write_outputs(out_dir: Path, files: dict, manifest: dict) -> None:
    """Write all artifacts, then the manifest listing their checksums."""
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest, artifacts={name: _sha256(data) for name, data in files.items()})
    for name, data in files.items():
        tmp = out_dir / (name + ".tmp")
        tmp.write_bytes(data)
        tmp.replace(out_dir / name)
    (out_dir / "manifest.json").write_bytes(_json_bytes(manifest))


def _manifest(command, config_path, out_dir, cfg, sweep, started) -> dict:
    config = {"scenario": cfg.to_dict()}
    if sweep is not None:
        config["sweep"] = dataclasses.asdict(sweep)
    return {
        "command": command,
        "config_path": str(config_path),
        "output_dir": str(out_dir),
        "run_id": _sha256(_json_bytes(config))[:12],
        "version": __version__,
        "wall_clock_s": round(time.monotonic() - started, 3),
        "config": config,
    }


def config_from_manifest(manifest: dict) -> ScenarioConfig:
    return ScenarioConfig.from_dict(manifest["config"]["scenario"])


def cmd_run(args) -> int:
    started = time.monotonic()
    cfg, _ = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, trial_seed=args.seed)
    result = run_scenario(cfg)
    files = {
        "trace.csv": _csv_bytes(TRACE_COLUMNS, trace_rows(result)),
        "metrics.json": _json_bytes(result.metrics()),
    }
    if result.packet_log is not None:
        files["packets.csv"] = _csv_bytes(result.packet_log.columns, result.packet_log.rows)
    _write_outputs(Path(args.out), files, _manifest("run", args.config, args.out, cfg, None, started))
    LOG.info("emergency braking total %.1f s, collision %s", result.emergency_total_s, result.collision)
    return EXIT_COLLISION if result.collision else EXIT_OK


def _cell_key(cfg: ScenarioConfig, per: float, r: int, seeds) -> str:
    body = {"scenario": dataclasses.replace(cfg, per=per, r=r, trial_seed=0).to_dict(), "seeds": list(seeds)}
    return _sha256(_json_bytes(body))


def cmd_sweep(args) -> int:
    started = time.monotonic()
    cfg, sweep = load_config(args.config)
    if args.seed is not None:
        sweep = dataclasses.replace(sweep, base_seed=args.seed)
    out_dir = Path(args.out)
    cell_dir = out_dir / "cells"
    seeds = trial_seeds(sweep.base_seed, sweep.trials)

    cached = {}
    if args.resume and cell_dir.is_dir():
        for per in sweep.pers:
            for r in sweep.rs:
                key = _cell_key(cfg, per, r, seeds)
                path = cell_dir / f"{key}.json"
                if path.is_file():
                    cached[(float(per), int(r))] = json.loads(path.read_text())["trials"]
        LOG.info("resuming with %d cached cells", len(cached))

    def store_cell(per, r, records):
        cell_dir.mkdir(parents=True, exist_ok=True)
        key = _cell_key(cfg, per, r, seeds)
        tmp = cell_dir / f"{key}.json.tmp"
        tmp.write_bytes(_json_bytes({"per": per, "r": r, "trials": records}))
        tmp.replace(cell_dir / f"{key}.json")
        LOG.info("cell per=%g r=%d done: %s", per, r, summarize_cell(per, r, records))

    rows = run_sweep(sweep.pers, sweep.rs, sweep.trials, base=cfg, base_seed=sweep.base_seed,
                     jobs=args.jobs, on_cell=store_cell, cached=cached)
    files = {"sweep.csv": _csv_bytes(SWEEP_COLUMNS, ([row[c] for c in SWEEP_COLUMNS] for row in rows))}
    _write_outputs(out_dir, files, _manifest("sweep", args.config, args.out, cfg, sweep, started))
    return EXIT_COLLISION if any(row["collision_count"] for row in rows) else EXIT_OK


def cmd_pred_stats(args) -> int:
    started = time.monotonic()
    cfg, _ = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, trial_seed=args.seed)
    result = run_scenario(dataclasses.replace(cfg, record_predictions=True))
    stats = prediction_error_stats(result)
    rows = []
    for h in range(len(stats["gp"]["mean"])):
        for source in ("gp", "mpc"):
            rows.append((h + 1, source, stats[source]["mean"][h], stats[source]["p95"][h]))
    files = {
        "pred_error.csv": _csv_bytes(PRED_COLUMNS, rows),
        "metrics.json": _json_bytes(result.metrics()),
    }
    _write_outputs(Path(args.out), files, _manifest("pred-stats", args.config, args.out, cfg, None, started))
    return EXIT_COLLISION if result.collision else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cacc-mbc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for solver detail")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="scenario TOML file")
        p.add_argument("--out", default="out", help="output directory (default: %(default)s)")
        p.add_argument("--seed", type=int, default=None, help="override the trial seed (sweep: base seed)")

    p_run = sub.add_parser("run", help="simulate one scenario and write trace.csv")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="emergency-braking statistics over PER and look-ahead")
    common(p_sweep)
    p_sweep.add_argument("--jobs", type=int, default=1, help="worker processes (default: %(default)s)")
    p_sweep.add_argument("--resume", action="store_true", help="reuse completed cells found in OUT/cells")
    p_sweep.set_defaults(func=cmd_sweep)

    p_pred = sub.add_parser("pred-stats", help="velocity prediction error of GP and MPC forecasts")
    common(p_pred)
    p_pred.set_defaults(func=cmd_pred_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be at least 1")
    try:
        return args.func(args)
    except ConfigFileError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EmptySample as exc:
        print(f"no prediction samples: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
