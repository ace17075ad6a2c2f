"""Command-line entry point: collect, train, servo, report, reproduce.

Configuration is a JSON tree (see ``DEFAULT_CONFIG``) given with ``--config``
and/or ``--set section.key=value`` overrides; unknown keys are rejected.
Outputs go to ``--out``, or to ``$CAPSERVO_OUT/<command>`` when unset.
Each output directory gets a ``manifest.json`` with the resolved config and
the sha256 of every input and output file.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .control import Gains, ServoConfig, TruePoseEstimator, run_servo
from .datagen import (CollectionSpec, collect_stations, linear_sweep, read_dataset_csv,
                      rotation_sweep, substream)
from .estimator import (TrainConfig, TrainingDivergedError, load_model, mlp_train, pose_errors,
                        save_model, window_dataset)
from .evaluation import (TASKS, PerfectEstimator, TaskSpec, build_scenario, default_suite, error_table_csv,
                         long_csv, per_limb_error_table, range_heatmap, run_task_suite, traverse_length)
from .geometry import STATIONS, station_limb
from .sensor import CapModelParams

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUN = 0, 2, 3, 4
ENV_OUT = "CAPSERVO_OUT"

DEFAULT_CONFIG = {
    "seed": 0,
    "sensor": {
        "gain": 1.0,
        "baseline": 1.0,
        "noise_sd": None,
        "crosstalk": 0.05,
        "patch_resolution": 6,
        "range_cutoff_cm": 40.0,
    },
    "collection": {
        "n_trajectories": 60,
        "rate_hz": 100.0,
        "dy_bounds_cm": [-10.0, 10.0],
        "dz_bounds_cm": [0.0, 15.0],
        "thy_bounds_rad": [-math.pi / 8, math.pi / 8],
        "thz_bounds_rad": [-math.pi / 8, math.pi / 8],
        "speed_bounds_cm_s": [3.0, 10.0],
        "ang_speed_bounds_rad_s": [math.pi / 20, math.pi / 8],
        "stations": [s.name for s in STATIONS],
    },
    "train": {
        "lr": 1e-3,
        "batch_size": 128,
        "epochs": 20,
        "angle_scale_cm_per_rad": 10.0,
        "val_fraction": 0.1,
    },
    "servo": {
        "task": "BentElbow",
        "angle_deg": 90.0,
        "size_scale": 1.0,
        "p_desired_cm_rad": [0.0, 5.0, 0.0, 0.0],
        "v_x_cm_s": 2.0,
        "tau_d_hz": 100,
        "tau_u_hz": 10,
        "force_limit_n": 10.0,
        "run_length_cm": None,
        "kp": [0.025, 0.025, 0.1, 0.1],
        "kd": [0.0125, 0.0125, 0.025, 0.025],
        "strict": False,
    },
    "report": {
        "sweep_station": "forearm",
        "sweep_runs": 20,
        "eval_trajectories": 12,
        "suite_trials": 5,
    },
}


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ------------------------------------------------------------------ config

def merge_config(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        key = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{key!r} must be a table")
            out[k] = merge_config(base[k], v, key + ".")
        else:
            out[k] = v
    return out


def parse_override(text: str) -> dict:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    tree: dict = {}
    node = tree
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return tree


def load_config(path, overrides) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            with open(path) as fh:
                cfg = merge_config(cfg, json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for o in overrides or []:
        cfg = merge_config(cfg, parse_override(o))
    return cfg


def sensor_params(cfg: dict) -> CapModelParams:
    s = cfg["sensor"]
    try:
        return CapModelParams(s["gain"], s["baseline"], s["noise_sd"], s["crosstalk"], int(s["patch_resolution"]),
                              s["range_cutoff_cm"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"sensor: {exc}") from exc


def collection_spec(cfg: dict) -> CollectionSpec:
    c = cfg["collection"]
    names = {s.name for s in STATIONS}
    bad = [s for s in c["stations"] if s not in names]
    if bad:
        raise ConfigError(f"unknown stations {bad}; choose from {sorted(names)}")
    try:
        return CollectionSpec(int(c["n_trajectories"]), float(c["rate_hz"]), tuple(c["dy_bounds_cm"]),
                              tuple(c["dz_bounds_cm"]), tuple(c["thy_bounds_rad"]), tuple(c["thz_bounds_rad"]),
                              tuple(c["speed_bounds_cm_s"]), tuple(c["ang_speed_bounds_rad_s"]),
                              tuple(c["stations"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"collection: {exc}") from exc


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    if not 0.0 <= t["val_fraction"] < 1.0:
        raise ConfigError("train.val_fraction must lie in [0, 1)")
    try:
        return TrainConfig(lr=t["lr"], batch_size=int(t["batch_size"]), epochs=int(t["epochs"]), seed=int(cfg["seed"]),
                           angle_scale=t["angle_scale_cm_per_rad"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from exc


def servo_config(cfg: dict) -> ServoConfig:
    s = cfg["servo"]
    try:
        return ServoConfig(tuple(s["p_desired_cm_rad"]), float(s["v_x_cm_s"]), int(s["tau_d_hz"]),
                           int(s["tau_u_hz"]), float(s["force_limit_n"]), 40.0,
                           gains=Gains(tuple(s["kp"]), tuple(s["kd"])))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"servo: {exc}") from exc


def task_spec(cfg: dict) -> TaskSpec:
    s = cfg["servo"]
    if s["task"] not in TASKS:
        raise ConfigError(f"servo.task must be one of {TASKS}")
    direction = 1 if s["task"] == "BentKnee" else -1
    try:
        return TaskSpec(s["task"], (float(s["angle_deg"]),), 1, direction, s["run_length_cm"], s["size_scale"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"servo: {exc}") from exc


# --------------------------------------------------------------- manifests

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def write_manifest(out: Path, command: str, cfg: dict, inputs: dict, outputs: list, extra=None):
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg["seed"],
        "config_sha256": config_hash(cfg),
        "config": cfg,
        "inputs": {k: {"path": str(v), "sha256": sha256_file(v)} for k, v in sorted(inputs.items())},
        "outputs": {name: sha256_file(out / name) for name in sorted(outputs)},
    }
    if extra:
        manifest.update(extra)
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write(path: Path, text: str):
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"missing {what}: {p}")
    return p


# ---------------------------------------------------------------- commands

def cmd_collect(cfg: dict, out: Path) -> int:
    spec = collection_spec(cfg)
    ds = collect_stations(spec, sensor_params(cfg), int(cfg["seed"]))
    _write(out / "dataset.csv", ds.to_csv())
    lengths = [len(t) for t in ds.trajectories]
    attempted = spec.n_trajectories * len(spec.stations)
    print(f"rows={ds.n_rows} trajectories={len(ds.trajectories)} aborted={ds.aborted}/{attempted}")
    if lengths:
        print(f"trajectory_length min={min(lengths)} mean={np.mean(lengths):.1f} max={max(lengths)}")
    for name, sub in ds.by_station().items():
        print(f"station={name} trajectories={len(sub.trajectories)} rows={sub.n_rows}")
    if attempted and ds.aborted / attempted > 0.05:
        print(f"warning: {ds.aborted} of {attempted} trajectories aborted on contact", file=sys.stderr)
    write_manifest(out, "collect", cfg, {}, ["dataset.csv"],
                   {"dataset": {"rows": ds.n_rows, "trajectories": len(ds.trajectories), "aborted": ds.aborted,
                                "spec_hash": spec.digest()}})
    return EXIT_OK


def split_by_trajectory(traj_ids: np.ndarray, fraction: float, rng) -> np.ndarray:
    """Boolean mask of validation windows; whole trajectories are held out."""
    ids = np.unique(traj_ids)
    n_val = int(round(fraction * len(ids)))
    val = rng.choice(ids, size=n_val, replace=False) if n_val else np.array([], dtype=ids.dtype)
    return np.isin(traj_ids, val)


def cmd_train(cfg: dict, out: Path, dataset_path) -> int:
    tc = train_config(cfg)
    path = _require(dataset_path, "dataset")
    try:
        ds = read_dataset_csv(path)
        data = window_dataset(ds.pairs())
    except (ValueError, IndexError) as exc:
        raise DataError(f"malformed dataset: {exc}") from exc
    val_mask = split_by_trajectory(data.traj, cfg["train"]["val_fraction"], substream(cfg["seed"], "split"))
    train, val = data.subset(~val_mask), data.subset(val_mask)
    res = mlp_train(train, tc, val=val if len(val) else None,
                    progress=lambda e, tr, va: print(f"epoch={e} train_mse={tr:.6g} val_mse={va:.6g}"))
    digest = save_model(res.model, out / "model.bin")
    _write(out / "loss.csv", res.loss_csv())
    outputs = ["model.bin", "loss.csv"]
    extra = {"model_sha256": digest, "train_windows": len(train), "val_windows": len(val)}
    if len(val):
        pe = pose_errors(res.model.predict(val.x), val.y)
        extra["val_mae"] = {k: float(v) for k, v in zip(("dy_cm", "dz_cm", "thy_deg", "thz_deg"), pe.mae)}
        print("val_mae dy={:.3f}cm dz={:.3f}cm thy={:.2f}deg thz={:.2f}deg".format(*pe.mae))
    from .plotting import plot_loss
    plot_loss(res.train_mse, res.val_mse, out / "loss.png")
    outputs.append("loss.png")
    write_manifest(out, "train", cfg, {"dataset": dataset_path}, outputs, extra)
    print(f"model_sha256={digest}")
    return EXIT_OK


def _load_estimator(model_path, stub: bool):
    if stub:
        return None
    try:
        model = load_model(_require(model_path, "model"))
    except (ValueError, OSError) as exc:
        raise DataError(f"cannot load model: {exc}") from exc
    return model


def _check_model(model, cfg: ServoConfig):
    expected = cfg.window * 6
    if model.dims[0] != expected or model.dims[-1] != 4:
        raise ConfigError(f"model expects {model.dims[0]} inputs and {model.dims[-1]} outputs; "
                          f"config needs {expected} inputs and 4 outputs")


def cmd_servo(cfg: dict, out: Path, model_path, stub: bool) -> int:
    scfg = servo_config(cfg)
    task = task_spec(cfg)
    model = _load_estimator(model_path, stub)
    if model is not None:
        _check_model(model, scfg)
    estimator = TruePoseEstimator() if model is None else model
    scen = build_scenario(task, task.angles_deg[0], task.size_scale)
    run_cfg = replace(scfg, v_x=abs(scfg.v_x) * task.direction, run_length=traverse_length(task, scen))
    slog = run_servo(scen, estimator, run_cfg, substream(cfg["seed"], "servo"), params=sensor_params(cfg))
    _write(out / "servo_log.csv", slog.to_csv())
    from .plotting import plot_servo_log
    outputs = ["servo_log.csv"]
    if slog.rows:
        plot_servo_log(slog, out / "servo_log.png")
        outputs.append("servo_log.png")
    inputs = {} if model is None else {"model": model_path}
    write_manifest(out, "servo", cfg, inputs, outputs, {"outcome": slog.outcome, "stub_estimator": stub})
    print(f"outcome={slog.outcome}")
    if cfg["servo"]["strict"] and slog.outcome != "success":
        return EXIT_RUN
    return EXIT_OK


def _log_error_rows(paths) -> str:
    """Estimate-vs-truth MAE per servo log."""
    from .control import read_servo_log
    lines = ["log,dy_mae_cm,dz_mae_cm,thy_mae_deg,thz_mae_deg,n"]
    for p in paths:
        a = read_servo_log(p).array()
        pred, truth = a[:, 8:12], a[:, 12:16]
        ok = np.all(np.isfinite(truth), axis=1)
        if not ok.any():
            lines.append(f"{Path(p).name},nan,nan,nan,nan,0")
            continue
        pe = pose_errors(pred[ok], truth[ok])
        lines.append(f"{Path(p).name}," + ",".join(f"{v:.6g}" for v in pe.mae) + f",{pe.n}")
    return "\n".join(lines) + "\n"


def cmd_report(cfg: dict, out: Path, model_path, stub: bool, logs) -> int:
    from . import plotting
    missing = [p for p in ([] if stub else [model_path]) + list(logs or []) if not p or not Path(p).is_file()]
    if missing:
        raise DataError("missing inputs: " + ", ".join(str(m) for m in missing))
    seed = int(cfg["seed"])
    params = sensor_params(cfg)
    rep = cfg["report"]
    model = _load_estimator(model_path, stub)
    scfg = servo_config(cfg)
    if model is not None:
        _check_model(model, scfg)
    window_model = PerfectEstimator() if model is None else model
    servo_model = TruePoseEstimator() if model is None else model
    outputs = []
    by_name = {s.name: s for s in STATIONS}
    if rep["sweep_station"] not in by_name:
        raise ConfigError(f"unknown sweep station {rep['sweep_station']!r}")
    st = by_name[rep["sweep_station"]]
    limb = station_limb(st)
    lin = linear_sweep(limb, params, int(rep["sweep_runs"]), substream(seed, "linear_sweep"), st)
    rot = rotation_sweep(limb, params, int(rep["sweep_runs"]), substream(seed, "rotation_sweep"), st)
    heat_rows, band_lines = [], ["kind,band,mean_error"]
    for kind, ds in (("translational", lin), ("rotational", rot)):
        grid = range_heatmap(ds, window_model, kind)
        heat_rows.extend(grid.long_rows(kind))
        band_lines.extend(f"{kind},{b},{v:.6g}" for b, v in grid.bands.items())
        plotting.plot_heatmap(grid, out / f"heatmap_{kind}.png", f"{kind} error, {st.name}")
        outputs.append(f"heatmap_{kind}.png")
    _write(out / "heatmaps.csv", long_csv(heat_rows))
    _write(out / "range_bands.csv", "\n".join(band_lines) + "\n")
    outputs += ["heatmaps.csv", "range_bands.csv"]

    spec = replace(collection_spec(cfg), n_trajectories=int(rep["eval_trajectories"]))
    evald = collect_stations(spec, params, seed + 1_000_003)
    table = per_limb_error_table(window_model, evald.by_station())
    _write(out / "station_errors.csv", error_table_csv(table))
    outputs.append("station_errors.csv")

    suite_rows, curve_rows, trial_text = ["task,angle_deg,successes,trials,success_rate"], [], []
    for ts in default_suite():
        res = run_task_suite(replace(ts, trials=int(rep["suite_trials"])), servo_model, scfg, seed, params)
        suite_rows.extend(res.table_csv().splitlines()[1:])
        curve_rows.extend(res.distance_curves())
        body = res.trials_csv().splitlines()
        trial_text.extend(body if not trial_text else body[1:])
    _write(out / "task_success.csv", "\n".join(suite_rows) + "\n")
    _write(out / "task_trials.csv", "\n".join(trial_text) + "\n")
    _write(out / "distance_curves.csv", long_csv(curve_rows))
    plotting.plot_distance_curves(curve_rows, out / "distance_curves.png")
    outputs += ["task_success.csv", "task_trials.csv", "distance_curves.csv", "distance_curves.png"]
    plotting.plot_capacitance(lin.trajectories[0].frames, out / "capacitance_sweep.png")
    outputs.append("capacitance_sweep.png")

    inputs = {} if model is None else {"model": model_path}
    if logs:
        _write(out / "log_errors.csv", _log_error_rows(logs))
        outputs.append("log_errors.csv")
        inputs.update({f"log{i}": p for i, p in enumerate(logs)})
    write_manifest(out, "report", cfg, inputs, outputs, {"stub_estimator": stub})
    for line in band_lines[1:] + suite_rows[1:]:
        print(line)
    return EXIT_OK


def cmd_reproduce(cfg: dict, out: Path, stub: bool) -> int:
    dirs = {k: out / k for k in ("collect", "train", "servo", "report")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    cmd_collect(cfg, dirs["collect"])
    cmd_train(cfg, dirs["train"], dirs["collect"] / "dataset.csv")
    model = dirs["train"] / "model.bin"
    rc = cmd_servo(cfg, dirs["servo"], model, stub)
    cmd_report(cfg, dirs["report"], model, stub, [dirs["servo"] / "servo_log.csv"])
    return rc


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. servo.angle_deg=60 (repeatable)")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--out", help=f"output directory (default ${ENV_OUT}/<command> or ./capservo_out/<command>)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="capservo", description="Capacitive servoing simulator")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("collect", parents=[common], help="collect a labelled dataset")
    t = sub.add_parser("train", parents=[common], help="train the pose estimator")
    t.add_argument("--dataset", required=True)
    stub_help = "use the true-pose stub instead of a model (true/false)"
    s = sub.add_parser("servo", parents=[common], help="run one servoing task")
    s.add_argument("--model")
    s.add_argument("--stub-estimator", type=_bool, default=False, help=stub_help)
    r = sub.add_parser("report", parents=[common], help="heatmaps, error tables and the task suite")
    r.add_argument("--model")
    r.add_argument("--logs", nargs="*", default=[], help="servo logs to score")
    r.add_argument("--stub-estimator", type=_bool, default=False, help=stub_help)
    rp = sub.add_parser("reproduce", parents=[common], help="collect, train, servo and report in one go")
    rp.add_argument("--stub-estimator", type=_bool, default=False, help=stub_help)
    return p


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        if args.seed is not None:
            cfg["seed"] = args.seed
        out = Path(args.out) if args.out else Path(os.environ.get(ENV_OUT, "capservo_out")) / args.command
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "collect":
            return cmd_collect(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out, args.dataset)
        if args.command == "servo":
            if not args.stub_estimator and not args.model:
                raise ConfigError("servo needs --model or --stub-estimator true")
            return cmd_servo(cfg, out, args.model, args.stub_estimator)
        if args.command == "report":
            if not args.stub_estimator and not args.model:
                raise ConfigError("report needs --model or --stub-estimator true")
            return cmd_report(cfg, out, args.model, args.stub_estimator, args.logs)
        return cmd_reproduce(cfg, out, args.stub_estimator)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergedError as exc:
        print(f"run failure: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
