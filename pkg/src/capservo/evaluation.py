"""Evaluation protocols: sensing-range heatmaps, per-station error tables,
cross-size generalization and the servoing task suite."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .control import Scenario, ServoConfig, ServoLog, run_servo
from .datagen import CollectionSpec, Dataset, collect_trajectories, substream
from .estimator import TrainConfig, WindowedData, mlp_train, pose_errors, window_dataset
from .geometry import (ARM, LEG, STATIONS, LateralSway, LimbModel, LimbSpec, RelativePose, Station,
                       articulate, place_ee, straight_limb)
from .sensor import CapModelParams, SensorArraySpec

# Anchor stations and circumference ranges (cm) used to sample limb-size profiles.
PROFILE_RANGES = {"arm": ("forearm", 22.0, 29.0), "leg": ("shin", 25.0, 40.0)}


class PerfectEstimator:
    """Stub whose window predictions are the true labels."""

    def predict_windows(self, data: WindowedData) -> np.ndarray:
        return data.y.copy()


def predict_windows(model, data: WindowedData) -> np.ndarray:
    if hasattr(model, "predict_windows"):
        return model.predict_windows(data)
    return model.predict(data.x)


def _axis_errors(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-sample absolute errors (cm, cm, deg, deg)."""
    err = np.abs(pred - truth)
    err[:, 2:] = np.degrees(err[:, 2:])
    return err


# ---------------------------------------------------------------- heatmaps

@dataclass
class HeatmapGrid:
    kind: str  # "translational" (cm) or "rotational" (deg)
    x_centers: np.ndarray
    y_centers: np.ndarray
    mean: np.ndarray  # (len(y), len(x)), NaN where empty
    count: np.ndarray
    bands: dict = field(default_factory=dict)

    def long_rows(self, series: str) -> list:
        rows = []
        for j, yc in enumerate(self.y_centers):
            for i, xc in enumerate(self.x_centers):
                if self.count[j, i]:
                    rows.append((float(xc), float(yc), float(self.mean[j, i]), series))
        return rows


TRANSLATIONAL_BANDS = (("<=10cm", 0.0, 10.0), ("10-15cm", 10.0, 15.0), (">15cm", 15.0, math.inf))
ROTATIONAL_BANDS = (("<30deg", 0.0, 30.0), ("30-45deg", 30.0, 45.0 + 1e-9))


def _cell_aggregate(px, py, val, xc, yc, half):
    """Mean of ``val`` over samples within +-half of each cell center (square window)."""
    mean = np.full((len(yc), len(xc)), np.nan)
    count = np.zeros((len(yc), len(xc)), dtype=int)
    in_x = np.abs(px[None, :] - xc[:, None]) <= half  # (nx, n)
    for j, y0 in enumerate(yc):
        in_y = np.abs(py - y0) <= half
        m = in_x & in_y[None, :]
        c = m.sum(axis=1)
        s = (m * val[None, :]).sum(axis=1)
        count[j] = c
        ok = c > 0
        mean[j, ok] = s[ok] / c[ok]
    return mean, count


def sweep_errors(dataset: Dataset, model, h: int = 50):
    data = window_dataset([(t.frames, t.poses) for t in dataset.trajectories], h)
    if len(data) == 0:
        raise ValueError("empty dataset")
    return data.y, _axis_errors(predict_windows(model, data), data.y)


def range_heatmap(dataset: Dataset, model, kind: str = "translational", h: int = 50) -> HeatmapGrid:
    """Per-cell mean pose error over a linear or rotation sweep.

    Translational maps use 1 cm cells over (D_y, D_z) and the mean of the two
    translational errors; rotational maps use 2 deg cells over (theta_y,
    theta_z) and the mean of the two angular errors.
    """
    if not dataset.trajectories:
        raise ValueError("empty dataset")
    truth, err = sweep_errors(dataset, model, h)
    if kind == "translational":
        px, py, val = truth[:, 0], truth[:, 1], err[:, :2].mean(axis=1)
        xc, yc, half = np.arange(-20.0, 21.0), np.arange(0.0, 21.0), 1.5
        radius, bands = np.hypot(px, py), TRANSLATIONAL_BANDS
    elif kind == "rotational":
        px, py, val = np.degrees(truth[:, 2]), np.degrees(truth[:, 3]), err[:, 2:].mean(axis=1)
        xc, yc, half = np.arange(-46.0, 47.0, 2.0), np.arange(-46.0, 47.0, 2.0), 3.0
        radius, bands = np.hypot(px, py), ROTATIONAL_BANDS
    else:
        raise ValueError(f"unknown heatmap kind {kind!r}")
    mean, count = _cell_aggregate(px, py, val, xc, yc, half)
    summary = {}
    for name, lo, hi in bands:
        sel = (radius > lo) & (radius <= hi) if lo > 0 else radius <= hi
        summary[name] = float(val[sel].mean()) if sel.any() else float("nan")
    return HeatmapGrid(kind, xc, yc, mean, count, summary)


# ------------------------------------------------------------ error tables

@dataclass
class ErrorRow:
    name: str
    mae: np.ndarray
    sd: np.ndarray
    n: int


def per_limb_error_table(model, datasets: dict, h: int = 50) -> list:
    """Per-station MAE/SD rows in (cm, cm, deg, deg) plus an ``average`` row."""
    rows = []
    for name, ds in datasets.items():
        data = window_dataset([(t.frames, t.poses) for t in ds.trajectories], h)
        pe = pose_errors(predict_windows(model, data), data.y)
        rows.append(ErrorRow(name, pe.mae, pe.sd, pe.n))
    if rows:
        rows.append(ErrorRow("average", np.mean([r.mae for r in rows], axis=0),
                             np.mean([r.sd for r in rows], axis=0), sum(r.n for r in rows)))
    return rows


def error_table_csv(rows: Sequence[ErrorRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["station", "dy_mae_cm", "dz_mae_cm", "thy_mae_deg", "thz_mae_deg",
                "dy_sd_cm", "dz_sd_cm", "thy_sd_deg", "thz_sd_deg", "n"])
    for r in rows:
        w.writerow([r.name] + [f"{v:.6g}" for v in r.mae] + [f"{v:.6g}" for v in r.sd] + [r.n])
    return buf.getvalue()


# ------------------------------------------------------------- cross-size

CYLINDER_STATION = Station("cylinder", "cylinder", 0, 30.0)


def cylinder_dataset(radius: float, n_traj: int, params: CapModelParams, rng,
                     sensor: Optional[SensorArraySpec] = None) -> Dataset:
    limb = straight_limb(radius, 60.0)
    spec = CollectionSpec(n_trajectories=n_traj, stations=())
    return collect_trajectories(spec, limb, params, rng, CYLINDER_STATION, sensor)


@dataclass
class CrossSizeResult:
    train_radius: float
    seed: int
    in_dist_mae: np.ndarray
    test_mae: dict  # radius -> (4,) MAE

    def ratios(self) -> dict:
        return {r: m / self.in_dist_mae for r, m in self.test_mae.items()}


def cross_size_eval(train_radius: float, test_radii: Sequence[float], seed: int,
                    params: Optional[CapModelParams] = None, n_train: int = 60, n_test: int = 40,
                    train_config: Optional[TrainConfig] = None, dims=None) -> CrossSizeResult:
    """Train on one cylinder radius, evaluate on held-out trajectories at each test radius.

    The in-distribution reference uses fresh held-out trajectories at the
    training radius, collected the same way as every test set.
    """
    params = params or CapModelParams()
    cfg = train_config or TrainConfig(seed=seed)
    train = cylinder_dataset(train_radius, n_train, params, substream(seed, "cross_train"))
    result = mlp_train(window_dataset(train.pairs()), cfg, dims=dims)
    model = result.model

    def mae(radius, k):
        ds = cylinder_dataset(radius, n_test, params, substream(seed, "cross_test", k))
        data = window_dataset(ds.pairs())
        return pose_errors(model.predict(data.x), data.y).mae

    in_dist = mae(train_radius, 0)
    tests = {float(r): mae(r, i + 1) for i, r in enumerate(test_radii)}
    return CrossSizeResult(train_radius, seed, in_dist, tests)


# -------------------------------------------------------------- task suite

TASKS = ("BentElbow", "ForearmTilt", "BentKnee", "MovingLimb")


@dataclass(frozen=True)
class TaskSpec:
    task: str
    angles_deg: tuple = (0.0,)
    trials: int = 5
    direction: int = -1  # -1 proximal, +1 distal
    run_length: Optional[float] = None  # None: rest of the start segment plus the next, less a margin
    size_scale: Optional[float] = None  # None: sample a limb-size profile per trial
    motion_amplitude: float = 10.0
    motion_period: float = 8.0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        for a in self.angles_deg:
            if not 0.0 <= a <= 120.0:
                raise ValueError(f"angle {a} outside the articulation range")


def default_suite() -> list:
    return [
        TaskSpec("BentElbow", (0.0, 30.0, 60.0, 90.0, 120.0)),
        TaskSpec("ForearmTilt", (0.0, 30.0, 60.0, 90.0)),
        TaskSpec("BentKnee", (0.0, 30.0, 60.0, 90.0), direction=1),
        TaskSpec("MovingLimb", (0.0,)),
    ]


def scaled_spec(spec: LimbSpec, scale: float) -> LimbSpec:
    return replace(spec, radius_root=spec.radius_root * scale, radius_joint=spec.radius_joint * scale,
                   radius_end=spec.radius_end * scale)


def sample_profile_scale(limb: str, rng: np.random.Generator) -> float:
    """Radius scale placing the anchor station's circumference in its observed range."""
    station, lo, hi = PROFILE_RANGES[limb]
    base = {"arm": ARM, "leg": LEG}[limb]
    st = next(s for s in STATIONS if s.name == station)
    seg = articulate(base, 0.0).segments[st.segment]
    return float(rng.uniform(lo, hi) / (2.0 * math.pi * seg.radius_at(st.lam)))


def build_scenario(task: TaskSpec, angle_deg: float, scale: float) -> Scenario:
    a = math.radians(angle_deg)
    if task.task == "BentElbow":
        limb = articulate(scaled_spec(ARM, scale), a)
        seg, lam = 1, limb.segments[1].length - 4.0
    elif task.task == "ForearmTilt":
        spec = replace(scaled_spec(ARM, scale), plane="vertical", fixed_bend=math.pi / 2)
        limb = articulate(spec, a)
        seg, lam = 1, limb.segments[1].length - 4.0
    elif task.task == "BentKnee":
        limb = articulate(scaled_spec(LEG, scale), a)
        seg, lam = 0, 20.0
    else:
        base = articulate(scaled_spec(ARM, scale), 0.0)
        # The arm yaws about the shoulder so the hand sways by the amplitude.
        reach = base.segments[0].length + base.segments[1].length
        sway = LateralSway(task.motion_amplitude, task.motion_period, pivot=tuple(base.segments[0].base_point),
                           lever=reach)
        limb = LimbModel(base.segments, 0.0, sway, "arm")
        seg, lam = 1, limb.segments[1].length - 4.0
    start = place_ee(limb, seg, lam, RelativePose(0.0, 5.0, 0.0, 0.0))
    return Scenario(limb, start, task.direction)


def traverse_length(task: TaskSpec, scenario: Scenario, margin: float = 5.0) -> float:
    """Arc length from the start to ``margin`` cm short of the far end of the limb."""
    if task.run_length is not None:
        return task.run_length
    seg0, seg1 = scenario.limb.segments
    if task.direction < 0:
        # Starts on the distal segment, ends near the proximal root.
        rest = float((scenario.start.position - seg1.base_point) @ seg1.axis_dir)
        return rest + seg0.length - margin
    rest = seg0.length - float((scenario.start.position - seg0.base_point) @ seg0.axis_dir)
    return rest + seg1.length - margin


@dataclass
class TrialResult:
    task: str
    angle_deg: float
    trial: int
    scale: float
    outcome: str
    mean_distance: float  # mean estimated ||(D_y, D_z)|| over the run
    in_band: float  # fraction of control steps with clearance in [2, 8] cm
    log: ServoLog

    @property
    def success(self) -> bool:
        return self.outcome == "success"


@dataclass
class SuiteResult:
    trials: list

    def success_table(self) -> list:
        cells: dict = {}
        for t in self.trials:
            cells.setdefault((t.task, t.angle_deg), []).append(t.success)
        return [(task, ang, int(sum(v)), len(v)) for (task, ang), v in cells.items()]

    def cell(self, task: str, angle: float) -> list:
        return [t for t in self.trials if t.task == task and t.angle_deg == angle]

    def table_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "angle_deg", "successes", "trials", "success_rate"])
        for task, ang, s, n in self.success_table():
            w.writerow([task, f"{ang:g}", s, n, f"{s / n:.4g}"])
        return buf.getvalue()

    def trials_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "angle_deg", "trial", "size_scale", "outcome", "mean_distance_cm", "in_band"])
        for t in self.trials:
            w.writerow([t.task, f"{t.angle_deg:g}", t.trial, f"{t.scale:.6g}", t.outcome,
                        f"{t.mean_distance:.6g}", f"{t.in_band:.6g}"])
        return buf.getvalue()

    def distance_curves(self) -> list:
        """Long rows (t_s, mean estimated distance, target, series) per task, averaged over trials."""
        rows = []
        by_task: dict = {}
        for t in self.trials:
            by_task.setdefault(t.task, []).append(t.log)
        for task, logs in by_task.items():
            n = min(len(l.rows) for l in logs)
            if n == 0:
                continue
            d = np.mean([np.hypot(l.column("dy_hat")[:n], l.column("dz_hat")[:n]) for l in logs], axis=0)
            ts = logs[0].column("t_s")[:n]
            rows.extend((float(x), float(y), 5.0, task) for x, y in zip(ts, d))
        return rows


def run_task_suite(spec: TaskSpec, model, cfg: ServoConfig, seed: int,
                   params: Optional[CapModelParams] = None, sensor: Optional[SensorArraySpec] = None) -> SuiteResult:
    """Seeded trials for every angle of one task; trial k uses size profile k."""
    trials = []
    limb_kind = "leg" if spec.task == "BentKnee" else "arm"
    for ai, ang in enumerate(spec.angles_deg):
        for k in range(spec.trials):
            prof_rng = substream(seed, "profile", k)
            scale = spec.size_scale if spec.size_scale is not None else sample_profile_scale(limb_kind, prof_rng)
            scen = build_scenario(spec, ang, scale)
            run_cfg = replace(cfg, v_x=abs(cfg.v_x) * spec.direction, run_length=traverse_length(spec, scen))
            log = run_servo(scen, model, run_cfg, substream(seed, f"servo_{spec.task}", ai, k), sensor, params)
            d_hat = np.hypot(log.column("dy_hat"), log.column("dz_hat")) if log.rows else np.array([np.nan])
            cl = log.column("clearance") if log.rows else np.array([np.nan])
            trials.append(TrialResult(spec.task, float(ang), k, scale, log.outcome, float(np.mean(d_hat)),
                                      float(np.mean((cl >= 2.0) & (cl <= 8.0))), log))
    return SuiteResult(trials)


def long_csv(rows: Sequence[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "value", "series"])
    for x, y, v, s in rows:
        w.writerow([f"{x:.6g}", f"{y:.6g}", f"{v:.6g}", s])
    return buf.getvalue()
