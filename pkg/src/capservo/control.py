"""PD capacitive servoing with a dual-rate capture/control loop.

Capture runs at ``tau_d`` Hz; every ``tau_d/tau_u`` frames the estimator is
queried on the latest window and a new ee target is commanded. The ee then
moves linearly toward that target over the following capture frames.

Translation actions are applied in the ee frame, ``R_ee @ (v_x/tau_u, u_y,
u_z)``, so the forward advance along the ee X axis is exact regardless of
feedback. Angular actions are added to pitch and yaw; roll is never touched.
"""

from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .geometry import DegenerateAxisError, EEPose, LimbModel, relative_pose, signed_clearance, surface_frame
from .sensor import CapModelParams, SensorArraySpec, plate_outline, simulate_batch

LOG_HEADER = ["step", "t_s", "x", "y", "z", "tx", "ty", "tz", "dy_hat", "dz_hat", "thy_hat", "thz_hat",
              "dy", "dz", "thy", "thz", "uy", "uz", "uty", "utz", "clearance", "force", "contact"]

SPRING_N_PER_CM = 50.0
LOST_RANGE = 20.0  # cm of clearance beyond which the limb is out of sight
LOST_STEPS = 10


@dataclass(frozen=True)
class Gains:
    kp: tuple = (0.025, 0.025, 0.1, 0.1)
    kd: tuple = (0.0125, 0.0125, 0.025, 0.025)

    def __post_init__(self):
        if len(self.kp) != 4 or len(self.kd) != 4:
            raise ValueError("gains are 4-vectors")
        if min(self.kp) < 0 or min(self.kd) < 0:
            raise ValueError("gains must be non-negative")

    def scaled(self, factor: float) -> "Gains":
        return Gains(tuple(factor * k for k in self.kp), tuple(factor * k for k in self.kd))


@dataclass(frozen=True)
class ServoConfig:
    p_desired: tuple = (0.0, 5.0, 0.0, 0.0)
    v_x: float = 2.0  # cm/s, negative moves proximally
    tau_d: int = 100
    tau_u: int = 10
    force_limit: float = 10.0
    run_length: float = 40.0  # cm travelled along the ee X axis
    window: int = 50
    gains: Gains = field(default_factory=Gains)

    def __post_init__(self):
        if self.tau_u <= 0 or self.tau_d % self.tau_u != 0:
            raise ValueError("tau_d must be a positive multiple of tau_u")
        if self.v_x == 0:
            raise ValueError("v_x must be non-zero")
        if self.window < 1 or self.run_length <= 0 or self.force_limit <= 0:
            raise ValueError("window, run_length and force_limit must be positive")

    @property
    def frames_per_control(self) -> int:
        return self.tau_d // self.tau_u

    @property
    def n_control_steps(self) -> int:
        return int(math.ceil(abs(self.run_length) / abs(self.v_x) * self.tau_u - 1e-9))


def pd_action(e, e_dot, gains: Gains) -> np.ndarray:
    return np.asarray(gains.kp) * np.asarray(e, dtype=float) + np.asarray(gains.kd) * np.asarray(e_dot, dtype=float)


def estimate_velocity(history, tau_u: float) -> np.ndarray:
    """Backward difference of the last two control-rate errors, zero before two exist."""
    if len(history) < 2:
        return np.zeros(4)
    return (np.asarray(history[-1], dtype=float) - np.asarray(history[-2], dtype=float)) * tau_u


@dataclass
class StepContext:
    """What a pose estimator may look at besides the window (stubs only)."""

    limb: LimbModel
    ee: EEPose
    t_s: float
    sensor: SensorArraySpec


class TruePoseEstimator:
    """Returns the geometric relative pose, plus an optional constant offset."""

    def __init__(self, offset=(0.0, 0.0, 0.0, 0.0)):
        self.offset = np.asarray(offset, dtype=float)

    def __call__(self, window, context: StepContext) -> np.ndarray:
        p = relative_pose(context.limb, context.ee, context.t_s, context.sensor.mount_offset)
        return p.as_array() + self.offset


def contact_force(sensor: SensorArraySpec, limb: LimbModel, ee: EEPose, t_s: float = 0.0) -> tuple[float, float]:
    """Center clearance and spring force from the deepest plate penetration."""
    pts = plate_outline(sensor) @ ee.rotation.T + ee.position
    d = signed_clearance(limb, pts, t_s)
    force = SPRING_N_PER_CM * max(0.0, -float(np.min(d)))
    center = ee.position + ee.rotation @ np.asarray(sensor.mount_offset, dtype=float)
    return float(signed_clearance(limb, center, t_s)), force


def _true_pose(limb, ee, t_s, sensor) -> np.ndarray:
    try:
        return relative_pose(limb, ee, t_s, sensor.mount_offset).as_array()
    except DegenerateAxisError:
        return np.full(4, np.nan)


@dataclass
class ServoLog:
    rows: list = field(default_factory=list)
    outcome: str = "running"

    def array(self) -> np.ndarray:
        return np.array(self.rows, dtype=float).reshape(-1, len(LOG_HEADER))

    def column(self, name: str) -> np.ndarray:
        return self.array()[:, LOG_HEADER.index(name)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in self.rows:
            w.writerow([int(r[0])] + [f"{v:.9g}" for v in r[1:-1]] + [int(r[-1])])
        return buf.getvalue()


def read_servo_log(path) -> ServoLog:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        if next(r) != LOG_HEADER:
            raise ValueError("unexpected servo log header")
        return ServoLog([[float(v) for v in row] for row in r], outcome="loaded")


@dataclass
class ServoState:
    ee: EEPose
    frame: int = 0
    window: deque = field(default_factory=deque)
    errors: list = field(default_factory=list)
    start: Optional[np.ndarray] = None  # pose at the last command, as array
    target: Optional[np.ndarray] = None
    control_steps: int = 0
    halted: bool = False


def _command(ee: EEPose, u: np.ndarray, cfg: ServoConfig) -> np.ndarray:
    R = ee.rotation
    dpos = R @ np.array([cfg.v_x / cfg.tau_u, u[0], u[1]])
    return np.concatenate([ee.position + dpos, ee.euler + np.array([0.0, u[2], u[3]])])


def servo_step(state: ServoState, estimator: Callable, cfg: ServoConfig, limb: LimbModel,
               sensor: SensorArraySpec, params: CapModelParams,
               rng: Optional[np.random.Generator]) -> Optional[list]:
    """Advance one capture frame; returns a log row when a control update happened."""
    if state.halted:
        raise RuntimeError("servo already halted")
    k = state.frame
    t_s = k / cfg.tau_d
    fpc = cfg.frames_per_control
    if state.target is not None:
        phase = (k % fpc) or fpc
        a = state.start + (state.target - state.start) * (phase / fpc)
        state.ee = EEPose(a[:3], a[3:])
    ee = state.ee
    c = simulate_batch(sensor, params, limb, ee.as_array()[None], rng, [t_s], allow_contact=True)[0]
    state.window.append(c)
    if len(state.window) > cfg.window:
        state.window.popleft()
    state.frame += 1
    if len(state.window) < cfg.window or k % fpc != 0:
        return None
    clearance, force = contact_force(sensor, limb, ee, t_s)
    ctx = StepContext(limb, ee, t_s, sensor)
    p_hat = np.asarray(estimator(np.asarray(state.window), ctx), dtype=float)
    p_true = _true_pose(limb, ee, t_s, sensor)
    contact = force > 0.0
    if force > cfg.force_limit:
        u = np.zeros(4)
        state.halted = True
    else:
        e = np.asarray(cfg.p_desired) - p_hat
        state.errors.append(e)
        u = pd_action(e, estimate_velocity(state.errors, cfg.tau_u), cfg.gains)
        state.start = ee.as_array()
        state.target = _command(ee, u, cfg)
    row = [state.control_steps, t_s, *ee.position, *ee.euler, *p_hat, *p_true, *u, clearance, force, int(contact)]
    state.control_steps += 1
    return row


@dataclass(frozen=True)
class Scenario:
    """A limb plus where servoing starts and what counts as getting past the joint."""

    limb: LimbModel
    start: EEPose
    direction: int = 1  # +1 distal, -1 proximal along the limb
    min_progress: float = 5.0  # cm past the joint required for success


def joint_progress(limb: LimbModel, point, direction: int, t_s: float = 0.0) -> float:
    """Signed arc length of ``point``'s foot past the joint in the travel direction.

    Single-segment limbs have no joint; progress is then the distance along
    the axis from the start end.
    """
    static = limb.at(t_s)
    f = surface_frame(static, point)
    if len(static.segments) == 1:
        return f.lam if direction > 0 else static.segments[0].length - f.lam
    L0 = static.segments[0].length
    if direction > 0:
        return f.lam if f.segment == 1 else f.lam - L0
    return L0 - f.lam if f.segment == 0 else -f.lam


def classify(clearance: np.ndarray, progress: float, halted: bool, min_progress: float = 5.0,
             near: float = 8.0) -> str:
    """Outcome from a clearance trace: contact halt, success or lost track."""
    if halted:
        return "contact_halt"
    clearance = np.asarray(clearance, dtype=float)
    if clearance.size == 0:
        return "lost_track"
    tail = clearance[-max(1, int(math.ceil(0.1 * clearance.size))):]
    if float(np.mean(tail)) < near and progress >= min_progress:
        return "success"
    return "lost_track"


def run_servo(scenario: Scenario, estimator: Callable, cfg: ServoConfig, rng: Optional[np.random.Generator],
              sensor: Optional[SensorArraySpec] = None, params: Optional[CapModelParams] = None) -> ServoLog:
    """Servo along the limb until the run length is covered, contact halts, or the limb is lost."""
    sensor = sensor or SensorArraySpec()
    params = params or CapModelParams()
    state = ServoState(scenario.start)
    log = ServoLog()
    far = 0
    n_steps = cfg.n_control_steps
    while state.control_steps < n_steps:
        row = servo_step(state, estimator, cfg, scenario.limb, sensor, params, rng)
        if row is None:
            continue
        log.rows.append(row)
        if state.halted:
            break
        far = far + 1 if row[LOG_HEADER.index("clearance")] > LOST_RANGE else 0
        if far >= LOST_STEPS:
            break
    log.outcome = outcome_from_log(log, scenario, cfg.force_limit)
    return log


def outcome_from_log(log: ServoLog, scenario: Scenario, force_limit: float = 10.0) -> str:
    """Outcome as a pure function of the logged rows and the scenario."""
    if not log.rows:
        return "lost_track"
    a = log.array()
    last = a[-1]
    halted = bool(last[LOG_HEADER.index("force")] > force_limit)
    progress = joint_progress(scenario.limb, last[2:5], scenario.direction, float(last[1]))
    return classify(a[:, LOG_HEADER.index("clearance")], progress, halted, scenario.min_progress)
