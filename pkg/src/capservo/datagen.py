"""Labelled capacitance datasets from the simulated sensor.

Every label is produced by :func:`capservo.geometry.relative_pose` on the ee
pose that was used to simulate the frame; there is no second labelling path.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .geometry import (STATIONS, EEPose, LimbModel, RelativePose, Station, place_ee, relative_pose,
                       station_limb, surface_frame)
from .sensor import CapModelParams, ContactError, SensorArraySpec, simulate_batch

log = logging.getLogger(__name__)

POS_TOL = 0.1
ANG_TOL = 0.01


def substream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Independent generator for a named purpose (and optional indices) under ``seed``."""
    key = (zlib.crc32(name.encode()),) + tuple(int(i) for i in index)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


@dataclass(frozen=True)
class CollectionSpec:
    n_trajectories: int = 60
    rate_hz: float = 100.0
    dy_bounds: tuple = (-10.0, 10.0)
    dz_bounds: tuple = (0.0, 15.0)
    thy_bounds: tuple = (-math.pi / 8, math.pi / 8)
    thz_bounds: tuple = (-math.pi / 8, math.pi / 8)
    speed_bounds: tuple = (3.0, 10.0)  # cm/s
    ang_speed_bounds: tuple = (math.pi / 20, math.pi / 8)  # rad/s
    stations: tuple = tuple(s.name for s in STATIONS)
    max_steps: int = 5000

    def __post_init__(self):
        if self.n_trajectories < 1:
            raise ValueError("n_trajectories must be >= 1")
        for b in (self.dy_bounds, self.dz_bounds, self.thy_bounds, self.thz_bounds,
                  self.speed_bounds, self.ang_speed_bounds):
            if b[0] > b[1]:
                raise ValueError(f"bad bounds {b!r}")

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.dy_bounds[0], self.dz_bounds[0], self.thy_bounds[0], self.thz_bounds[0]])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.dy_bounds[1], self.dz_bounds[1], self.thy_bounds[1], self.thz_bounds[1]])

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Trajectory:
    traj_id: int
    station: str
    frames: np.ndarray  # (n, 6)
    poses: np.ndarray  # (n, 4)
    ee: np.ndarray  # (n, 6) ee position + euler
    limb: Optional[LimbModel] = None

    def __len__(self):
        return len(self.frames)


@dataclass
class Dataset:
    trajectories: list
    provenance: dict = field(default_factory=dict)
    aborted: int = 0

    @property
    def n_rows(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def pairs(self) -> list:
        return [(t.frames, t.poses) for t in self.trajectories]

    def frames(self) -> np.ndarray:
        return np.concatenate([t.frames for t in self.trajectories]) if self.trajectories else np.empty((0, 6))

    def poses(self) -> np.ndarray:
        return np.concatenate([t.poses for t in self.trajectories]) if self.trajectories else np.empty((0, 4))

    def by_station(self) -> dict:
        out: dict = {}
        for t in self.trajectories:
            out.setdefault(t.station, []).append(t)
        return {k: Dataset(v, dict(self.provenance)) for k, v in out.items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["traj_id", "t", "c1", "c2", "c3", "c4", "c5", "c6", "dy", "dz", "ty", "tz"])
        for tr in self.trajectories:
            for i in range(len(tr)):
                w.writerow([tr.traj_id, i] + [f"{v:.9g}" for v in tr.frames[i]] + [f"{v:.9g}" for v in tr.poses[i]])
        return buf.getvalue()


def read_dataset_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != ["traj_id", "t", "c1", "c2", "c3", "c4", "c5", "c6", "dy", "dz", "ty", "tz"]:
            raise ValueError(f"malformed dataset header {header!r}")
        rows: dict = {}
        for row in r:
            if len(row) != 12:
                raise ValueError(f"malformed dataset row {row!r}")
            rows.setdefault(int(row[0]), []).append([float(v) for v in row[2:]])
    trajs = []
    for tid, vals in rows.items():
        a = np.array(vals)
        trajs.append(Trajectory(tid, "", a[:, :6], a[:, 6:], np.empty((len(a), 0))))
    return Dataset(trajs)


def sample_target(spec: CollectionSpec, rng: np.random.Generator) -> RelativePose:
    return RelativePose.from_array(rng.uniform(spec.lower, spec.upper))


def _plan(start: np.ndarray, goal: np.ndarray, speed: float, rate: float, tol: float) -> np.ndarray:
    """Constant-speed straight path from ``start`` to ``goal``, one row per step, goal clamped."""
    delta = goal - start
    dist = float(np.linalg.norm(delta))
    if dist <= tol or speed <= 0:
        return start[None, :]
    step = speed / rate
    n = int(math.ceil(dist / step))
    s = np.minimum(np.arange(n + 1) * step, dist)
    return start + np.outer(s / dist, delta)


def _labels(limb: LimbModel, ee: np.ndarray) -> np.ndarray:
    return np.array([relative_pose(limb, EEPose(e[:3], e[3:])).as_array() for e in ee])


def collect_trajectories(spec: CollectionSpec, limb: LimbModel, params: CapModelParams,
                         rng: np.random.Generator, station: Station,
                         sensor: Optional[SensorArraySpec] = None, first_id: int = 0) -> Dataset:
    """Random point-to-point moves in the pose space above one station.

    The ee starts at relative pose (0, 0, 0, 0) above the station; each move
    picks a uniform target and uniform translational/rotational speeds and
    moves at constant speed, position and orientation converging
    independently. A move that would bring a sensor patch into contact is
    discarded and the ee returns to where the move began.
    """
    sensor = sensor or SensorArraySpec()
    seg = station.segment
    home = place_ee(limb, seg, station.lam, RelativePose(0, 0, 0, 0))
    f = surface_frame(limb, home.position, segment=seg)
    current = home.as_array()
    trajs, aborted = [], 0
    for i in range(spec.n_trajectories):
        target = sample_target(spec, rng)
        v_d = rng.uniform(*spec.speed_bounds)
        v_th = rng.uniform(*spec.ang_speed_bounds)
        noise_rng = np.random.default_rng(rng.integers(2**63))
        goal_pos = home.position + target.dy * f.y + target.dz * f.z
        goal_eul = home.euler + np.array([0.0, target.thy, target.thz])
        pos = _plan(current[:3], goal_pos, v_d, spec.rate_hz, POS_TOL / 10)
        eul = _plan(current[3:], goal_eul, v_th, spec.rate_hz, ANG_TOL / 10)
        n = max(len(pos), len(eul))
        if n > spec.max_steps:
            raise ValueError("trajectory exceeds max_steps")
        pos = np.vstack([pos, np.repeat(pos[-1:], n - len(pos), axis=0)])
        eul = np.vstack([eul, np.repeat(eul[-1:], n - len(eul), axis=0)])
        ee = np.hstack([pos, eul])
        # Stop at the first recorded pose within tolerance of the target.
        close = (np.all(np.abs(pos - goal_pos) <= POS_TOL, axis=1)
                 & np.all(np.abs(eul - goal_eul) <= ANG_TOL, axis=1))
        ee = ee[:int(np.argmax(close)) + 1]
        try:
            frames = simulate_batch(sensor, params, limb, ee, noise_rng)
        except ContactError:
            aborted += 1
            log.info("trajectory %d aborted: contact", first_id + i)
            continue
        trajs.append(Trajectory(first_id + i, station.name, frames, _labels(limb, ee), ee, limb))
        current = ee[-1].copy()
    return Dataset(trajs, {"station": station.name}, aborted)


def collect_stations(spec: CollectionSpec, params: CapModelParams, seed: int,
                     sensor: Optional[SensorArraySpec] = None, limbs: Optional[dict] = None) -> Dataset:
    """Run :func:`collect_trajectories` at every station in ``spec.stations``."""
    by_name = {s.name: s for s in STATIONS}
    out, aborted = [], 0
    for k, name in enumerate(spec.stations):
        st = by_name[name]
        limb = (limbs or {}).get(name) or station_limb(st)
        ds = collect_trajectories(spec, limb, params, substream(seed, "collect", k), st, sensor,
                                  first_id=k * spec.n_trajectories)
        out.extend(ds.trajectories)
        aborted += ds.aborted
    prov = {"seed": seed, "spec_hash": spec.digest(), "stations": list(spec.stations)}
    return Dataset(out, prov, aborted)


def linear_sweep(limb: LimbModel, params: CapModelParams, n_runs: int, rng: np.random.Generator,
                 station: Station, sensor: Optional[SensorArraySpec] = None, start_dz: float = 3.0,
                 end_range: float = 20.0, speed_bounds=(3.0, 10.0), rate_hz: float = 100.0) -> Dataset:
    """Straight moves away from the limb in random upper-half-plane directions.

    Each run starts centred ``start_dz`` above the station with the sensor
    parallel to the limb and stops where the lateral/vertical offset norm
    reaches ``end_range``.
    """
    sensor = sensor or SensorArraySpec()
    start = place_ee(limb, station.segment, station.lam, RelativePose(0.0, start_dz, 0.0, 0.0))
    f = surface_frame(limb, start.position, segment=station.segment)
    trajs = []
    for i in range(n_runs):
        phi = rng.uniform(0.0, math.pi)
        speed = rng.uniform(*speed_bounds)
        noise_rng = np.random.default_rng(rng.integers(2**63))
        u = np.array([math.cos(phi), math.sin(phi)])
        # Distance along u from (0, start_dz) to the circle of radius end_range.
        b = start_dz * u[1]
        s_end = -b + math.sqrt(b * b - (start_dz**2 - end_range**2))
        n = int(math.ceil(s_end / (speed / rate_hz)))
        s = np.minimum(np.arange(n + 1) * speed / rate_hz, s_end)
        offs = np.outer(s, u)
        pos = start.position + offs[:, :1] * f.y + offs[:, 1:] * f.z
        ee = np.hstack([pos, np.repeat(start.euler[None], len(pos), axis=0)])
        frames = simulate_batch(sensor, params, limb, ee, noise_rng)
        trajs.append(Trajectory(i, station.name, frames, _labels(limb, ee), ee, limb))
    return Dataset(trajs, {"station": station.name, "kind": "linear_sweep"})


def rotation_sweep(limb: LimbModel, params: CapModelParams, n_runs: int, rng: np.random.Generator,
                   station: Station, sensor: Optional[SensorArraySpec] = None, dz: float = 5.0,
                   end_angle: float = math.radians(45.0), speed_bounds=(math.pi / 20, math.pi / 8),
                   rate_hz: float = 100.0) -> Dataset:
    """Rotations about the sensor's pitch and yaw axes until the tilt norm reaches ``end_angle``."""
    sensor = sensor or SensorArraySpec()
    start = place_ee(limb, station.segment, station.lam, RelativePose(0.0, dz, 0.0, 0.0))
    trajs = []
    for i in range(n_runs):
        phi = rng.uniform(0.0, 2.0 * math.pi)
        speed = rng.uniform(*speed_bounds)
        noise_rng = np.random.default_rng(rng.integers(2**63))
        n = int(math.ceil(end_angle / (speed / rate_hz)))
        a = np.minimum(np.arange(n + 1) * speed / rate_hz, end_angle)
        eul = start.euler + np.outer(a, [0.0, math.cos(phi), math.sin(phi)])
        ee = np.hstack([np.repeat(start.position[None], len(a), axis=0), eul])
        frames = simulate_batch(sensor, params, limb, ee, noise_rng)
        trajs.append(Trajectory(i, station.name, frames, _labels(limb, ee), ee, limb))
    return Dataset(trajs, {"station": station.name, "kind": "rotation_sweep"})


def check_labels(ds: Dataset, every: int = 1) -> float:
    """Largest deviation between stored labels and labels recomputed from the ee log."""
    worst = 0.0
    for tr in ds.trajectories:
        for i in range(0, len(tr), every):
            p = relative_pose(tr.limb, EEPose(tr.ee[i, :3], tr.ee[i, 3:])).as_array()
            worst = max(worst, float(np.max(np.abs(p - tr.poses[i]))))
    return worst
