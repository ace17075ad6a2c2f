"""Synthetic six-electrode capacitive array.

Electrode order is fixed in the ee frame, with "top" the +x (forward) row and
"left" the +y column::

    0 top-left      1 top-center      2 top-right
    3 bottom-left   4 bottom-center   5 bottom-right

Each electrode is split into a grid of square patches. A patch contributes
``area / max(d, d_min)`` where ``d`` is its clearance to the limb surface, so
readings grow as the limb gets closer or presents more surface nearby.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import EEPose, LimbModel, euler_to_matrix_batch, signed_clearance, straight_limb

N_ELECTRODES = 6
D_MIN = 0.3


class ContactError(RuntimeError):
    """A sensor patch touches or penetrates the limb."""


@dataclass(frozen=True)
class SensorArraySpec:
    electrode_size: float = 3.0
    plate_size: tuple = (11.5, 8.5)  # lateral, longitudinal
    pitch_lateral: float = 3.75
    pitch_longitudinal: float = 4.5
    mount_offset: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        half_w = self.pitch_lateral + self.electrode_size / 2
        half_l = self.pitch_longitudinal / 2 + self.electrode_size / 2
        if half_w > self.plate_size[0] / 2 + 1e-12 or half_l > self.plate_size[1] / 2 + 1e-12:
            raise ValueError("electrodes do not fit on the plate")

    def local_centers(self) -> np.ndarray:
        """Electrode centers in the ee frame, shape (6, 3)."""
        xs = (self.pitch_longitudinal / 2, -self.pitch_longitudinal / 2)
        ys = (self.pitch_lateral, 0.0, -self.pitch_lateral)
        off = np.asarray(self.mount_offset, dtype=float)
        return np.array([[x, y, 0.0] for x in xs for y in ys]) + off


@dataclass(frozen=True)
class CapModelParams:
    gain: float = 1.0
    baseline: float = 1.0
    noise_sd: Optional[float] = None  # None: calibrate with calibrated_noise_sd()
    crosstalk: float = 0.05
    patch_resolution: int = 6
    range_cutoff: float = 40.0

    def __post_init__(self):
        if self.gain < 0 or self.baseline < 0 or self.range_cutoff <= 0:
            raise ValueError("gain, baseline and range_cutoff must be non-negative")
        if self.noise_sd is not None and self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        if not 0.0 <= self.crosstalk <= 0.2:
            raise ValueError("crosstalk must lie in [0, 0.2]")
        if self.patch_resolution < 1:
            raise ValueError("patch_resolution must be >= 1")


@dataclass(frozen=True)
class CapFrame:
    t: int
    c: np.ndarray


def patch_offsets(spec: SensorArraySpec, resolution: int) -> tuple[np.ndarray, float]:
    """Patch centers of every electrode in the ee frame, shape (6, r*r, 3), and patch area."""
    h = spec.electrode_size / resolution
    g = (np.arange(resolution) + 0.5) * h - spec.electrode_size / 2
    gx, gy = np.meshgrid(g, g, indexing="ij")
    grid = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
    return spec.local_centers()[:, None, :] + grid[None, :, :], h * h


def plate_outline(spec: SensorArraySpec, n: int = 5) -> np.ndarray:
    """Sample points on the plate (ee frame) used for contact checks."""
    w, l = spec.plate_size[0] / 2, spec.plate_size[1] / 2
    xs, ys = np.linspace(-l, l, n), np.linspace(-w, w, n)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1) + np.asarray(spec.mount_offset)


def electrode_centers(spec: SensorArraySpec, ee: EEPose) -> tuple[np.ndarray, np.ndarray]:
    """World positions of the six electrode centers and the plate normal (facing down)."""
    R = ee.rotation
    return spec.local_centers() @ R.T + ee.position, -R[:, 2]


def _to_world(local: np.ndarray, ee_arr: np.ndarray) -> np.ndarray:
    R = euler_to_matrix_batch(ee_arr[:, 3:])
    flat = local.reshape(-1, 3)
    return np.einsum("nij,pj->npi", R, flat) + ee_arr[:, None, :3]


def raw_capacitance(spec: SensorArraySpec, params: CapModelParams, limb: LimbModel,
                    ee_arr: np.ndarray, times=None, allow_contact: bool = False) -> np.ndarray:
    """Noise-free, crosstalk-free readings for a batch of ee poses (n, 6) -> (n, 6)."""
    ee_arr = np.atleast_2d(np.asarray(ee_arr, dtype=float))
    local, area = patch_offsets(spec, params.patch_resolution)
    pts = _to_world(local, ee_arr)  # (n, 6*r*r, 3)
    if times is None or limb.motion is None:
        d = signed_clearance(limb, pts)
    else:
        d = np.stack([signed_clearance(limb, pts[i], float(t)) for i, t in enumerate(times)])
    if not allow_contact and np.any(d <= 0.0):
        raise ContactError("sensor patch in contact with the limb")
    contrib = np.where(d > params.range_cutoff, 0.0, area / np.maximum(d, D_MIN))
    # Sorted sums make the result independent of patch order, so mirrored poses agree bit for bit.
    per_patch = np.sort(contrib.reshape(len(ee_arr), N_ELECTRODES, -1), axis=2)
    return params.baseline + params.gain * per_patch.sum(axis=2)


def mix_crosstalk(c: np.ndarray, kappa: float) -> np.ndarray:
    # Sorted mean so a permutation of the electrodes permutes the output exactly.
    return (1.0 - kappa) * c + kappa * np.sort(c, axis=-1).mean(axis=-1, keepdims=True)


def simulate_batch(spec: SensorArraySpec, params: CapModelParams, limb: LimbModel,
                   ee_arr: np.ndarray, rng: Optional[np.random.Generator], times=None,
                   allow_contact: bool = False) -> np.ndarray:
    """Readings for a batch of poses, noise drawn from ``rng`` in frame order."""
    c = mix_crosstalk(raw_capacitance(spec, params, limb, ee_arr, times, allow_contact), params.crosstalk)
    sd = resolve_noise_sd(spec, params)
    if sd > 0 and rng is not None:
        c = c + sd * rng.standard_normal(c.shape)
    return np.maximum(c, 0.0)


def simulate_capacitance(spec: SensorArraySpec, params: CapModelParams, limb: LimbModel,
                         ee: EEPose, t: int, rng: Optional[np.random.Generator],
                         time_s: float = 0.0, allow_contact: bool = False) -> CapFrame:
    c = simulate_batch(spec, params, limb, ee.as_array()[None], rng, [time_s], allow_contact)
    return CapFrame(t, c[0])


@lru_cache(maxsize=32)
def calibrated_noise_sd(spec: SensorArraySpec, params: CapModelParams, fraction: float = 0.005) -> float:
    """0.5% of the mean reading 5 cm above a 3 cm-radius cylinder."""
    limb = straight_limb(3.0, 100.0, base_point=(-50.0, 0.0, 0.0))
    ee = np.array([[0.0, 0.0, 8.0, 0.0, 0.0, 0.0]])
    c = mix_crosstalk(raw_capacitance(spec, params, limb, ee), params.crosstalk)
    return float(fraction * c.mean())


def resolve_noise_sd(spec: SensorArraySpec, params: CapModelParams) -> float:
    if params.noise_sd is not None:
        return params.noise_sd
    return calibrated_noise_sd(spec, replace(params, noise_sd=0.0))


def smooth_for_plotting(frames: Sequence[np.ndarray] | np.ndarray, alpha: float = 0.02) -> np.ndarray:
    """One-pole low-pass ``y_t = (1-alpha) y_{t-1} + alpha x_t`` then per-electrode [0, 1] scaling.

    Display only; the estimator always consumes raw frames.
    """
    x = np.asarray([f.c if isinstance(f, CapFrame) else f for f in frames], dtype=float)
    if x.size == 0:
        raise ValueError("empty series")
    y = lowpass(x, alpha)
    lo, hi = y.min(axis=0), y.max(axis=0)
    span = hi - lo
    out = np.zeros_like(y)
    ok = span > 0
    out[:, ok] = (y[:, ok] - lo[ok]) / span[ok]
    # Constant channels carry no shape; leave them at their (un-normalised) value.
    out[:, ~ok] = y[:, ~ok]
    return out


def lowpass(x: np.ndarray, alpha: float = 0.02) -> np.ndarray:
    """The recursion alone, with the state initialised to the first sample."""
    x = np.asarray(x, dtype=float)
    y = np.empty_like(x)
    prev = x[0].copy()
    for i in range(len(x)):
        prev = (1.0 - alpha) * prev + alpha * x[i]
        y[i] = prev
    return y


def write_frames_csv(frames: Iterable[CapFrame], path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "c1", "c2", "c3", "c4", "c5", "c6"])
    for f in frames:
        w.writerow([f.t] + [f"{v:.9g}" for v in f.c])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def read_frames_csv(path) -> list[CapFrame]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != ["t", "c1", "c2", "c3", "c4", "c5", "c6"]:
            raise ValueError(f"unexpected header {header!r}")
        return [CapFrame(int(row[0]), np.array([float(v) for v in row[1:]])) for row in r]
