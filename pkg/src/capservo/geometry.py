"""Limb models, frames and the limb-relative pose of the sensor.

Conventions used everywhere in the package:

* World frame is right-handed with +z up. Lengths are in cm, angles in rad.
* Orientations are fixed-axis roll-pitch-yaw: ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.
  A positive pitch tilts the +x axis downward.
* Each limb segment runs from its proximal end (``base_point``) to its distal
  end. The sensor's +x axis nominally points distally along the limb.
* The limb frame at k* has x along the segment axis (distal), z along the
  cross-section "up" direction and y = z cross x. Looking along +x with z up,
  +y is to the left; ``D_y`` is positive to the left and ``D_z`` positive up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

E_Z = np.array([0.0, 0.0, 1.0])
VERTICAL_TOL = 1e-9
JOINT_TOL = 1e-6
MAX_JOINT_ANGLE = 2.0 * math.pi / 3.0


class DegenerateAxisError(ValueError):
    """The limb cross-section has no unique top point (vertical axis)."""


def wrap_angle(a):
    """Wrap angle(s) into (-pi, pi]."""
    return math.pi - np.mod(math.pi - np.asarray(a, dtype=float), 2.0 * math.pi)


def _wrap_scalar(a: float) -> float:
    return float(math.pi - math.fmod(math.fmod(math.pi - a, 2 * math.pi) + 2 * math.pi, 2 * math.pi))


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_matrix(rpy: Sequence[float]) -> np.ndarray:
    roll, pitch, yaw = (float(v) for v in rpy)
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


def euler_to_matrix_batch(rpy: np.ndarray) -> np.ndarray:
    """Vectorised :func:`euler_to_matrix` for an (n, 3) array."""
    rpy = np.asarray(rpy, dtype=float).reshape(-1, 3)
    cr, sr = np.cos(rpy[:, 0]), np.sin(rpy[:, 0])
    cp, sp = np.cos(rpy[:, 1]), np.sin(rpy[:, 1])
    cy, sy = np.cos(rpy[:, 2]), np.sin(rpy[:, 2])
    R = np.empty((rpy.shape[0], 3, 3))
    R[:, 0, 0] = cy * cp
    R[:, 0, 1] = cy * sp * sr - sy * cr
    R[:, 0, 2] = cy * sp * cr + sy * sr
    R[:, 1, 0] = sy * cp
    R[:, 1, 1] = sy * sp * sr + cy * cr
    R[:, 1, 2] = sy * sp * cr - cy * sr
    R[:, 2, 0] = -sp
    R[:, 2, 1] = cp * sr
    R[:, 2, 2] = cp * cr
    return R


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


@dataclass(frozen=True, eq=False)
class LimbSegment:
    """A capped conical frustum; a cylinder when both radii are equal.

    ``dorsal`` is an optional unit vector perpendicular to the axis that is
    used as the cross-section "up" direction when the axis is vertical and
    the top point would otherwise be undefined.
    """

    base_point: np.ndarray
    axis_dir: np.ndarray
    length: float
    radius_base: float
    radius_tip: float
    dorsal: Optional[np.ndarray] = None

    def __post_init__(self):
        base = np.asarray(self.base_point, dtype=float).reshape(3)
        axis = np.asarray(self.axis_dir, dtype=float).reshape(3)
        object.__setattr__(self, "base_point", base)
        object.__setattr__(self, "axis_dir", axis)
        if abs(np.linalg.norm(axis) - 1.0) >= 1e-9:
            raise ValueError(f"axis_dir must be unit length, got norm {np.linalg.norm(axis)!r}")
        for name in ("length", "radius_base", "radius_tip"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.dorsal is not None:
            d = np.asarray(self.dorsal, dtype=float).reshape(3)
            d = d - np.dot(d, axis) * axis
            object.__setattr__(self, "dorsal", d / np.linalg.norm(d))

    @property
    def tip_point(self) -> np.ndarray:
        return self.base_point + self.length * self.axis_dir

    @property
    def taper(self) -> float:
        """Radius change per cm along the axis."""
        return (self.radius_tip - self.radius_base) / self.length

    def radius_at(self, lam: float) -> float:
        lam = min(max(lam, 0.0), self.length)
        return self.radius_base + self.taper * lam

    def up_direction(self) -> np.ndarray:
        """Unit vector in the cross-section plane pointing to the top point."""
        n = self.axis_dir
        nz = float(n[2])
        if abs(nz) > 1.0 - VERTICAL_TOL:
            if self.dorsal is None:
                raise DegenerateAxisError("segment axis is vertical; cross-section has no unique top point")
            return self.dorsal
        u = E_Z - nz * n
        return u / np.linalg.norm(u)

    def transformed(self, R: np.ndarray, d: np.ndarray) -> "LimbSegment":
        dorsal = None if self.dorsal is None else R @ self.dorsal
        axis = R @ self.axis_dir
        return LimbSegment(R @ self.base_point + d, axis / np.linalg.norm(axis), self.length,
                           self.radius_base, self.radius_tip, dorsal)


@dataclass(frozen=True)
class LateralSway:
    """Rigid sinusoidal limb motion.

    Without a pivot the whole limb translates by ``amplitude*sin(2 pi t/period)``
    along ``direction``. With a pivot the limb instead yaws about a vertical
    axis through ``pivot`` so that a point ``lever`` cm from the pivot sways by
    ``amplitude``.
    """

    amplitude: float
    period: float
    direction: tuple = (0.0, 1.0, 0.0)
    pivot: Optional[tuple] = None
    lever: float = 0.0

    def __call__(self, t: float):
        s = math.sin(2.0 * math.pi * t / self.period)
        if self.pivot is None:
            return np.eye(3), self.amplitude * s * _unit(self.direction)
        angle = math.asin(self.amplitude * s / self.lever)
        R = rot_z(angle)
        p = np.asarray(self.pivot, dtype=float)
        return R, p - R @ p


@dataclass(frozen=True, eq=False)
class LimbModel:
    """One or two segments ordered proximal to distal, plus optional motion.

    ``motion`` maps time (s) to a rigid transform ``(R, d)`` applied to the
    whole limb; ``None`` means the limb is static.
    """

    segments: tuple
    joint_angle: float = 0.0
    motion: Optional[Callable] = None
    name: str = "limb"

    def __post_init__(self):
        segs = tuple(self.segments)
        object.__setattr__(self, "segments", segs)
        if not 1 <= len(segs) <= 2:
            raise ValueError("a limb has one or two segments")
        if len(segs) == 2 and np.linalg.norm(segs[0].tip_point - segs[1].base_point) > JOINT_TOL:
            raise ValueError("adjacent segments must share the joint endpoint")
        if not (0.0 <= self.joint_angle <= MAX_JOINT_ANGLE + 1e-12):
            raise ValueError(f"joint_angle {self.joint_angle!r} outside [0, 2pi/3]")

    @property
    def joint_point(self) -> Optional[np.ndarray]:
        return self.segments[0].tip_point if len(self.segments) == 2 else None

    def at(self, t: float) -> "LimbModel":
        """The static limb at time ``t``."""
        if self.motion is None:
            return self
        R, d = self.motion(t)
        segs = tuple(s.transformed(R, np.asarray(d, dtype=float)) for s in self.segments)
        return LimbModel(segs, self.joint_angle, None, self.name)


@dataclass(frozen=True)
class EEPose:
    position: np.ndarray
    euler: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3).copy())
        object.__setattr__(self, "euler", wrap_angle(np.asarray(self.euler, dtype=float).reshape(3)))

    @property
    def rotation(self) -> np.ndarray:
        return euler_to_matrix(self.euler)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.position, self.euler])


@dataclass(frozen=True)
class RelativePose:
    dy: float
    dz: float
    thy: float
    thz: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dy, self.dz, self.thy, self.thz])

    @classmethod
    def from_array(cls, a) -> "RelativePose":
        a = np.asarray(a, dtype=float)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


@dataclass(frozen=True)
class SurfaceFrame:
    """Reference frame at k* on the segment nearest the sensor."""

    segment: int
    lam: float
    k0: np.ndarray
    k_star: np.ndarray
    x: np.ndarray  # axis direction
    y: np.ndarray
    z: np.ndarray  # cross-section up direction
    tangent: np.ndarray  # surface line through k* along the limb

    @property
    def yaw(self) -> float:
        return math.atan2(-self.y[0], self.y[1])

    @property
    def pitch(self) -> float:
        h = np.array([math.cos(self.yaw), math.sin(self.yaw), 0.0])
        return math.atan2(-self.tangent[2], float(np.dot(self.tangent, h)))


def _axis_distance(seg: LimbSegment, p: np.ndarray) -> float:
    lam = float(np.clip(np.dot(p - seg.base_point, seg.axis_dir), 0.0, seg.length))
    return float(np.linalg.norm(p - (seg.base_point + lam * seg.axis_dir)))


def nearest_segment(limb: LimbModel, point) -> int:
    """Index of the segment whose axis is closest; ties go to the distal one."""
    p = np.asarray(point, dtype=float)
    best, best_d = 0, math.inf
    for i, seg in enumerate(limb.segments):
        d = _axis_distance(seg, p)
        if d <= best_d + 1e-12:
            best, best_d = i, d
    return best


def surface_frame(limb: LimbModel, point, segment: Optional[int] = None) -> SurfaceFrame:
    p = np.asarray(point, dtype=float).reshape(3)
    i = nearest_segment(limb, p) if segment is None else segment
    seg = limb.segments[i]
    n = seg.axis_dir
    lam = float(np.clip(np.dot(p - seg.base_point, n), 0.0, seg.length))
    k0 = seg.base_point + lam * n
    u = seg.up_direction()
    k_star = k0 + seg.radius_at(lam) * u
    y = np.cross(u, n)
    tangent = _unit(n + seg.taper * u)
    return SurfaceFrame(i, lam, k0, k_star, n, y, u, tangent)


def surface_point_k_star(limb: LimbModel, sensor_center) -> np.ndarray:
    """Top point of the limb cross-section through the sensor center."""
    return surface_frame(limb, sensor_center).k_star


def relative_pose(limb: LimbModel, ee: EEPose, t: float = 0.0, mount_offset=None) -> RelativePose:
    """Pose (D_y, D_z, theta_y, theta_z) of the sensor relative to the limb at time ``t``."""
    static = limb.at(t)
    center = ee.position if mount_offset is None else ee.position + ee.rotation @ np.asarray(mount_offset)
    f = surface_frame(static, center)
    off = center - f.k_star
    thy = _wrap_scalar(float(ee.euler[1]) - f.pitch)
    thz = _wrap_scalar(float(ee.euler[2]) - f.yaw)
    return RelativePose(float(np.dot(off, f.y)), float(np.dot(off, f.z)), thy, thz)


def place_ee(limb: LimbModel, segment: int, lam: float, pose: RelativePose,
             roll: float = 0.0, t: float = 0.0) -> EEPose:
    """Inverse of :func:`relative_pose`: the ee pose at ``pose`` above station ``lam``."""
    static = limb.at(t)
    seg = static.segments[segment]
    f = surface_frame(static, seg.base_point + lam * seg.axis_dir, segment=segment)
    pos = f.k_star + pose.dy * f.y + pose.dz * f.z
    return EEPose(pos, np.array([roll, f.pitch + pose.thy, f.yaw + pose.thz]))


def _capped_cone_sdf(p: np.ndarray, a: np.ndarray, b: np.ndarray, ra: float, rb: float) -> np.ndarray:
    """Exact signed distance to a capped cone (frustum with flat end caps)."""
    ba = b - a
    baba = float(np.dot(ba, ba))
    pa = p - a
    papa = np.einsum("...i,...i->...", pa, pa)
    paba = (pa @ ba) / baba
    x = np.sqrt(np.maximum(papa - paba * paba * baba, 0.0))
    cax = np.maximum(0.0, x - np.where(paba < 0.5, ra, rb))
    cay = np.abs(paba - 0.5) - 0.5
    rba = rb - ra
    k = rba * rba + baba
    f = np.clip((rba * (x - ra) + paba * baba) / k, 0.0, 1.0)
    cbx = x - ra - f * rba
    cby = paba - f
    s = np.where((cbx < 0.0) & (cay < 0.0), -1.0, 1.0)
    return s * np.sqrt(np.minimum(cax * cax + cay * cay * baba, cbx * cbx + cby * cby * baba))


def signed_clearance(limb: LimbModel, point, t: float = 0.0):
    """Distance from point(s) to the limb surface, negative inside.

    Accepts a single point or an array of shape (..., 3).
    """
    static = limb.at(t)
    p = np.asarray(point, dtype=float)
    d = None
    for seg in static.segments:
        di = _capped_cone_sdf(p, seg.base_point, seg.tip_point, seg.radius_base, seg.radius_tip)
        d = di if d is None else np.minimum(d, di)
    return float(d) if np.ndim(d) == 0 else d


@dataclass(frozen=True)
class LimbSpec:
    """Blueprint for a two-segment limb that :func:`articulate` bends.

    ``plane`` selects how the joint angle acts on the distal segment:
    ``"horizontal"`` yaws it (elbow), ``"vertical"`` pitches it toward the
    ground (knee, forearm tilt). ``fixed_bend`` is a horizontal bend applied
    before articulation, e.g. the right-angle elbow of the forearm-tilt task.
    """

    name: str
    proximal_length: float
    distal_length: float
    radius_root: float
    radius_joint: float
    radius_end: float
    plane: str = "horizontal"
    fixed_bend: float = 0.0
    base_point: tuple = (0.0, 0.0, 0.0)
    heading: float = 0.0


def articulate(spec: LimbSpec, joint_angle: float) -> LimbModel:
    """Build the limb of ``spec`` with its joint bent by ``joint_angle``."""
    if not (0.0 <= joint_angle <= MAX_JOINT_ANGLE + 1e-12):
        raise ValueError(f"joint_angle {joint_angle!r} outside [0, 2pi/3]")
    if spec.plane not in ("horizontal", "vertical"):
        raise ValueError(f"unknown articulation plane {spec.plane!r}")
    d0 = np.array([math.cos(spec.heading), math.sin(spec.heading), 0.0])
    prox = LimbSegment(np.asarray(spec.base_point, dtype=float), d0, spec.proximal_length,
                       spec.radius_root, spec.radius_joint)
    bend = spec.fixed_bend + (joint_angle if spec.plane == "horizontal" else 0.0)
    dh = rot_z(bend) @ d0
    if spec.plane == "vertical":
        direction = math.cos(joint_angle) * dh - math.sin(joint_angle) * E_Z
        dorsal = math.cos(joint_angle) * E_Z + math.sin(joint_angle) * dh
    else:
        direction, dorsal = dh, E_Z.copy()
    # Snap tiny components so 0 and 90 degree configurations are exact.
    direction = np.where(np.abs(direction) < 1e-15, 0.0, direction)
    direction = direction / np.linalg.norm(direction)
    dist = LimbSegment(prox.tip_point, direction, spec.distal_length, spec.radius_joint,
                       spec.radius_end, dorsal)
    return LimbModel((prox, dist), joint_angle, None, spec.name)


def straight_limb(radius: float, length: float = 60.0, radius_tip: Optional[float] = None,
                  base_point=(0.0, 0.0, 0.0), name: str = "cylinder") -> LimbModel:
    """A single horizontal segment along +x."""
    seg = LimbSegment(np.asarray(base_point, dtype=float), np.array([1.0, 0.0, 0.0]), length,
                      radius, radius if radius_tip is None else radius_tip)
    return LimbModel((seg,), 0.0, None, name)


# Anthropometric blueprints. Circumferences at the stations fall in 13-40 cm.
ARM = LimbSpec("arm", proximal_length=30.0, distal_length=26.0,
               radius_root=4.6, radius_joint=4.1, radius_end=2.6)
LEG = LimbSpec("leg", proximal_length=42.0, distal_length=40.0,
               radius_root=7.0, radius_joint=5.7, radius_end=3.6, plane="vertical")


@dataclass(frozen=True)
class Station:
    """A sensing location on a limb: segment index and distance along it."""

    name: str
    limb: str
    segment: int
    lam: float


STATIONS = (
    Station("wrist", "arm", 1, 20.0),
    Station("forearm", "arm", 1, 9.0),
    Station("upper_arm", "arm", 0, 15.0),
    Station("ankle", "leg", 1, 30.0),
    Station("shin", "leg", 1, 12.0),
    Station("knee", "leg", 0, 35.0),
)


def station_limb(station: Station) -> LimbModel:
    """Straight (unbent) limb on which ``station`` lives."""
    spec = {"arm": ARM, "leg": LEG}[station.limb]
    return articulate(spec, 0.0)


def station_radius(station: Station) -> float:
    return station_limb(station).segments[station.segment].radius_at(station.lam)
