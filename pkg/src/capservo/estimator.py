"""Windowed capacitance to 4D pose regression with a numpy MLP.

Model file layout (all little-endian)::

    b"CSRV"                     magic
    u32 version                 currently 1
    u32 n_dims, u32 dims[n]     e.g. 300 400 400 400 400 4
    f64 in_mean[dims[0]]        input z-score stats
    f64 in_sd[dims[0]]
    f64 out_scale[dims[-1]]     network output is divided by this
    for each layer: f64 W[d_in, d_out] (row-major), f64 b[d_out]
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .sensor import N_ELECTRODES

log = logging.getLogger(__name__)

WINDOW = 50
LAYER_DIMS = (WINDOW * N_ELECTRODES, 400, 400, 400, 400, 4)
MAGIC = b"CSRV"
FORMAT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class WindowSample:
    x: np.ndarray  # (h*6,), time-major then electrode
    y: np.ndarray  # (4,) dy, dz, thy, thz


@dataclass
class WindowedData:
    """Windows over a set of trajectories.

    Windowing only reads the source frames; ``x`` holds fresh copies, so
    the caller's arrays are never mutated.
    """

    x: np.ndarray  # (n, h*6)
    y: np.ndarray  # (n, 4)
    traj: np.ndarray  # (n,) trajectory index of every window

    def __len__(self):
        return len(self.y)

    def samples(self) -> list[WindowSample]:
        return [WindowSample(self.x[i], self.y[i]) for i in range(len(self))]

    def subset(self, mask) -> "WindowedData":
        return WindowedData(self.x[mask], self.y[mask], self.traj[mask])


def windows_from_trajectory(frames: np.ndarray, poses: np.ndarray, h: int = WINDOW):
    frames = np.asarray(frames, dtype=float)
    poses = np.asarray(poses, dtype=float)
    if len(frames) != len(poses):
        raise ValueError("frames and poses must be aligned")
    if len(frames) < h:
        raise ValueError(f"series of length {len(frames)} is shorter than the window {h}")
    view = np.lib.stride_tricks.sliding_window_view(frames, (h, frames.shape[1]))[:, 0]
    return view.reshape(len(view), -1), poses[h - 1:]


def window_dataset(trajectories: Sequence[tuple[np.ndarray, np.ndarray]], h: int = WINDOW,
                   skip_short: bool = True) -> WindowedData:
    """Window each (frames, poses) trajectory separately; windows never cross trajectories.

    Trajectories shorter than ``h`` are skipped when ``skip_short`` is set,
    otherwise they raise.
    """
    xs, ys, ids = [], [], []
    for i, (frames, poses) in enumerate(trajectories):
        if len(frames) < h and skip_short:
            continue
        x, y = windows_from_trajectory(frames, poses, h)
        xs.append(x)
        ys.append(y)
        ids.append(np.full(len(y), i))
    if not xs:
        raise ValueError(f"no trajectory is at least {h} frames long")
    return WindowedData(np.concatenate(xs), np.concatenate(ys), np.concatenate(ids))


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 128
    epochs: int = 20
    seed: int = 0
    angle_scale: float = 10.0  # cm per rad in the loss

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class MlpModel:
    weights: list
    biases: list
    in_mean: np.ndarray
    in_sd: np.ndarray
    out_scale: np.ndarray

    @property
    def dims(self) -> tuple:
        return tuple([self.weights[0].shape[0]] + [w.shape[1] for w in self.weights])

    def __post_init__(self):
        if not (np.all(np.isfinite(self.in_mean)) and np.all(np.isfinite(self.in_sd)) and np.all(self.in_sd > 0)):
            raise ValueError("normalisation stats must be finite with sd > 0")

    def predict(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self, x)

    def __call__(self, window, context=None) -> np.ndarray:
        return mlp_forward(self, np.asarray(window).reshape(-1))

    def digest(self) -> str:
        return hashlib.sha256(model_to_bytes(self)).hexdigest()


def init_model(dims: Sequence[int] = LAYER_DIMS, rng: Optional[np.random.Generator] = None,
               angle_scale: float = 10.0) -> MlpModel:
    """He-uniform weights, zero biases, identity normalisation."""
    rng = np.random.default_rng(0) if rng is None else rng
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        bound = math.sqrt(6.0 / d_in)
        weights.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
        biases.append(np.zeros(d_out))
    out_scale = np.ones(dims[-1])
    if dims[-1] == 4:
        out_scale[2:] = angle_scale
    return MlpModel(weights, biases, np.zeros(dims[0]), np.ones(dims[0]), out_scale)


def _forward_raw(weights, biases, z: np.ndarray, keep: bool = False):
    """Forward pass on normalised inputs; returns output and optionally activations."""
    acts = [z]
    a = z
    last = len(weights) - 1
    for i, (W, b) in enumerate(zip(weights, biases)):
        a = a @ W + b
        if i < last:
            a = np.maximum(a, 0.0)
        acts.append(a)
    return (a, acts) if keep else a


def mlp_forward(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Pose estimate(s) for one window (d,) or a batch (n, d)."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    z = (x - model.in_mean) / model.in_sd
    return _forward_raw(model.weights, model.biases, z) / model.out_scale


def mse_and_grads(weights, biases, z: np.ndarray, y_scaled: np.ndarray):
    """Mean squared error over all outputs and its gradients (backprop)."""
    out, acts = _forward_raw(weights, biases, z, keep=True)
    diff = out - y_scaled
    loss = float(np.mean(diff * diff))
    g = 2.0 * diff / diff.size
    gW, gb = [None] * len(weights), [None] * len(weights)
    for i in range(len(weights) - 1, -1, -1):
        gW[i] = acts[i].T @ g
        gb[i] = g.sum(axis=0)
        if i > 0:
            g = (g @ weights[i].T) * (acts[i] > 0)
    return loss, gW, gb


def relu_pattern(weights, biases, z) -> list:
    _, acts = _forward_raw(weights, biases, z, keep=True)
    return [a > 0 for a in acts[1:-1]]


@dataclass
class TrainResult:
    model: MlpModel
    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)

    def loss_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_mse", "val_mse"])
        for e, tr in enumerate(self.train_mse, start=1):
            va = self.val_mse[e - 1] if e - 1 < len(self.val_mse) else float("nan")
            w.writerow([e, f"{tr:.9g}", f"{va:.9g}"])
        return buf.getvalue()


def _eval_mse(model: MlpModel, data: WindowedData, chunk: int = 4096) -> float:
    total = 0.0
    for s in range(0, len(data), chunk):
        pred = mlp_forward(model, data.x[s:s + chunk]) * model.out_scale
        total += float(np.sum((pred - data.y[s:s + chunk] * model.out_scale) ** 2))
    return total / (len(data) * model.out_scale.size)


def mlp_train(data: WindowedData, config: TrainConfig, val: Optional[WindowedData] = None,
              dims: Optional[Sequence[int]] = None, progress=None) -> TrainResult:
    """Adam on mini-batch MSE. Normalisation stats come from ``data`` only."""
    if len(data) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    dims = tuple(dims) if dims is not None else (data.x.shape[1],) + LAYER_DIMS[1:]
    model = init_model(dims, rng, config.angle_scale)
    model.in_mean = data.x.mean(axis=0)
    sd = data.x.std(axis=0)
    model.in_sd = np.where(sd > 1e-12, sd, 1.0)
    Ws, bs = model.weights, model.biases
    params = Ws + bs
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    step = 0
    result = TrainResult(model)
    n = len(data)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, config.batch_size):
            idx = np.sort(order[s:s + config.batch_size])
            z = (data.x[idx] - model.in_mean) / model.in_sd
            loss, gW, gb = mse_and_grads(Ws, bs, z, data.y[idx] * model.out_scale)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch + 1}, step {step}")
            total += loss * len(idx)
            step += 1
            c1 = 1.0 - config.beta1 ** step
            c2 = 1.0 - config.beta2 ** step
            for p, g, mi, vi in zip(params, gW + gb, m, v):
                mi *= config.beta1
                mi += (1.0 - config.beta1) * g
                vi *= config.beta2
                vi += (1.0 - config.beta2) * g * g
                p -= config.lr * (mi / c1) / (np.sqrt(vi / c2) + config.eps)
        result.train_mse.append(total / n)
        result.val_mse.append(_eval_mse(model, val) if val is not None and len(val) else float("nan"))
        log.info("epoch %d train_mse %.6g val_mse %.6g", epoch + 1, result.train_mse[-1], result.val_mse[-1])
        if progress is not None:
            progress(epoch + 1, result.train_mse[-1], result.val_mse[-1])
    return result


@dataclass
class PoseErrors:
    d_eps: float  # cm, mean of 0.5 * (|e_dy| + |e_dz|)
    theta_eps: float  # deg
    mae: np.ndarray  # (4,) dy cm, dz cm, thy deg, thz deg
    sd: np.ndarray  # (4,) standard deviation of the absolute errors
    n: int


def pose_errors(pred, truth) -> PoseErrors:
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if len(pred) == 0:
        raise ValueError("no samples")
    err = np.abs(pred - truth)
    if err.shape[1] == 4:
        err[:, 2:] = np.degrees(err[:, 2:])
    d_eps = float(np.mean(0.5 * (err[:, 0] + err[:, 1])))
    th_eps = float(np.mean(0.5 * (err[:, 2] + err[:, 3]))) if err.shape[1] == 4 else float("nan")
    return PoseErrors(d_eps, th_eps, err.mean(axis=0), err.std(axis=0), len(err))


def model_to_bytes(model: MlpModel) -> bytes:
    dims = model.dims
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(dims)),
             struct.pack(f"<{len(dims)}I", *dims)]
    for arr in (model.in_mean, model.in_sd, model.out_scale):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    for W, b in zip(model.weights, model.biases):
        parts.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def model_from_bytes(blob: bytes) -> MlpModel:
    if blob[:4] != MAGIC:
        raise ValueError("not a model file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version}")
    (nd,) = struct.unpack_from("<I", blob, 8)
    dims = struct.unpack_from(f"<{nd}I", blob, 12)
    off = 12 + 4 * nd

    def take(count, shape=None):
        nonlocal off
        a = np.frombuffer(blob, dtype="<f8", count=count, offset=off).astype(float)
        off += 8 * count
        return a.reshape(shape) if shape else a

    in_mean, in_sd, out_scale = take(dims[0]), take(dims[0]), take(dims[-1])
    Ws, bs = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        Ws.append(take(d_in * d_out, (d_in, d_out)))
        bs.append(take(d_out))
    if off != len(blob):
        raise ValueError("trailing bytes in model file")
    return MlpModel(Ws, bs, in_mean, in_sd, out_scale)


def save_model(model: MlpModel, path) -> str:
    blob = model_to_bytes(model)
    with open(path, "wb") as fh:
        fh.write(blob)
    return hashlib.sha256(blob).hexdigest()


def load_model(path) -> MlpModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
