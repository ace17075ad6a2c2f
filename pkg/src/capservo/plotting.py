"""Matplotlib figures for the report command. Rendering only; no analysis here."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .sensor import smooth_for_plotting  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def plot_heatmap(grid, path, title: str = ""):
    fig, ax = plt.subplots(figsize=(6.0, 3.6 if grid.kind == "translational" else 5.0))
    unit = "cm" if grid.kind == "translational" else "deg"
    masked = np.ma.masked_invalid(grid.mean)
    dx = (grid.x_centers[1] - grid.x_centers[0]) / 2
    dy = (grid.y_centers[1] - grid.y_centers[0]) / 2
    extent = (grid.x_centers[0] - dx, grid.x_centers[-1] + dx, grid.y_centers[0] - dy, grid.y_centers[-1] + dy)
    im = ax.imshow(masked, origin="lower", extent=extent, cmap="viridis", aspect="equal")
    fig.colorbar(im, ax=ax, label=f"mean error ({unit})")
    if grid.kind == "translational":
        ax.set_xlabel("D_y (cm)")
        ax.set_ylabel("D_z (cm)")
    else:
        ax.set_xlabel("theta_y (deg)")
        ax.set_ylabel("theta_z (deg)")
    ax.set_title(title)
    _save(fig, path)


def plot_loss(train_mse, val_mse, path):
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    epochs = np.arange(1, len(train_mse) + 1)
    ax.plot(epochs, train_mse, label="train")
    if len(val_mse) and not np.all(np.isnan(val_mse)):
        ax.plot(epochs, val_mse, label="validation")
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE (scaled units)")
    ax.legend()
    _save(fig, path)


def plot_distance_curves(rows, path, target: float = 5.0):
    """``rows`` are (t_s, distance, target, series) tuples."""
    fig, ax = plt.subplots(figsize=(6.0, 3.4))
    series = sorted({r[3] for r in rows})
    for s in series:
        pts = np.array([(r[0], r[1]) for r in rows if r[3] == s])
        ax.plot(pts[:, 0], pts[:, 1], label=s)
    ax.axhline(target, color="k", ls="--", lw=1, label="target")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("estimated distance (cm)")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_capacitance(frames, path, rate_hz: float = 100.0):
    """Smoothed, per-electrode normalised traces of a capture sequence."""
    y = smooth_for_plotting(frames)
    t = np.arange(len(y)) / rate_hz
    fig, ax = plt.subplots(figsize=(6.0, 3.2))
    for i in range(y.shape[1]):
        ax.plot(t, y[:, i], label=f"c{i + 1}")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("normalised capacitance")
    ax.legend(ncol=3, fontsize=8)
    _save(fig, path)


def plot_servo_log(log, path):
    fig, axes = plt.subplots(2, 1, figsize=(6.0, 4.6), sharex=True)
    t = log.column("t_s")
    axes[0].plot(t, log.column("dz_hat"), label="D_z estimate")
    axes[0].plot(t, log.column("dz"), label="D_z true")
    axes[0].plot(t, log.column("clearance"), label="clearance")
    axes[0].set_ylabel("cm")
    axes[0].legend(fontsize=8)
    axes[1].plot(t, np.degrees(log.column("thy_hat")), label="theta_y estimate")
    axes[1].plot(t, np.degrees(log.column("thz_hat")), label="theta_z estimate")
    axes[1].set_ylabel("deg")
    axes[1].set_xlabel("time (s)")
    axes[1].legend(fontsize=8)
    _save(fig, path)
