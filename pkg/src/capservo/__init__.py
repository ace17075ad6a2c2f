"""Capacitive servoing simulator: limb geometry, a synthetic electrode array,
an MLP pose estimator and a PD servo loop."""

__version__ = "0.1.0"
