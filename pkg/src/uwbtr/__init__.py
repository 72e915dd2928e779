"""uwbtr: UWB teach-and-repeat simulation and estimation.

A robot carrying three UWB tags, an IMU and a height sensor maps fixed
anchors at unknown positions while being driven along a closed trajectory
(teach pass), then retraces that trajectory autonomously using only the
stored estimates (repeat pass).

Subpackages / modules:
  lie          rotation + extended-pose group operations
  world        ground-truth environment, vehicle kinematics, sensor sampling
  ranging      two-way-ranging protocol, ToF combinations, range models
  anchors      anchor map and the teach/repeat sequence trackers
  ekf          19-state error-state EKF used by both passes
  anchor_init  batch MAP localization of newly detected anchors
  repeat_init  static batch initialization of the repeat pass
  control      left-invariant LQR tracking controller with feedforward fallback
  harness      end-to-end trials, Monte-Carlo campaigns, metrics
  config       trial configuration (JSON in, dataclasses out)
"""

from . import lie
from .config import TrialConfig, load_config
from .harness import run_trial, run_monte_carlo, compute_rmse

__all__ = [
    "lie",
    "TrialConfig",
    "load_config",
    "run_trial",
    "run_monte_carlo",
    "compute_rmse",
]
