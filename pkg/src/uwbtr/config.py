"""Trial configuration: one JSON document fully determines a run.

Identical config plus master seed must give bit-identical outputs; every
stochastic quantity in a trial is derived from the per-trial seed
(master seed + trial index).
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .control import ControllerConfig
from .ekf import NavBelief, NavState, STATE_DIM
from .ranging import TagGeometry
from .world import (
    DEFAULT_TAG_OFFSETS, Environment, SensorSpec, build_loop_script,
    default_environment, environment_from_dict, script_from_command_csv,
)


@dataclass
class EstimatorPriors:
    """Initial belief spreads; truths are drawn from the same distributions.

    Bias spreads assume the usual pre-flight standstill calibration of a
    low-cost MEMS IMU.
    """

    pos_std: float = 1e-4  # teach start pose defines the map frame
    vel_std: float = 1e-4
    att_std: float = 1e-4
    accel_bias_std: float = 0.02
    gyro_bias_std: float = 0.002
    clock_offset_std: float = 1e-7
    clock_skew_std: float = 1e-6

    def diagonal(self):
        d = np.empty(STATE_DIM)
        d[0:3] = self.pos_std**2
        d[3:6] = self.vel_std**2
        d[6:9] = self.att_std**2
        d[9:12] = self.accel_bias_std**2
        d[12:15] = self.gyro_bias_std**2
        d[15:17] = self.clock_offset_std**2
        d[17:19] = self.clock_skew_std**2
        return d

    def initial_belief(self):
        return NavBelief(NavState.origin(), np.diag(self.diagonal()))

    def sample_biases_and_clocks(self, rng):
        """Draw true biases and clock states consistently with the prior."""
        return dict(
            accel_bias=rng.standard_normal(3) * self.accel_bias_std,
            gyro_bias=rng.standard_normal(3) * self.gyro_bias_std,
            tag_offsets=rng.standard_normal(2) * self.clock_offset_std,
            tag_skews=rng.standard_normal(2) * self.clock_skew_std,
        )


@dataclass
class AnchorInitConfig:
    window_sec: float = 5.0  # enough baseline to pin the transverse direction
    anchor_height: float = 2.0  # prior mean h
    anchor_height_var: float = 1.0  # loose: only there to defeat the flip


@dataclass
class RepeatInitConfig:
    duration_sec: float = 5.0
    pos_prior_std: float = 0.25  # matches a uniform disc of radius 0.5 m
    heading_prior_std: float = 0.1511  # matches uniform +/-15 deg
    z_var: float = 1e-4  # (1 cm)^2 flat-floor pins for the EKF prior
    vel_var: float = 1e-4
    rollpitch_var: float = 7.615e-5  # (0.5 deg)^2

    def prior_covariance(self, priors=None):
        p = priors or EstimatorPriors()
        d = np.empty(13)
        d[0:2] = self.pos_prior_std**2
        d[2] = self.heading_prior_std**2
        d[3:6] = p.accel_bias_std**2
        d[6:9] = p.gyro_bias_std**2
        d[9:11] = p.clock_offset_std**2
        d[11:13] = p.clock_skew_std**2
        return np.diag(d)


@dataclass
class PerturbationConfig:
    """Distribution of the repeat pass's initial pose offset."""

    radius: float = 0.5  # uniform in a disc of this radius, metres
    heading_deg: float = 15.0  # uniform within +/- this

    def sample(self, rng):
        # polar sampling: uniform over the disc area
        u = rng.random()
        ang = rng.random() * 2.0 * np.pi
        rho = self.radius * np.sqrt(u)
        dxy = np.array([rho * np.cos(ang), rho * np.sin(ang)])
        dpsi = np.deg2rad(self.heading_deg) * (2.0 * rng.random() - 1.0)
        return dxy, dpsi


@dataclass
class ScriptConfig:
    kind: str = "loop"
    duration: float = 200.0
    width: float = 50.0
    height: float = 30.0
    corner_radius: float = 6.0
    cruise_height: float = 1.5
    takeoff: float = 10.0
    landing: float = 10.0
    turns: float = 1.0
    path: str = ""  # command CSV, used when kind == "csv"

    def build(self, imu_rate):
        if self.kind == "loop":
            return build_loop_script(
                imu_rate=imu_rate, duration=self.duration, width=self.width,
                height=self.height, corner_radius=self.corner_radius,
                cruise_height=self.cruise_height, takeoff=self.takeoff,
                landing=self.landing, turns=self.turns,
            )
        if self.kind == "csv":
            return script_from_command_csv(self.path, imu_rate)
        raise ValueError(f"unknown script kind {self.kind!r}")


@dataclass
class TrialConfig:
    """The single source of determinism for trials and campaigns."""

    environment: Environment = field(default_factory=default_environment)
    script: ScriptConfig = field(default_factory=ScriptConfig)
    sensors: SensorSpec = field(default_factory=SensorSpec)
    priors: EstimatorPriors = field(default_factory=EstimatorPriors)
    anchor_init: AnchorInitConfig = field(default_factory=AnchorInitConfig)
    repeat_init: RepeatInitConfig = field(default_factory=RepeatInitConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig)
    tag_offsets: np.ndarray = field(default_factory=lambda: DEFAULT_TAG_OFFSETS.copy())
    trials: int = 1
    master_seed: int = 0

    @property
    def tags(self):
        return TagGeometry(self.tag_offsets)

    def trial_seed(self, index):
        return self.master_seed + index

    def zero_noise(self):
        """Copy with all stochastic terms silenced (for fixpoint checks)."""
        out = from_dict(to_dict(self))
        out.sensors = self.sensors.zero_noise()
        out.priors = EstimatorPriors(
            pos_std=self.priors.pos_std, vel_std=self.priors.vel_std,
            att_std=self.priors.att_std, accel_bias_std=0.0, gyro_bias_std=0.0,
            clock_offset_std=0.0, clock_skew_std=0.0,
        )
        out.perturbation = PerturbationConfig(radius=0.0, heading_deg=0.0)
        return out


def to_dict(cfg):
    d = {
        "environment": {
            "anchors": [
                [int(i), *(float(x) for x in p)]
                for i, p in zip(cfg.environment.anchor_ids, cfg.environment.anchor_positions)
            ],
            "comm_range": cfg.environment.comm_range,
        },
        "script": asdict(cfg.script),
        "sensors": asdict(cfg.sensors),
        "priors": asdict(cfg.priors),
        "anchor_init": asdict(cfg.anchor_init),
        "repeat_init": asdict(cfg.repeat_init),
        "controller": asdict(cfg.controller),
        "perturbation": asdict(cfg.perturbation),
        "tag_offsets": [[float(x) for x in row] for row in cfg.tag_offsets],
        "trials": cfg.trials,
        "master_seed": cfg.master_seed,
    }
    return d


def from_dict(d):
    cfg = TrialConfig()
    if "environment" in d:
        cfg.environment = environment_from_dict(d["environment"])
    for name, cls in (
        ("script", ScriptConfig), ("sensors", SensorSpec), ("priors", EstimatorPriors),
        ("anchor_init", AnchorInitConfig), ("repeat_init", RepeatInitConfig),
        ("controller", ControllerConfig), ("perturbation", PerturbationConfig),
    ):
        if name in d:
            setattr(cfg, name, cls(**d[name]))
    if "tag_offsets" in d:
        cfg.tag_offsets = np.asarray(d["tag_offsets"], dtype=float)
    cfg.trials = int(d.get("trials", 1))
    cfg.master_seed = int(d.get("master_seed", 0))
    return cfg


def load_config(path):
    with open(path) as fh:
        return from_dict(json.load(fh))


def save_config(cfg, path):
    with open(path, "w") as fh:
        json.dump(to_dict(cfg), fh, indent=2)
