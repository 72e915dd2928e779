"""End-to-end trials, Monte-Carlo campaigns and the evaluation metrics.

One trial = teach pass, then repeat pass, then tracking/estimation RMSE.
Campaign determinism: trial i is seeded with master_seed + i, trials never
share random state, and campaign files are assembled in trial order, so the
outputs are byte-identical for any worker count.
"""

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import TrialConfig, to_dict
from .lie import ExtendedPose, exp_so3, wrap_angle
from .passes import PassResult, TeachRecord, run_repeat_pass, run_teach_pass
from .world import ClockStates, VehicleTruth, write_truth_csv


@dataclass
class TrialMetrics:
    tracking_rmse: float
    estimation_rmse: float
    fallback_fraction: float
    position_error: np.ndarray  # per-step true repeat vs true teach, metres
    heading_error: np.ndarray  # per-step wrapped yaw difference, rad
    init_attempts: int = 0
    init_failures: int = 0

    def to_dict(self):
        return {
            "tracking_rmse": float(self.tracking_rmse),
            "estimation_rmse": float(self.estimation_rmse),
            "fallback_fraction": float(self.fallback_fraction),
            "max_position_error": float(np.max(self.position_error)),
            "max_heading_error": float(np.max(np.abs(self.heading_error))),
            "init_attempts": int(self.init_attempts),
            "init_failures": int(self.init_failures),
        }


def compute_rmse(true_repeat_r, true_teach_r, est_teach_r):
    """Repeat tracking RMSE and teach estimation RMSE over steps 1..K."""
    a, b, c = (np.asarray(x) for x in (true_repeat_r, true_teach_r, est_teach_r))
    if not (len(a) == len(b) == len(c)):
        raise ValueError("trajectories must be time-aligned with equal length")
    track = np.sqrt(np.mean(np.sum((a[1:] - b[1:]) ** 2, axis=1)))
    est = np.sqrt(np.mean(np.sum((c[1:] - b[1:]) ** 2, axis=1)))
    return float(track), float(est)


def _yaw_series(C):
    return np.arctan2(C[:, 1, 0], C[:, 0, 0])


def tracking_error_series(true_repeat, true_teach):
    """Per-step position and wrapped-heading tracking error of the true paths."""
    pos = np.linalg.norm(true_repeat["r"] - true_teach["r"], axis=1)
    heading = wrap_angle(_yaw_series(true_repeat["C"]) - _yaw_series(true_teach["C"]))
    return pos, heading


def _teach_truth0(cfg, rng):
    draws = cfg.priors.sample_biases_and_clocks(rng)
    anchor_offsets = {
        aid: float(rng.uniform(-0.05, 0.05)) for aid in cfg.environment.anchor_ids
    }
    return VehicleTruth(
        pose=ExtendedPose.identity(),
        accel_bias=draws["accel_bias"],
        gyro_bias=draws["gyro_bias"],
        clock=ClockStates(
            tag_offsets=draws["tag_offsets"],
            tag_skews=draws["tag_skews"],
            anchor_offsets=anchor_offsets,
        ),
        tag_offsets=cfg.tag_offsets.copy(),
    )


def _repeat_truth0(cfg, rng):
    dxy, dpsi = cfg.perturbation.sample(rng)
    draws = cfg.priors.sample_biases_and_clocks(rng)
    anchor_offsets = {
        aid: float(rng.uniform(-0.05, 0.05)) for aid in cfg.environment.anchor_ids
    }
    pose = ExtendedPose(
        exp_so3(np.array([0.0, 0.0, dpsi])),
        np.zeros(3),
        np.array([dxy[0], dxy[1], 0.0]),
    )
    return VehicleTruth(
        pose=pose,
        accel_bias=draws["accel_bias"],
        gyro_bias=draws["gyro_bias"],
        clock=ClockStates(
            tag_offsets=draws["tag_offsets"],
            tag_skews=draws["tag_skews"],
            anchor_offsets=anchor_offsets,
        ),
        tag_offsets=cfg.tag_offsets.copy(),
    )


def run_trial(cfg, seed, out_dir=None, script=None):
    """Full teach-and-repeat pipeline for one seed; optionally writes artifacts.

    Returns (TrialMetrics, teach PassResult, repeat PassResult).
    """
    if script is None:
        script = cfg.script.build(cfg.sensors.imu_rate)
    rng = np.random.default_rng(seed)
    r_teach_draws, r_teach, r_repeat_draws, r_repeat = rng.spawn(4)

    teach_truth0 = _teach_truth0(cfg, r_teach_draws)
    teach_res, amap = run_teach_pass(
        env=cfg.environment, script=script, spec=cfg.sensors, tags=cfg.tags,
        init_belief=cfg.priors.initial_belief(), truth0=teach_truth0,
        init_cfg=cfg.anchor_init, rng=r_teach,
    )
    record = TeachRecord(
        times=teach_res.times, est_C=teach_res.est_C, est_v=teach_res.est_v,
        est_r=teach_res.est_r, f=teach_res.f_cmd, omega=teach_res.omega_cmd,
        anchor_map=amap,
    )

    repeat_truth0 = _repeat_truth0(cfg, r_repeat_draws)
    repeat_res = run_repeat_pass(
        env=cfg.environment, spec=cfg.sensors, tags=cfg.tags, teach=record,
        truth0=repeat_truth0, repeat_cfg=cfg.repeat_init,
        controller_cfg=cfg.controller, rng=r_repeat,
    )

    track, est = compute_rmse(repeat_res.true_r, teach_res.true_r, teach_res.est_r)
    pos_err, head_err = tracking_error_series(
        {"r": repeat_res.true_r, "C": repeat_res.true_C},
        {"r": teach_res.true_r, "C": teach_res.true_C},
    )
    metrics = TrialMetrics(
        tracking_rmse=track,
        estimation_rmse=est,
        fallback_fraction=float(np.mean(repeat_res.fallback)),
        position_error=pos_err,
        heading_error=head_err,
        init_attempts=teach_res.init_attempts,
        init_failures=teach_res.init_failures,
    )
    if out_dir is not None:
        write_trial_artifacts(out_dir, record, teach_res, repeat_res, metrics)
    return metrics, teach_res, repeat_res


def write_trial_artifacts(out_dir, record, teach_res, repeat_res, metrics):
    os.makedirs(out_dir, exist_ok=True)
    p = lambda name: os.path.join(out_dir, name)  # noqa: E731
    record.save(p("teach_traj.csv"), p("teach_cmds.csv"), p("anchor_map.json"))
    write_truth_csv(
        p("teach_truth.csv"), teach_res.times,
        teach_res.true_C, teach_res.true_v, teach_res.true_r,
    )
    write_truth_csv(
        p("repeat_traj.csv"), repeat_res.times,
        repeat_res.est_C, repeat_res.est_v, repeat_res.est_r,
    )
    write_truth_csv(
        p("repeat_truth.csv"), repeat_res.times,
        repeat_res.true_C, repeat_res.true_v, repeat_res.true_r,
    )
    with open(p("repeat_cmds.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "f", "wx", "wy", "wz", "fallback"])
        for k in range(len(repeat_res.f_cmd)):
            w.writerow(
                [
                    repr(float(repeat_res.times[k])),
                    repr(float(repeat_res.f_cmd[k])),
                    *(repr(float(x)) for x in repeat_res.omega_cmd[k]),
                    int(repeat_res.fallback[k]),
                ]
            )
    with open(p("tracking_err.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "position_error", "heading_error"])
        for k in range(len(metrics.position_error)):
            w.writerow(
                [
                    repr(float(repeat_res.times[k])),
                    repr(float(metrics.position_error[k])),
                    repr(float(metrics.heading_error[k])),
                ]
            )
    with open(p("metrics.json"), "w") as fh:
        json.dump(metrics.to_dict(), fh, indent=2)


def recompute_metrics(trial_dir):
    """Recompute the RMSEs and error series from a trial's exported CSVs."""
    from .world import read_truth_csv

    _, tC, _tv, tr = read_truth_csv(os.path.join(trial_dir, "teach_truth.csv"))
    _, rC, _rv, rr_ = read_truth_csv(os.path.join(trial_dir, "repeat_truth.csv"))
    _, _eC, _ev, er = read_truth_csv(os.path.join(trial_dir, "teach_traj.csv"))
    track, est = compute_rmse(rr_, tr, er)
    pos, heading = tracking_error_series({"r": rr_, "C": rC}, {"r": tr, "C": tC})
    return {
        "tracking_rmse": track,
        "estimation_rmse": est,
        "max_position_error": float(np.max(pos)),
        "max_heading_error": float(np.max(np.abs(heading))),
        "position_error": pos,
        "heading_error": heading,
    }


def _trial_task(args):
    cfg_dict, seed, out_dir, index = args
    from .config import from_dict

    cfg = from_dict(cfg_dict)
    try:
        metrics, _teach, _repeat = run_trial(cfg, seed, out_dir=out_dir)
        row = {"trial": index, "seed": seed, "status": "ok", "reason": ""}
        row.update(metrics.to_dict())
    except Exception as exc:  # failed trials are recorded, campaign continues
        row = {
            "trial": index, "seed": seed, "status": "failed",
            "reason": f"{type(exc).__name__}: {exc}",
            "tracking_rmse": float("nan"), "estimation_rmse": float("nan"),
            "fallback_fraction": float("nan"), "max_position_error": float("nan"),
            "max_heading_error": float("nan"), "init_attempts": 0, "init_failures": 0,
        }
    return row


_SUMMARY_COLUMNS = [
    "trial", "seed", "status", "reason", "tracking_rmse", "estimation_rmse",
    "fallback_fraction", "max_position_error", "max_heading_error",
    "init_attempts", "init_failures",
]


def _box_stats(values):
    values = np.sort(np.asarray(values, dtype=float))
    q1, med, q3 = np.percentile(values, [25.0, 50.0, 75.0])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = values[(values >= lo_fence) & (values <= hi_fence)]
    outliers = values[(values < lo_fence) | (values > hi_fence)]
    return {
        "min": float(values[0]),
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
        "max": float(values[-1]),
        "mean": float(np.mean(values)),
        "whisker_low": float(inside[0]),
        "whisker_high": float(inside[-1]),
        "outliers": [float(v) for v in outliers],
    }


def run_monte_carlo(cfg, out_dir=None, jobs=1, trials=None):
    """Run a campaign of independent trials; returns the summary dict.

    Results are independent of `jobs`: each trial is fully determined by
    (config, master_seed + index) and aggregation is sorted by trial index.
    """
    n = trials if trials is not None else cfg.trials
    cfg_dict = to_dict(cfg)
    tasks = []
    for i in range(n):
        trial_dir = None if out_dir is None else os.path.join(out_dir, f"trial_{i:04d}")
        tasks.append((cfg_dict, cfg.trial_seed(i), trial_dir, i))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_trial_task, tasks))
    else:
        rows = [_trial_task(t) for t in tasks]
    rows.sort(key=lambda r: r["trial"])

    ok = [r for r in rows if r["status"] == "ok"]
    summary = {
        "trials": n,
        "failed": n - len(ok),
        "tracking_rmse": _box_stats([r["tracking_rmse"] for r in ok]) if ok else None,
        "estimation_rmse": _box_stats([r["estimation_rmse"] for r in ok]) if ok else None,
    }
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            json.dump(cfg_dict, fh, indent=2)
        with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(_SUMMARY_COLUMNS)
            for r in rows:
                w.writerow(
                    [
                        repr(float(r[c]))
                        if isinstance(r[c], float)
                        else r[c]
                        for c in _SUMMARY_COLUMNS
                    ]
                )
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2)
    return summary, rows
