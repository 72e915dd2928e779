"""Shared scenario builders for the estimator tests."""

import numpy as np

from uwbtr.config import EstimatorPriors
from uwbtr.ekf import ImuInput, NavState, correct_height, correct_range, nees, predict
from uwbtr.lie import ExtendedPose
from uwbtr.ranging import TagGeometry, compute_tof, range_noise_covariance, simulate_transaction
from uwbtr.world import (
    DEFAULT_TAG_OFFSETS, GRAVITY, ClockStates, ControlCommand, SensorSpec,
    VehicleTruth, sample_height, sample_imu, step_truth,
)

CONSISTENCY_ANCHORS = {1: np.array([6.0, 2.0, 2.5]), 2: np.array([-4.0, 5.0, 2.0])}


def build_init_window(seed, lam=100, spec=None, noisy=True, anchor_true=None,
                      active_anchor=None, priors=None):
    """Simulate a short maneuver and package it as an anchor-init window.

    Returns (window, anchor_true).  With noisy=False the window prior equals
    the truth and every residual is exactly zero at the true solution.
    """
    from uwbtr.anchor_init import InitWindow

    spec = spec or SensorSpec()
    priors = priors or EstimatorPriors()
    rng = np.random.default_rng(seed)
    if anchor_true is None:
        anchor_true = np.array([5.0, -2.0, 2.0]) + rng.standard_normal(3) * [2, 2, 0.4]
    belief = priors.initial_belief()
    if noisy:
        dx0 = rng.standard_normal(19) * np.sqrt(np.diag(belief.P))
        truth_state = belief.state.retract(dx0)
    else:
        truth_state = belief.state.copy()
    truth = navstate_to_truth(truth_state, anchor_offsets={1: 0.013, 2: -0.027})

    dt = spec.imu_dt
    imu, heights, sets = [], [], []
    for j in range(lam + 1):
        if j % 5 == 0:
            heights.append((j, sample_height(truth, spec, rng)))
        if j % 10 == 0:
            use_active = active_anchor is not None and (j // 10) % 2 == 1
            if use_active:
                txn = simulate_transaction(truth, 2, active_anchor, spec, rng, k=j)
                sets.append((j, compute_tof(txn), np.asarray(active_anchor, float)))
            else:
                txn = simulate_transaction(truth, 1, anchor_true, spec, rng, k=j)
                sets.append((j, compute_tof(txn), None))
        if j == lam:
            break
        t = j * dt
        cmd = ControlCommand(
            f=GRAVITY + 0.9 * np.sin(1.3 * t + 0.4),
            omega=np.array([0.18 * np.sin(0.9 * t), 0.15 * np.cos(1.1 * t), 0.15]),
        )
        nxt, kin = step_truth(truth, cmd, dt, spec, rng)
        u_acc, u_gyr = sample_imu(truth, kin, dt, spec, rng)
        imu.append(ImuInput(u_acc, u_gyr, dt))
        truth = nxt
    window = InitWindow(
        belief=belief, imu=imu, heights=heights, range_sets=sets, new_anchor_id=1
    )
    return window, anchor_true


def truth_to_navstate(truth):
    return NavState(
        r=truth.pose.r.copy(), v=truth.pose.v.copy(), C=truth.pose.C.copy(),
        accel_bias=truth.accel_bias.copy(), gyro_bias=truth.gyro_bias.copy(),
        clock_offsets=truth.clock.tag_offsets.copy(),
        clock_skews=truth.clock.tag_skews.copy(),
    )


def navstate_to_truth(state, anchor_offsets=None):
    return VehicleTruth(
        pose=ExtendedPose(state.C.copy(), state.v.copy(), state.r.copy()),
        accel_bias=state.accel_bias.copy(),
        gyro_bias=state.gyro_bias.copy(),
        clock=ClockStates(
            tag_offsets=state.clock_offsets.copy(),
            tag_skews=state.clock_skews.copy(),
            anchor_offsets=anchor_offsets or {},
        ),
    )


def build_static_window(seed, L=20, spec=None, offset=(0.0, 0.0), heading=0.0,
                        anchor=None, noisy=True, priors=None):
    """Static-initialization data: the robot sits on the floor at a small
    offset from the teach start while ranging with one anchor.

    Returns (StaticWindow, truth at the final epoch).
    """
    from uwbtr.lie import exp_so3
    from uwbtr.repeat_init import StaticWindow
    from uwbtr.world import step_truth_static, TrueKinematics

    spec = spec or SensorSpec()
    priors = priors or EstimatorPriors()
    rng = np.random.default_rng(seed)
    anchor = np.array([4.0, 1.5, 2.2]) if anchor is None else np.asarray(anchor, float)
    pose = ExtendedPose(
        exp_so3(np.array([0.0, 0.0, heading])), np.zeros(3),
        np.array([offset[0], offset[1], 0.0]),
    )
    if noisy:
        draws = priors.sample_biases_and_clocks(rng)
    else:
        draws = dict(accel_bias=np.zeros(3), gyro_bias=np.zeros(3),
                     tag_offsets=np.zeros(2), tag_skews=np.zeros(2))
    truth = VehicleTruth(
        pose=pose, accel_bias=draws["accel_bias"], gyro_bias=draws["gyro_bias"],
        clock=ClockStates(tag_offsets=draws["tag_offsets"],
                          tag_skews=draws["tag_skews"],
                          anchor_offsets={1: 0.021}),
    )
    dt = spec.imu_dt
    stride = int(round(spec.imu_rate / spec.ranging_rate))
    kin0 = TrueKinematics(accel_m=np.zeros(3), omega_b=np.zeros(3))
    range_sets, imu_means = [], []
    for epoch in range(L + 1):
        txn = simulate_transaction(truth, 1, anchor, spec, rng, k=epoch)
        range_sets.append(compute_tof(txn))
        if epoch == L:
            break
        acc = np.zeros(3)
        gyr = np.zeros(3)
        for _ in range(stride):
            u_acc, u_gyr = sample_imu(truth, kin0, dt, spec, rng)
            acc += u_acc
            gyr += u_gyr
            truth = step_truth_static(truth, dt, spec, rng)
        imu_means.append((acc / stride, gyr / stride, stride))
    window = StaticWindow(epoch_dt=stride * dt, range_sets=range_sets,
                          imu_means=imu_means, anchor_pos=anchor)
    return window, truth


def consistency_nees_run(seed, n_steps=500, spec=None, priors=None):
    """EKF vs. truth with known anchors; returns the per-step 19-dim NEES.

    Truth is drawn from the filter prior and all noise matches the modelled
    statistics, so the filter should be chi-square consistent.
    """
    spec = spec or SensorSpec()
    priors = priors or EstimatorPriors()
    rng = np.random.default_rng(seed)
    tags = TagGeometry(DEFAULT_TAG_OFFSETS)
    R5 = range_noise_covariance(spec.sigma_t)
    dt = spec.imu_dt

    belief = priors.initial_belief()
    dx0 = rng.standard_normal(19) * np.sqrt(np.diag(belief.P))
    truth = navstate_to_truth(
        belief.state.retract(dx0),
        anchor_offsets={aid: float(rng.uniform(-0.05, 0.05))
                        for aid in CONSISTENCY_ANCHORS},
    )

    out = np.empty(n_steps + 1)
    for k in range(n_steps + 1):
        if k % 5 == 0:
            y = sample_height(truth, spec, rng)
            belief = correct_height(belief, y, spec.height_std**2)
        if k % 10 == 0:
            aid = 1 + (k // 10) % 2
            txn = simulate_transaction(truth, aid, CONSISTENCY_ANCHORS[aid],
                                       spec, rng, k=k)
            belief = correct_range(belief, compute_tof(txn),
                                   CONSISTENCY_ANCHORS[aid], R5, tags)
        out[k] = nees(belief, truth_to_navstate(truth))
        if k == n_steps:
            break
        t = k * dt
        cmd = ControlCommand(
            f=GRAVITY + 0.2 * np.sin(0.5 * t),
            omega=np.array([0.05 * np.sin(0.3 * t), 0.04 * np.cos(0.4 * t), 0.1]),
        )
        nxt, kin = step_truth(truth, cmd, dt, spec, rng)
        u_acc, u_gyr = sample_imu(truth, kin, dt, spec, rng)
        belief = predict(belief, ImuInput(u_acc, u_gyr, dt), spec)
        truth = nxt
    return out
