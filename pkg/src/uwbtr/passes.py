"""Teach and repeat pass drivers built on the EKF.

The teach pass runs open loop (commands are scripted), pausing whenever a
new anchor is detected: the window of data from the detection step onward is
handed to the anchor-initialization MAP solve and the filter resumes from
its output.  The repeat pass runs closed loop, correcting against the stored
anchor map and steering with the LQR tracking controller, replaying the
recorded teach commands whenever no anchor is in range.
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import anchors as seq
from .anchor_init import DegenerateGeometry, HeightPrior, InitWindow, solve_anchor_map
from .batch import NonConvergence
from .control import TrackingController
from .ekf import ImuInput, NavBelief, correct_height, correct_range, predict
from .lie import ExtendedPose
from .ranging import compute_tof, range_noise_covariance, simulate_transaction
from .repeat_init import (
    InitState2D, MultipleAnchors, StaticWindow, solve_initialization, to_ekf_prior,
)
from .world import (
    TrueKinematics, anchors_in_range, pilot_command, sample_height, sample_imu,
    step_truth, step_truth_static, write_truth_csv, read_truth_csv,
)


def _stride(spec, rate):
    s = spec.imu_rate / rate
    if abs(s - round(s)) > 1e-9:
        raise ValueError("imu_rate must be an integer multiple of sensor rates")
    return int(round(s))


@dataclass
class PassResult:
    """Everything produced by one pass, time-indexed by IMU step."""

    times: np.ndarray
    est_C: np.ndarray
    est_v: np.ndarray
    est_r: np.ndarray
    true_C: np.ndarray
    true_v: np.ndarray
    true_r: np.ndarray
    P_diag: np.ndarray
    f_cmd: np.ndarray
    omega_cmd: np.ndarray
    fallback: np.ndarray
    final_belief: NavBelief
    init_attempts: int = 0
    init_failures: int = 0

    def est_pose(self, k):
        return ExtendedPose(self.est_C[k], self.est_v[k], self.est_r[k])


@dataclass
class TeachRecord:
    """Products of the teach pass handed to the repeat pass."""

    times: np.ndarray
    est_C: np.ndarray
    est_v: np.ndarray
    est_r: np.ndarray
    f: np.ndarray
    omega: np.ndarray
    anchor_map: seq.AnchorMap

    def pose(self, k):
        return ExtendedPose(self.est_C[k], self.est_v[k], self.est_r[k])

    def save(self, traj_path, cmd_path, map_path):
        write_truth_csv(traj_path, self.times, self.est_C, self.est_v, self.est_r)
        with open(cmd_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "f", "wx", "wy", "wz"])
            for k in range(len(self.f)):
                w.writerow(
                    [repr(float(x)) for x in (self.times[k], self.f[k], *self.omega[k])]
                )
        self.anchor_map.save(map_path)

    @classmethod
    def load(cls, traj_path, cmd_path, map_path):
        times, C, v, r = read_truth_csv(traj_path)
        cmds = np.loadtxt(cmd_path, delimiter=",", skiprows=1)
        return cls(
            times=times, est_C=C, est_v=v, est_r=r,
            f=cmds[:, 1], omega=cmds[:, 2:5],
            anchor_map=seq.AnchorMap.load(map_path),
        )


def _alloc(K):
    return dict(
        est_C=np.zeros((K + 1, 3, 3)),
        est_v=np.zeros((K + 1, 3)),
        est_r=np.zeros((K + 1, 3)),
        true_C=np.zeros((K + 1, 3, 3)),
        true_v=np.zeros((K + 1, 3)),
        true_r=np.zeros((K + 1, 3)),
        P_diag=np.zeros((K + 1, 19)),
        f_cmd=np.zeros(K),
        omega_cmd=np.zeros((K, 3)),
        fallback=np.zeros(K, dtype=bool),
    )


def _record(arrays, k, state, P):
    arrays["est_C"][k] = state.C
    arrays["est_v"][k] = state.v
    arrays["est_r"][k] = state.r
    arrays["P_diag"][k] = np.diag(P)


def _collect_window(env, spec, tags, truth, imu, heights, amap, active, belief,
                    new_id, k, k_end, first_tof, rng_meas, r_stride, dt, rr):
    """Gather IMU/height/range data for one anchor-initialization window.

    Ranging continues round-robin over the new anchor and the currently
    active anchors; other uninitialized anchors are ignored until the filter
    resumes.  Returns the window and the advanced round-robin counter.
    """
    h = [(j - k, heights[j]) for j in range(k, k_end + 1) if j in heights]
    sets = [(0, first_tof, None)]
    for e in range(k + r_stride, k_end + 1, r_stride):
        in_range_e = anchors_in_range(env, truth[e].pose.r)
        candidates = [a for a in in_range_e if a == new_id or a in active]
        if not candidates:
            continue
        aid = candidates[rr % len(candidates)]
        rr += 1
        txn = simulate_transaction(
            truth[e], aid, env.position_of(aid), spec, rng_meas, k=e, t_k=e * dt
        )
        fixed = None if aid == new_id else amap.most_recent_position(aid)
        sets.append((e - k, compute_tof(txn), fixed))
    window = InitWindow(
        belief=belief.copy(),
        imu=imu[k:k_end],
        heights=h,
        range_sets=sets,
        new_anchor_id=new_id,
    )
    return window, rr


def run_teach_pass(env, script, spec, tags, init_belief, truth0, init_cfg, rng):
    """Run the teach pass; returns (PassResult, AnchorMap)."""
    rng_truth, rng_meas = rng.spawn(2)
    K = script.steps
    dt = script.dt
    r_stride = _stride(spec, spec.ranging_rate)
    h_stride = _stride(spec, spec.height_rate)
    lam = int(round(init_cfg.window_sec * spec.imu_rate))
    # floors keep noise-free configurations well-posed
    R5 = range_noise_covariance(max(spec.sigma_t, 1e-12))
    height_var = max(spec.height_std**2, 1e-12)
    prior = HeightPrior(h=init_cfg.anchor_height, var=init_cfg.anchor_height_var)

    # Pre-roll the piloted truth and proprioceptive measurements.  The pilot
    # trims the scripted commands against the true pose, as a human driving
    # the teach pass would; the flown commands are what gets recorded.
    truth = [truth0]
    imu = []
    heights = {}
    flown_f = np.empty(K)
    flown_omega = np.empty((K, 3))
    for k in range(K):
        if k % h_stride == 0:
            heights[k] = sample_height(truth[k], spec, rng_truth)
        cmd = pilot_command(truth[k].pose, k, script)
        flown_f[k] = cmd.f
        flown_omega[k] = cmd.omega
        nxt, kin = step_truth(truth[k], cmd, dt, spec, rng_truth)
        u_acc, u_gyr = sample_imu(truth[k], kin, dt, spec, rng_truth)
        imu.append(ImuInput(u_acc, u_gyr, dt))
        truth.append(nxt)
    if K % h_stride == 0:
        heights[K] = sample_height(truth[K], spec, rng_truth)

    arrays = _alloc(K)
    for k in range(K + 1):
        arrays["true_C"][k] = truth[k].pose.C
        arrays["true_v"][k] = truth[k].pose.v
        arrays["true_r"][k] = truth[k].pose.r
    arrays["f_cmd"] = flown_f
    arrays["omega_cmd"] = flown_omega

    belief = init_belief.copy()
    active = set()
    amap = seq.AnchorMap()
    rr = 0  # round-robin counter over in-range anchors
    init_attempts = 0
    init_failures = 0
    k = 0
    while k <= K:
        jumped = False
        height_due = k in heights
        if k % r_stride == 0:
            in_range = anchors_in_range(env, truth[k].pose.r)
            active.intersection_update(in_range)
            if in_range:
                aid = in_range[rr % len(in_range)]
                rr += 1
                txn = simulate_transaction(
                    truth[k], aid, env.position_of(aid), spec, rng_meas, k=k, t_k=k * dt
                )
                tof = compute_tof(txn)
                if aid in active:
                    if height_due:
                        belief = correct_height(belief, heights[k], height_var)
                        height_due = False
                    belief = correct_range(
                        belief, tof, amap.most_recent_position(aid), R5, tags
                    )
                else:
                    # new anchor: pause the filter and solve the window MAP
                    init_attempts += 1
                    k_end = min(k + lam, K)
                    result = {}

                    def initializer(new_id, _k=k, _k_end=k_end, _tof=tof,
                                    _belief=belief, _rr=rr, _result=result):
                        window, rr_after = _collect_window(
                            env, spec, tags, truth, imu, heights, amap, active,
                            _belief, new_id, _k, _k_end, _tof, rng_meas,
                            r_stride, dt, _rr,
                        )
                        states, P_end, anchor, _info = solve_anchor_map(
                            window, prior, spec, tags
                        )
                        _result.update(states=states, P_end=P_end, rr=rr_after)
                        return anchor

                    try:
                        _pos, active, amap = seq.teach_sequence_tracker(
                            aid, in_range, active, amap, initializer
                        )
                        rr = result["rr"]
                        for j, st in enumerate(result["states"]):
                            _record(arrays, k + j, st, result["P_end"])
                        belief = NavBelief(
                            result["states"][-1].copy(), result["P_end"].copy()
                        ).symmetrize()
                        k = k_end
                        jumped = True  # epoch k_end data already consumed by the MAP
                        height_due = False
                    except (NonConvergence, DegenerateGeometry):
                        init_failures += 1
        if height_due:
            belief = correct_height(belief, heights[k], height_var)
        if not jumped:
            _record(arrays, k, belief.state, belief.P)
        if k < K:
            belief = predict(belief, imu[k], spec)
        k += 1

    result = PassResult(
        times=script.times, final_belief=belief,
        init_attempts=init_attempts, init_failures=init_failures, **arrays,
    )
    return result, amap


def _static_initialization(env, spec, tags, amap, truth0, repeat_cfg,
                           rng_truth, rng_meas):
    """Collect static data against the first mapped anchor and solve for the
    initial repeat belief.  The robot sits on the floor the whole time."""
    dt = 1.0 / spec.imu_rate
    r_stride = _stride(spec, spec.ranging_rate)
    L = int(round(repeat_cfg.duration_sec * spec.ranging_rate))
    first_pos, first_id, _ = amap.entries[0]

    truth = truth0
    range_sets = []
    imu_means = []
    kin0 = TrueKinematics(accel_m=np.zeros(3), omega_b=np.zeros(3))
    for epoch in range(L + 1):
        ids = anchors_in_range(env, truth.pose.r)
        if len(ids) > 1:
            raise MultipleAnchors(f"anchors {ids} in range during static init")
        if not ids:
            raise MultipleAnchors("no anchor in range during static init")
        if ids[0] != first_id:
            raise MultipleAnchors(
                f"start anchor {ids[0]} does not match first mapped anchor {first_id}"
            )
        txn = simulate_transaction(
            truth, ids[0], env.position_of(ids[0]), spec, rng_meas, k=epoch
        )
        range_sets.append(compute_tof(txn))
        if epoch == L:
            break
        acc = np.zeros(3)
        gyr = np.zeros(3)
        for _ in range(r_stride):
            u_acc, u_gyr = sample_imu(truth, kin0, dt, spec, rng_truth)
            acc += u_acc
            gyr += u_gyr
            truth = step_truth_static(truth, dt, spec, rng_truth)
        imu_means.append((acc / r_stride, gyr / r_stride, r_stride))

    window = StaticWindow(
        epoch_dt=r_stride * dt,
        range_sets=range_sets,
        imu_means=imu_means,
        anchor_pos=first_pos,
    )
    prior_mean = InitState2D()
    prior_cov = repeat_cfg.prior_covariance()
    est, cov, _info = solve_initialization(window, prior_mean, prior_cov, spec, tags)
    belief0 = to_ekf_prior(
        est, cov,
        z_var=repeat_cfg.z_var, vel_var=repeat_cfg.vel_var,
        rollpitch_var=repeat_cfg.rollpitch_var,
    )
    return truth, belief0


def run_repeat_pass(env, spec, tags, teach, truth0, repeat_cfg, controller_cfg, rng):
    """Static initialization followed by the closed-loop repeat pass."""
    rng_truth, rng_meas = rng.spawn(2)
    K = len(teach.f)
    dt = 1.0 / spec.imu_rate
    r_stride = _stride(spec, spec.ranging_rate)
    h_stride = _stride(spec, spec.height_rate)
    R5 = range_noise_covariance(max(spec.sigma_t, 1e-12))
    height_var = max(spec.height_std**2, 1e-12)
    amap = teach.anchor_map

    truth, belief = _static_initialization(
        env, spec, tags, amap, truth0, repeat_cfg, rng_truth, rng_meas
    )

    teach_poses = [teach.pose(k) for k in range(K + 1)]
    controller = TrackingController(
        teach_poses, teach.f, teach.omega, dt, controller_cfg
    )

    arrays = _alloc(K)
    active = {}
    cursor = -1
    rr = 0
    for k in range(K + 1):
        arrays["true_C"][k] = truth.pose.C
        arrays["true_v"][k] = truth.pose.v
        arrays["true_r"][k] = truth.pose.r
        in_range = anchors_in_range(env, truth.pose.r)
        if k % h_stride == 0:
            y = sample_height(truth, spec, rng_truth)
            belief = correct_height(belief, y, height_var)
        if k % r_stride == 0:
            for gone in [a for a in active if a not in in_range]:
                del active[gone]
            if in_range:
                aid = in_range[rr % len(in_range)]
                rr += 1
                txn = simulate_transaction(
                    truth, aid, env.position_of(aid), spec, rng_meas, k=k, t_k=k * dt
                )
                tof = compute_tof(txn)
                pos, active, cursor = seq.repeat_lookup_with_skip(
                    aid, in_range, active, amap, cursor
                )
                if pos is not None:
                    belief = correct_range(belief, tof, pos, R5, tags)
        _record(arrays, k, belief.state, belief.P)
        if k < K:
            est_pose = ExtendedPose(belief.state.C, belief.state.v, belief.state.r)
            cmd, fb, _err = controller.command(k, est_pose, bool(in_range))
            arrays["f_cmd"][k] = cmd.f
            arrays["omega_cmd"][k] = cmd.omega
            arrays["fallback"][k] = fb
            prev = truth
            truth, kin = step_truth(truth, cmd, dt, spec, rng_truth)
            u_acc, u_gyr = sample_imu(prev, kin, dt, spec, rng_truth)
            belief = predict(belief, ImuInput(u_acc, u_gyr, dt), spec)

    return PassResult(times=np.arange(K + 1) * dt, final_belief=belief, **arrays)


def run_pass(mode, **kwargs):
    """Dispatch to the teach or repeat pass driver."""
    if mode == "teach":
        return run_teach_pass(**kwargs)
    if mode == "repeat":
        return run_repeat_pass(**kwargs)
    raise ValueError(f"unknown pass mode {mode!r}")
