"""Batch MAP localization of a newly detected anchor.

When the teach-pass EKF first contacts an anchor it pauses, and the window
of IMU, height and ranging data from the detection step k to k+lambda is
solved jointly for the window states and the anchor position.  A prior on
the anchor height suppresses the below-floor mirror solution.  The EKF
resumes from the window's final marginal.
"""

from dataclasses import dataclass

import numpy as np

from .batch import NonConvergence, SparseBuilder, marginal_covariance, solve_least_squares, whitener
from .ekf import (
    ATT, BACC, BGYR, GAM, POS, STATE_DIM, TAU, VEL,
    ImuInput, NavBelief, propagate_state,
)
from .lie import exp_so3, log_so3, skew, so3_left_jacobian_inv, so3_right_jacobian, so3_right_jacobian_inv
from .ranging import C_LIGHT, predict_ranges, range_noise_covariance


class DegenerateGeometry(Exception):
    """Tag geometry too close to collinear in projection to seed an anchor."""


@dataclass
class HeightPrior:
    """Prior belief that the anchor sits at height h above the floor."""

    h: float = 2.0
    var: float = 0.25  # (0.5 m)^2

    def __post_init__(self):
        if self.var <= 0.0:
            raise ValueError("height prior variance must be positive")


@dataclass
class InitWindow:
    """All data entering one anchor-initialization solve.

    Epoch offsets j run 0..lambda relative to the detection step.  Range sets
    carry the fixed position of the active anchor they came from, or None for
    the new anchor being localized.
    """

    belief: NavBelief  # predicted belief at the detection step
    imu: list  # lambda ImuInput entries
    heights: list  # (j, measurement) pairs
    range_sets: list  # (j, RangeMeasurementSet, anchor_pos-or-None)
    new_anchor_id: int

    def new_anchor_epochs(self):
        return [(j, m) for (j, m, pos) in self.range_sets if pos is None]


def dead_reckon_window(state, imu_inputs):
    """Pure IMU propagation over the window; one state per epoch, lambda+1 total."""
    states = [state.copy()]
    for u in imu_inputs:
        states.append(propagate_state(states[-1], u))
    return states


def analytic_anchor_seed(range_set, robot_state, tags, h):
    """Initial anchor estimate: fix z = h, solve (x, y) from differenced ranges.

    Pairwise differencing of the squared tag-anchor distances removes the
    quadratic term and leaves a 2x2 linear system in the horizontal anchor
    coordinates.
    """
    tau2, tau3 = robot_state.clock_offsets
    d = C_LIGHT * np.array(
        [range_set.tag1_anchor, range_set.tag2_anchor - tau2, range_set.tag3_anchor - tau3]
    )
    q = robot_state.r + (robot_state.C @ tags.offsets.T).T  # tag world positions
    M = np.zeros((2, 2))
    b = np.zeros(2)
    for i, ell in enumerate((1, 2)):
        diff = q[0] - q[ell]
        M[i] = 2.0 * diff[:2]
        b[i] = (
            d[ell] ** 2
            - d[0] ** 2
            - q[ell] @ q[ell]
            + q[0] @ q[0]
            - 2.0 * h * diff[2]
        )
    if np.linalg.cond(M) > 1e6:
        raise DegenerateGeometry("projected tag geometry is (near-)collinear")
    xy = np.linalg.solve(M, b)
    return np.array([xy[0], xy[1], h])


def window_anchor_seed(new_epochs, dr_states, tags, h):
    """Anchor seed from all window epochs jointly, height fixed at h.

    Same squared-range differencing as analytic_anchor_seed, but stacked
    across epochs: the robot's motion provides metre-scale baselines, so the
    noise amplification is far smaller than the single-epoch tag-baseline
    solve allows at long range.  Each epoch's clock offsets are taken from
    that epoch's own inter-tag measurements rather than the (possibly still
    uncorrected) state: 1 ns of offset error is already 0.3 m of range, and
    clock skew can move the offsets by microseconds across the window.
    """
    tof_tags = tags.inter_tag_tof
    rows = []
    rhs = []
    ref = None
    for j, rs in new_epochs:
        state = dr_states[j]
        q = state.r + (state.C @ tags.offsets.T).T
        tau2_hat = rs.tag2_tag1 - tof_tags[0]
        tau3_hat = rs.tag3_tag1 - tof_tags[1]
        d = C_LIGHT * np.array(
            [rs.tag1_anchor, rs.tag2_anchor - tau2_hat, rs.tag3_anchor - tau3_hat]
        )
        for ell in range(3):
            entry = (q[ell], d[ell] ** 2 - q[ell] @ q[ell])
            if ref is None:
                ref = entry
                continue
            q0, c0 = ref
            rows.append(2.0 * (q0 - q[ell])[:2])
            rhs.append(entry[1] - c0 - 2.0 * h * (q0 - q[ell])[2])
    A = np.array(rows)
    b = np.array(rhs)
    if len(rows) < 2 or np.linalg.cond(A.T @ A) > 1e12:
        raise DegenerateGeometry("window geometry cannot seed the anchor")
    xy, *_ = np.linalg.lstsq(A, b, rcond=None)
    return np.array([xy[0], xy[1], h])


def batch_process_noise(spec, dt):
    """Invertible second-order process covariance used to weight the batch cost.

    The first-order EKF form has singular position rows; here position and
    clock-offset noise pick up the integrated contributions of the
    accelerometer and skew noise.  PSDs are floored so that noise-free
    configurations still yield a well-posed problem.
    """
    qa = max(spec.accel_psd, 1e-10)
    qg = max(spec.gyro_psd, 1e-12)
    qba = max(spec.accel_bias_psd, 1e-14)
    qbg = max(spec.gyro_bias_psd, 1e-16)
    qt = max(spec.clock_offset_psd, 1e-24)
    qs = max(spec.clock_skew_psd, 1e-22)
    Q = np.zeros((STATE_DIM, STATE_DIM))
    I3 = np.eye(3)
    Q[POS, POS] = qa * dt**3 / 3.0 * I3
    Q[POS, VEL] = Q[VEL, POS] = qa * dt**2 / 2.0 * I3
    Q[VEL, VEL] = qa * dt * I3
    Q[ATT, ATT] = qg * dt * I3
    Q[BACC, BACC] = qba * dt * I3
    Q[BGYR, BGYR] = qbg * dt * I3
    for i in (0, 1):
        t_i, g_i = 15 + i, 17 + i
        Q[t_i, t_i] = qt * dt + qs * dt**3 / 3.0
        Q[t_i, g_i] = Q[g_i, t_i] = qs * dt**2 / 2.0
        Q[g_i, g_i] = qs * dt
    return Q


def _process_residual(state_j, state_j1, u):
    """Residual x_{j+1} (-) f(x_j, u) and its exact Jacobians F (w.r.t. x_j)
    and G (w.r.t. x_{j+1})."""
    pred = propagate_state(state_j, u)
    e = pred.local_coordinates(state_j1)
    dt = u.dt
    C = state_j.C
    a_hat = u.accel + state_j.accel_bias
    w_hat = u.gyro + state_j.gyro_bias
    Csk = C @ skew(a_hat)
    D = exp_so3(w_hat * dt)
    Jl_inv = so3_left_jacobian_inv(e[ATT])

    F = np.zeros((STATE_DIM, STATE_DIM))
    F[POS, POS] = -np.eye(3)
    F[POS, VEL] = -dt * np.eye(3)
    F[POS, ATT] = 0.5 * dt * dt * Csk
    F[POS, BACC] = -0.5 * dt * dt * C
    F[VEL, VEL] = -np.eye(3)
    F[VEL, ATT] = dt * Csk
    F[VEL, BACC] = -dt * C
    F[ATT, ATT] = -Jl_inv @ D.T
    F[ATT, BGYR] = -dt * (Jl_inv @ so3_right_jacobian(w_hat * dt))
    F[BACC, BACC] = -np.eye(3)
    F[BGYR, BGYR] = -np.eye(3)
    F[TAU, TAU] = -np.eye(2)
    F[15, 17] = F[16, 18] = -dt
    F[GAM, GAM] = -np.eye(2)

    G = np.eye(STATE_DIM)
    G[ATT, ATT] = so3_right_jacobian_inv(e[ATT])
    return e, F, G


def _prior_residual(prior_state, state0):
    e = prior_state.local_coordinates(state0)
    J = np.eye(STATE_DIM)
    J[ATT, ATT] = so3_right_jacobian_inv(e[ATT])
    return e, J


def _range_residual(state, meas, anchor_pos, tags):
    """Residual y - g(x, anchor) and Jacobian blocks (state 5x19, anchor 5x3)."""
    y_hat, jac = predict_ranges(
        state.C, state.r, state.clock_offsets, anchor_pos, tags, with_jacobians=True
    )
    e = meas.vec - y_hat
    Hx = np.zeros((5, STATE_DIM))
    Hx[:, POS] = -jac["pos"]
    Hx[:, ATT] = -jac["att"]
    Hx[:, TAU] = -jac["clock"]
    Ha = -jac["anchor"]
    return e, Hx, Ha


def build_map_problem(window, prior, spec, tags):
    """Whitened residual/Jacobian builder for the anchor-initialization cost.

    Variables: one 19-dim tangent block per window state plus the 3-dim
    anchor position.  Returns (residual_fn, retract_fn, col_scale, a_col).
    """
    n_states = len(window.imu) + 1
    dt = window.imu[0].dt if window.imu else 1.0 / spec.imu_rate
    prior_state = window.belief.state

    Wp = whitener(window.belief.P, floor=1e-18)
    Wq = whitener(batch_process_noise(spec, dt), floor=0.0)
    Wr = whitener(range_noise_covariance(spec.sigma_t), floor=1e-24)
    w_height = 1.0 / np.sqrt(max(spec.height_std**2, 1e-12))
    w_anchor_prior = 1.0 / np.sqrt(prior.var)

    n_cols = n_states * STATE_DIM + 3
    a_col = n_states * STATE_DIM
    n_rows = (
        STATE_DIM * n_states
        + len(window.heights)
        + 5 * len(window.range_sets)
        + 1
    )

    scale = np.sqrt(np.clip(np.diag(window.belief.P), 1e-20, None))
    col_scale = np.concatenate([np.tile(scale, n_states), np.ones(3)])

    def residuals(x):
        states, anchor = x
        b = SparseBuilder((n_rows, n_cols))
        r = np.zeros(n_rows)
        row = 0
        e0, J0 = _prior_residual(prior_state, states[0])
        r[row : row + STATE_DIM] = Wp @ e0
        b.add_block(row, 0, Wp @ J0)
        row += STATE_DIM
        for j, u in enumerate(window.imu):
            e, F, G = _process_residual(states[j], states[j + 1], u)
            r[row : row + STATE_DIM] = Wq @ e
            b.add_block(row, j * STATE_DIM, Wq @ F)
            b.add_block(row, (j + 1) * STATE_DIM, Wq @ G)
            row += STATE_DIM
        for j, y in window.heights:
            r[row] = w_height * (y - states[j].r[2])
            b.add_block(row, j * STATE_DIM + 2, np.array([[-w_height]]))
            row += 1
        for j, meas, fixed_pos in window.range_sets:
            pos = anchor if fixed_pos is None else fixed_pos
            e, Hx, Ha = _range_residual(states[j], meas, pos, tags)
            r[row : row + 5] = Wr @ e
            b.add_block(row, j * STATE_DIM, Wr @ Hx)
            if fixed_pos is None:
                b.add_block(row, a_col, Wr @ Ha)
            row += 5
        r[row] = w_anchor_prior * (prior.h - anchor[2])
        b.add_block(row, a_col + 2, np.array([[-w_anchor_prior]]))
        return r, b.tocsr()

    def retract(x, dx):
        states, anchor = x
        new_states = [
            s.retract(dx[i * STATE_DIM : (i + 1) * STATE_DIM])
            for i, s in enumerate(states)
        ]
        return new_states, anchor + dx[a_col : a_col + 3]

    return residuals, retract, col_scale, a_col


def solve_anchor_map(window, prior, spec, tags, anchor_seed=None, max_iter=50):
    """Gauss-Newton/LM solve of the anchor-initialization MAP problem.

    Returns (window states, final-state marginal covariance, anchor position,
    info dict).  Raises NonConvergence if the optimizer stalls or the solution
    lands below the floor; the caller is expected to drop the initialization.
    """
    n_states = len(window.imu) + 1
    prior_state = window.belief.state

    new_epochs = window.new_anchor_epochs()
    if not new_epochs:
        raise ValueError("window contains no range sets from the new anchor")

    dr_states = dead_reckon_window(prior_state, window.imu)
    positions = [dr_states[j].r for j, _ in new_epochs]
    kept = []
    for p in positions:
        if all(np.linalg.norm(p - qq) > 1e-4 for qq in kept):
            kept.append(p)
    if len(kept) < 3:
        raise DegenerateGeometry("new anchor observed from fewer than 3 distinct positions")

    if anchor_seed is None:
        anchor_seed = window_anchor_seed(new_epochs, dr_states, tags, prior.h)

    residuals, retract, col_scale, _a_col = build_map_problem(window, prior, spec, tags)
    anchor_seed = np.asarray(anchor_seed, dtype=float)

    def attempt(seed_vec):
        return solve_least_squares(
            residuals, (dr_states, seed_vec), retract, col_scale, max_iter=max_iter
        )

    # A mirrored (below-floor) start can trap plain descent in the flip
    # basin; the height prior makes the above-floor solution the global
    # minimum, so one restart at the prior height recovers it.
    rescue = np.array([anchor_seed[0], anchor_seed[1], max(prior.h, 0.1)])
    try:
        (states, anchor), info = attempt(anchor_seed)
        if anchor[2] <= 0.0 and not np.allclose(rescue, anchor_seed):
            (states, anchor), info = attempt(rescue)
    except NonConvergence:
        if np.allclose(rescue, anchor_seed):
            raise
        (states, anchor), info = attempt(rescue)
    if anchor[2] <= 0.0:
        raise NonConvergence("anchor solution below the floor")
    last = slice((n_states - 1) * STATE_DIM, n_states * STATE_DIM)
    P_end = marginal_covariance(info["jacobian"], col_scale, last)
    return states, P_end, anchor, info
