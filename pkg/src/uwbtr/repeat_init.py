"""Static batch initialization of the repeat pass.

Before retracing, the robot sits still on the floor near the teach start.
Its 2D position, heading, IMU biases and clock states are estimated from
ranging with the first mapped anchor plus the IMU readings, which in the
static case measure bias directly (gravity is known).  The result seeds the
repeat-pass EKF.
"""

from dataclasses import dataclass, field

import numpy as np

from .batch import marginal_covariance, solve_least_squares, whitener
from .ekf import NavBelief, NavState, STATE_DIM
from .lie import exp_so3, wrap_angle
from .ranging import C_LIGHT, range_noise_covariance
from .world import GRAVITY

DIM2D = 13
XY = slice(0, 2)
TH = 2
B_ACC = slice(3, 6)
B_GYR = slice(6, 9)
TAU2 = slice(9, 11)
GAM2 = slice(11, 13)

# where each 2D-state component lives in the 19-dim navigation error state
_TO_NAV = np.array([0, 1, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18])


class MultipleAnchors(Exception):
    """More than one anchor in range during the static initialization."""


@dataclass
class InitState2D:
    """Planar pose plus bias and clock states for the static solve."""

    xy: np.ndarray = field(default_factory=lambda: np.zeros(2))
    theta: float = 0.0
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    clock_offsets: np.ndarray = field(default_factory=lambda: np.zeros(2))
    clock_skews: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def copy(self):
        return InitState2D(
            self.xy.copy(), self.theta, self.accel_bias.copy(),
            self.gyro_bias.copy(), self.clock_offsets.copy(), self.clock_skews.copy(),
        )

    def retract(self, dx):
        out = self.copy()
        out.xy += dx[XY]
        out.theta = float(wrap_angle(out.theta + dx[TH]))
        out.accel_bias += dx[B_ACC]
        out.gyro_bias += dx[B_GYR]
        out.clock_offsets += dx[TAU2]
        out.clock_skews += dx[GAM2]
        return out

    def local_coordinates(self, other):
        dx = np.empty(DIM2D)
        dx[XY] = other.xy - self.xy
        dx[TH] = wrap_angle(other.theta - self.theta)
        dx[B_ACC] = other.accel_bias - self.accel_bias
        dx[B_GYR] = other.gyro_bias - self.gyro_bias
        dx[TAU2] = other.clock_offsets - self.clock_offsets
        dx[GAM2] = other.clock_skews - self.clock_skews
        return dx


def _rot2(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def _rot2_d(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[-s, -c], [c, -s]])


def static_range_model(state, anchor_pos, tags):
    """Predicted ToF set for a planar pose flat on the floor, with Jacobian.

    The anchor-dependent distances split into a heading/position-dependent
    horizontal part and a fixed vertical part (tag heights are the body-frame
    offsets because the floor fixes the pose out of plane).
    """
    anchor_pos = np.asarray(anchor_pos, dtype=float)
    t = tags.offsets
    R = _rot2(state.theta)
    Rd = _rot2_d(state.theta)
    tau2, tau3 = state.clock_offsets
    tof_tags = tags.inter_tag_tof

    y = np.zeros(5)
    J = np.zeros((5, DIM2D))
    for ell in range(3):
        u2 = state.xy + R @ t[ell, :2] - anchor_pos[:2]
        mz = t[ell, 2] - anchor_pos[2]
        dist = np.sqrt(u2 @ u2 + mz * mz)
        y[ell] = dist / C_LIGHT
        J[ell, XY] = u2 / (dist * C_LIGHT)
        J[ell, TH] = u2 @ (Rd @ t[ell, :2]) / (dist * C_LIGHT)
    y[1] += tau2
    y[2] += tau3
    y[3] = tof_tags[0] + tau2
    y[4] = tof_tags[1] + tau3
    J[1, 9] = J[3, 9] = 1.0
    J[2, 10] = J[4, 10] = 1.0
    return y, J


def static_imu_model(state):
    """Static-case IMU means: y_acc = -b_acc - g_b, y_gyr = -b_gyr.

    With gravity (0, 0, -g) in both frames the accelerometer reads
    (0, 0, g) - b_acc regardless of heading.
    """
    y_acc = np.array([0.0, 0.0, GRAVITY]) - state.accel_bias
    y_gyr = -state.gyro_bias
    return y_acc, y_gyr


@dataclass
class StaticWindow:
    """Measurements for the static solve at ranging epochs 0..L."""

    epoch_dt: float
    range_sets: list  # L+1 RangeMeasurementSet
    imu_means: list  # L tuples (mean_acc, mean_gyr, n_samples) per interval
    anchor_pos: np.ndarray


def _static_process_noise(spec, dt):
    Q = np.zeros((DIM2D, DIM2D))
    q_pose = 1e-12  # the robot is truly static; tiny value keeps Q invertible
    Q[0, 0] = Q[1, 1] = q_pose * dt
    Q[TH, TH] = q_pose * dt
    Q[B_ACC, B_ACC] = max(spec.accel_bias_psd, 1e-14) * dt * np.eye(3)
    Q[B_GYR, B_GYR] = max(spec.gyro_bias_psd, 1e-16) * dt * np.eye(3)
    qt = max(spec.clock_offset_psd, 1e-24)
    qs = max(spec.clock_skew_psd, 1e-22)
    for i in (0, 1):
        t_i, g_i = 9 + i, 11 + i
        Q[t_i, t_i] = qt * dt + qs * dt**3 / 3.0
        Q[t_i, g_i] = Q[g_i, t_i] = qs * dt**2 / 2.0
        Q[g_i, g_i] = qs * dt
    return Q


def build_static_problem(window, prior_mean, prior_cov, spec, tags):
    """Whitened residual/Jacobian builder for the static initialization cost."""
    L = len(window.imu_means)
    if len(window.range_sets) != L + 1:
        raise ValueError("need one range set per epoch 0..L")
    n_states = L + 1
    dt = window.epoch_dt

    Wp = whitener(prior_cov, floor=1e-18)
    Wq = whitener(_static_process_noise(spec, dt), floor=0.0)
    Wr = whitener(range_noise_covariance(spec.sigma_t), floor=1e-24)
    dt_imu = spec.imu_dt
    acc_var = max(spec.accel_psd, 1e-10) / dt_imu
    gyr_var = max(spec.gyro_psd, 1e-12) / dt_imu

    n_cols = n_states * DIM2D
    n_rows = DIM2D * n_states + 5 * (L + 1) + 6 * L
    col_scale = np.tile(np.sqrt(np.clip(np.diag(prior_cov), 1e-20, None)), n_states)

    F = -np.eye(DIM2D)
    F[9, 11] = F[10, 12] = -dt

    def residuals(states):
        J = np.zeros((n_rows, n_cols))
        r = np.zeros(n_rows)
        row = 0
        r[row : row + DIM2D] = Wp @ prior_mean.local_coordinates(states[0])
        J[row : row + DIM2D, 0:DIM2D] = Wp
        row += DIM2D
        for j in range(L):
            pred = states[j].copy()
            pred.clock_offsets = pred.clock_offsets + pred.clock_skews * dt
            r[row : row + DIM2D] = Wq @ pred.local_coordinates(states[j + 1])
            J[row : row + DIM2D, j * DIM2D : (j + 1) * DIM2D] = Wq @ F
            J[row : row + DIM2D, (j + 1) * DIM2D : (j + 2) * DIM2D] = Wq
            row += DIM2D
        for j in range(n_states):
            y_hat, H = static_range_model(states[j], window.anchor_pos, tags)
            r[row : row + 5] = Wr @ (window.range_sets[j].vec - y_hat)
            J[row : row + 5, j * DIM2D : (j + 1) * DIM2D] = Wr @ (-H)
            row += 5
        for j, (mean_acc, mean_gyr, n) in enumerate(window.imu_means, start=1):
            ya, yg = static_imu_model(states[j])
            wa = 1.0 / np.sqrt(acc_var / n)
            wg = 1.0 / np.sqrt(gyr_var / n)
            r[row : row + 3] = wa * (mean_acc - ya)
            J[row : row + 3, j * DIM2D + 3 : j * DIM2D + 6] = wa * np.eye(3)
            r[row + 3 : row + 6] = wg * (mean_gyr - yg)
            J[row + 3 : row + 6, j * DIM2D + 6 : j * DIM2D + 9] = wg * np.eye(3)
            row += 6
        return r, J

    def retract(states, dx):
        return [
            s.retract(dx[i * DIM2D : (i + 1) * DIM2D]) for i, s in enumerate(states)
        ]

    return residuals, retract, col_scale


def solve_initialization(window, prior_mean, prior_cov, spec, tags, max_iter=50):
    """Solve the static batch problem; returns (estimate at epoch L, covariance, info)."""
    L = len(window.imu_means)
    residuals, retract, col_scale = build_static_problem(
        window, prior_mean, prior_cov, spec, tags
    )
    x0 = [prior_mean.copy() for _ in range(L + 1)]
    states, info = solve_least_squares(residuals, x0, retract, col_scale, max_iter=max_iter)
    last = slice(L * DIM2D, (L + 1) * DIM2D)
    cov = marginal_covariance(info["jacobian"], col_scale, last)
    return states[-1], cov, info


def to_ekf_prior(est, cov, z_var=1e-4, vel_var=1e-4, rollpitch_var=7.615e-5):
    """Embed the planar estimate into a full navigation belief.

    Height, velocity and roll/pitch are pinned to the flat-floor values with
    the given small variances; mapped blocks keep their marginals exactly.
    Defaults: (1 cm)^2, (1 cm/s)^2, (0.5 deg)^2.
    """
    state = NavState(
        r=np.array([est.xy[0], est.xy[1], 0.0]),
        v=np.zeros(3),
        C=exp_so3(np.array([0.0, 0.0, est.theta])),
        accel_bias=est.accel_bias.copy(),
        gyro_bias=est.gyro_bias.copy(),
        clock_offsets=est.clock_offsets.copy(),
        clock_skews=est.clock_skews.copy(),
    )
    P = np.zeros((STATE_DIM, STATE_DIM))
    P[np.ix_(_TO_NAV, _TO_NAV)] = cov
    P[2, 2] = z_var
    P[3, 3] = P[4, 4] = P[5, 5] = vel_var
    P[6, 6] = P[7, 7] = rollpitch_var
    return NavBelief(state, P)
