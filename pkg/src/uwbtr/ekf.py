"""Error-state EKF shared by the teach and repeat passes.

State: position, velocity, attitude DCM, accelerometer/gyroscope biases and
the tag 2/3 clock offsets and skews.  The error state is 19-dimensional,
ordered [dr, dv, dphi, db_acc, db_gyr, dtau, dgamma] with the attitude error
as a right perturbation, C = C_hat @ exp_so3(dphi).

IMU convention: measurement + bias + noise = true specific force / angular
rate, so the bias-corrected input is u + b_hat.
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .lie import exp_so3, log_so3, project_so3, skew, strapdown_step
from .ranging import predict_ranges
from .world import GRAVITY_M

STATE_DIM = 19
POS = slice(0, 3)
VEL = slice(3, 6)
ATT = slice(6, 9)
BACC = slice(9, 12)
BGYR = slice(12, 15)
TAU = slice(15, 17)
GAM = slice(17, 19)


class ImuInput(NamedTuple):
    accel: np.ndarray  # m/s^2
    gyro: np.ndarray  # rad/s
    dt: float  # s


@dataclass
class NavState:
    """Mean of the navigation state."""

    r: np.ndarray
    v: np.ndarray
    C: np.ndarray
    accel_bias: np.ndarray
    gyro_bias: np.ndarray
    clock_offsets: np.ndarray = field(default_factory=lambda: np.zeros(2))
    clock_skews: np.ndarray = field(default_factory=lambda: np.zeros(2))

    @classmethod
    def origin(cls):
        return cls(np.zeros(3), np.zeros(3), np.eye(3), np.zeros(3), np.zeros(3))

    def copy(self):
        return NavState(
            self.r.copy(), self.v.copy(), self.C.copy(),
            self.accel_bias.copy(), self.gyro_bias.copy(),
            self.clock_offsets.copy(), self.clock_skews.copy(),
        )

    def retract(self, dx):
        """Apply a 19-dim error-state increment (attitude multiplicatively)."""
        out = self.copy()
        out.r += dx[POS]
        out.v += dx[VEL]
        out.C = self.C @ exp_so3(dx[ATT])
        out.accel_bias += dx[BACC]
        out.gyro_bias += dx[BGYR]
        out.clock_offsets += dx[TAU]
        out.clock_skews += dx[GAM]
        return out

    def local_coordinates(self, other):
        """dx such that other == self.retract(dx), to first order exact."""
        dx = np.empty(STATE_DIM)
        dx[POS] = other.r - self.r
        dx[VEL] = other.v - self.v
        dx[ATT] = log_so3(self.C.T @ other.C)
        dx[BACC] = other.accel_bias - self.accel_bias
        dx[BGYR] = other.gyro_bias - self.gyro_bias
        dx[TAU] = other.clock_offsets - self.clock_offsets
        dx[GAM] = other.clock_skews - self.clock_skews
        return dx


@dataclass
class NavBelief:
    state: NavState
    P: np.ndarray

    def copy(self):
        return NavBelief(self.state.copy(), self.P.copy())

    def symmetrize(self):
        self.P = 0.5 * (self.P + self.P.T)
        return self


def propagate_state(state, u: ImuInput):
    """Mean propagation: bias-corrected strapdown step plus clock integration."""
    a_hat = u.accel + state.accel_bias
    w_hat = u.gyro + state.gyro_bias
    out = state.copy()
    out.C, out.v, out.r = strapdown_step(
        state.C, state.v, state.r, a_hat, w_hat, u.dt, GRAVITY_M
    )
    out.clock_offsets = state.clock_offsets + state.clock_skews * u.dt
    return out


def error_state_transition(state, u: ImuInput):
    """First-order-hold discrete transition A of the 19-dim error state."""
    dt = u.dt
    a_hat = u.accel + state.accel_bias
    w_hat = u.gyro + state.gyro_bias
    C = state.C
    A = np.eye(STATE_DIM)
    A[POS, VEL] = dt * np.eye(3)
    A[VEL, ATT] = -dt * (C @ skew(a_hat))
    A[VEL, BACC] = dt * C
    A[ATT, ATT] = np.eye(3) - dt * skew(w_hat)
    A[ATT, BGYR] = dt * np.eye(3)
    A[15, 17] = dt
    A[16, 18] = dt
    return A


def process_noise(spec, dt):
    """Discrete error-state process noise Q_k = L Qc L^T dt (isotropic PSDs)."""
    Q = np.zeros((STATE_DIM, STATE_DIM))
    Q[VEL, VEL] = spec.accel_psd * dt * np.eye(3)
    Q[ATT, ATT] = spec.gyro_psd * dt * np.eye(3)
    Q[BACC, BACC] = spec.accel_bias_psd * dt * np.eye(3)
    Q[BGYR, BGYR] = spec.gyro_bias_psd * dt * np.eye(3)
    Q[TAU, TAU] = spec.clock_offset_psd * dt * np.eye(2)
    Q[GAM, GAM] = spec.clock_skew_psd * dt * np.eye(2)
    return Q


def predict(belief, u: ImuInput, spec):
    """EKF prediction over one IMU step."""
    if u.dt <= 0.0:
        raise ValueError("dt must be positive")
    A = error_state_transition(belief.state, u)
    state = propagate_state(belief.state, u)
    P = A @ belief.P @ A.T + process_noise(spec, u.dt)
    return NavBelief(state, 0.5 * (P + P.T))


def _joseph_update(belief, H, innovation, R):
    P = belief.P
    S = H @ P @ H.T + R
    if np.ndim(S) == 0 or S.shape == ():
        K = (P @ H.T / S).reshape(STATE_DIM, 1)
        innovation = np.atleast_1d(innovation)
        H = H.reshape(1, STATE_DIM)
        R = np.atleast_2d(R)
    else:
        K = np.linalg.solve(S.T, (P @ H.T).T).T
    dx = K @ np.atleast_1d(innovation)
    state = belief.state.retract(dx)
    state.C = project_so3(state.C)
    IKH = np.eye(STATE_DIM) - K @ np.atleast_2d(H)
    P_new = IKH @ P @ IKH.T + K @ np.atleast_2d(R) @ K.T
    return NavBelief(state, 0.5 * (P_new + P_new.T))


def correct_height(belief, y, height_var):
    """Scalar EKF update on the z component of position."""
    if height_var <= 0.0:
        raise ValueError("height variance must be positive")
    H = np.zeros(STATE_DIM)
    H[2] = 1.0
    innovation = y - belief.state.r[2]
    return _joseph_update(belief, H, innovation, height_var)


def correct_range(belief, meas, anchor_pos, R5, tags, gate=None):
    """Joint 5-dim EKF update from one ToF measurement set.

    The anchor position is treated as exact; R5 must be the full correlated
    covariance from range_noise_covariance.  `gate` is a soft chi-square
    threshold on the 5-dof NIS: an innovation beyond it has its noise
    inflated proportionally, so anchor-handoff jumps are absorbed over a few
    updates instead of one violent, linearization-breaking step.  None
    disables gating.
    """
    s = belief.state
    y_hat, jac = predict_ranges(
        s.C, s.r, s.clock_offsets, anchor_pos, tags, with_jacobians=True
    )
    H = np.zeros((5, STATE_DIM))
    H[:, POS] = jac["pos"]
    H[:, ATT] = jac["att"]
    H[:, TAU] = jac["clock"]
    innovation = meas.vec - y_hat
    if gate is not None:
        S = H @ belief.P @ H.T + R5
        nis = float(innovation @ np.linalg.solve(S, innovation))
        if nis > gate:
            R5 = R5 * (nis / gate) + (nis / gate - 1.0) * (H @ belief.P @ H.T)
    return _joseph_update(belief, H, innovation, R5)


def nees(belief, truth_state):
    """Normalized estimation error squared of the full 19-dim state."""
    e = belief.state.local_coordinates(truth_state)
    return float(e @ np.linalg.solve(belief.P, e))
