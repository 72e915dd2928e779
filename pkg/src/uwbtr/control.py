"""Finite-horizon LQR tracking of the teach pose trajectory.

The tracking error is the left-invariant group error between the teach and
repeat pose estimates, regulated in log coordinates [attitude, velocity,
position].  Because thrust is a body-frame input and gravity is common to
both trajectories, the discrete error recursion is autonomous and the
linearization depends only on the recorded teach inputs.  When no anchors
are in range the repeat estimate cannot be trusted and the recorded teach
commands are replayed verbatim.
"""

from dataclasses import dataclass

import numpy as np

from .lie import exp_so3, left_invariant_error, skew, so3_right_jacobian, ExtendedPose
from .world import GRAVITY, ControlCommand as ControlInput  # noqa: F401

E3 = np.array([0.0, 0.0, 1.0])


class RiccatiDivergence(Exception):
    """Backward Riccati recursion produced a non-finite or unbounded solution."""


@dataclass
class TrackingError:
    """Left-invariant error delta_X and its 9-dim log coordinates."""

    dX: ExtendedPose
    coords: np.ndarray


@dataclass
class ControllerConfig:
    horizon: int = 50
    q_att: float = 10.0
    q_vel: float = 1.0
    q_pos: float = 10.0
    r_thrust: float = 1.0
    r_omega: float = 5.0
    thrust_max: float = 2.0 * GRAVITY
    omega_max: float = 2.0  # rad/s, per axis

    def weight_matrices(self):
        Q = np.diag([self.q_att] * 3 + [self.q_vel] * 3 + [self.q_pos] * 3)
        R = np.diag([self.r_thrust] + [self.r_omega] * 3)
        return Q, R


def compute_error(teach_pose, repeat_pose):
    """Tracking error of the repeat pose relative to the teach pose."""
    dX = left_invariant_error(teach_pose, repeat_pose)
    return TrackingError(dX=dX, coords=dX.log())


def propagate_error(dX, f_ref, omega_ref, df, domega, dt):
    """Exact one-step propagation of the left-invariant error.

    Both trajectories follow the thrust/angular-velocity kinematics; gravity
    cancels, so the error evolves autonomously given the reference input and
    the input deviation.
    """
    G = exp_so3(-np.asarray(omega_ref) * dt)
    f = f_ref + df
    thrust_diff = f * (dX.C @ E3) - f_ref * E3
    C_next = G @ dX.C @ exp_so3((np.asarray(omega_ref) + domega) * dt)
    v_next = G @ (dX.v + dt * thrust_diff)
    r_next = G @ (dX.r + dt * dX.v + 0.5 * dt * dt * thrust_diff)
    return ExtendedPose(C_next, v_next, r_next)


def linearize_error_dynamics(f_ref, omega_ref, dt):
    """Discrete Jacobians (A 9x9, B 9x4) of the error dynamics at zero error.

    Input order: [thrust, omega].  By left invariance the matrices depend
    only on the recorded teach input, not on the teach pose itself.
    """
    omega_ref = np.asarray(omega_ref, dtype=float)
    Gt = exp_so3(-omega_ref * dt)  # = Exp(omega dt)^T
    Ge = Gt @ E3
    Gsk = Gt @ skew(E3)
    A = np.zeros((9, 9))
    A[0:3, 0:3] = Gt
    A[3:6, 0:3] = -dt * f_ref * Gsk
    A[3:6, 3:6] = Gt
    A[6:9, 0:3] = -0.5 * dt * dt * f_ref * Gsk
    A[6:9, 3:6] = dt * Gt
    A[6:9, 6:9] = Gt
    B = np.zeros((9, 4))
    B[0:3, 1:4] = dt * so3_right_jacobian(omega_ref * dt)
    B[3:6, 0] = dt * Ge
    B[6:9, 0] = 0.5 * dt * dt * Ge
    return A, B


def lqr_gains(A_seq, B_seq, Q, R):
    """Backward Riccati recursion over a horizon; terminal cost Q.

    A_seq/B_seq are (H, 9, 9) and (H, 9, 4).  Returns the gain schedule
    (H, 4, 9); raises RiccatiDivergence on numerical blow-up.
    """
    A_seq = np.asarray(A_seq, dtype=float)
    B_seq = np.asarray(B_seq, dtype=float)
    H = len(A_seq)
    S = Q.copy()
    K = np.zeros((H, B_seq.shape[2], A_seq.shape[2]))
    for j in range(H - 1, -1, -1):
        A, B = A_seq[j], B_seq[j]
        M = R + B.T @ S @ B
        K[j] = np.linalg.solve(M, B.T @ S @ A)
        S = Q + A.T @ S @ (A - B @ K[j])
        S = 0.5 * (S + S.T)
        if not np.all(np.isfinite(S)) or np.abs(S).max() > 1e14:
            raise RiccatiDivergence(f"Riccati iterate unbounded at step {j}")
    return K


def receding_horizon_gains(f_seq, omega_seq, dt, cfg):
    """First gain of every length-H window along the teach input schedule.

    All windows are propagated simultaneously (batched backward recursion);
    near the trajectory end the linearization is extended by holding the
    final input.  Steps whose recursion misbehaves are flagged invalid so the
    caller can fall back to feedforward there.
    """
    Q, R = cfg.weight_matrices()
    H = cfg.horizon
    K_steps = len(f_seq)
    A = np.empty((K_steps + H, 9, 9))
    B = np.empty((K_steps + H, 9, 4))
    for k in range(K_steps):
        A[k], B[k] = linearize_error_dynamics(float(f_seq[k]), omega_seq[k], dt)
    A[K_steps:] = A[K_steps - 1]
    B[K_steps:] = B[K_steps - 1]

    S = np.tile(Q, (K_steps, 1, 1))
    gains = np.zeros((K_steps, 4, 9))
    idx = np.arange(K_steps)
    with np.errstate(all="ignore"):
        for i in range(H - 1, -1, -1):
            Ai = A[idx + i]
            Bi = B[idx + i]
            BtS = np.einsum("kba,kbc->kac", Bi, S)
            M = R[None, :, :] + BtS @ Bi
            gains = np.linalg.solve(M, BtS @ Ai)
            S = Q[None, :, :] + np.einsum("kba,kbc->kac", Ai, S) @ (
                Ai - Bi @ gains
            )
            S = 0.5 * (S + np.swapaxes(S, 1, 2))
    valid = np.all(np.isfinite(gains), axis=(1, 2)) & (
        np.abs(S).max(axis=(1, 2)) < 1e14
    )
    gains[~valid] = 0.0
    return gains, valid


class TrackingController:
    """Per-step command computation for the repeat pass."""

    def __init__(self, teach_poses, f_seq, omega_seq, dt, cfg=None):
        self.cfg = cfg or ControllerConfig()
        self.teach_poses = teach_poses
        self.f_seq = np.asarray(f_seq, dtype=float)
        self.omega_seq = np.asarray(omega_seq, dtype=float)
        self.dt = dt
        self.gains, self.valid = receding_horizon_gains(
            self.f_seq, self.omega_seq, dt, self.cfg
        )

    def command(self, k, repeat_pose, anchors_in_range):
        """Feedforward plus LQR feedback; feedforward only when out of range.

        Returns (ControlInput, fallback flag, error coordinates or None).
        """
        f_ff = float(self.f_seq[k])
        w_ff = self.omega_seq[k]
        if not anchors_in_range or not self.valid[k]:
            return ControlInput(f=f_ff, omega=w_ff.copy()), True, None
        err = compute_error(self.teach_poses[k], repeat_pose)
        du = -self.gains[k] @ err.coords
        f = float(np.clip(f_ff + du[0], 0.0, self.cfg.thrust_max))
        omega = np.clip(w_ff + du[1:4], -self.cfg.omega_max, self.cfg.omega_max)
        return ControlInput(f=f, omega=omega), False, err.coords
