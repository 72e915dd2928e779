"""Rotation and extended-pose group operations shared by the estimators and controller.

Conventions fixed here and used everywhere else:
  - attitude error is a right perturbation, C = C_hat @ exp_so3(dphi)
  - heading angles wrap to (-pi, pi]
"""

import numpy as np

_SMALL_ANGLE = 1e-7


def wrap_angle(theta):
    """Wrap an angle (or array of angles) to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(theta), 2.0 * np.pi)


def skew(v):
    """3x3 cross-product matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def exp_so3(phi):
    """Rodrigues formula: rotation vector (rad) -> DCM."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    S = skew(phi)
    if angle < _SMALL_ANGLE:
        return np.eye(3) + S + 0.5 * (S @ S)
    s2 = S @ S
    return (
        np.eye(3)
        + (np.sin(angle) / angle) * S
        + ((1.0 - np.cos(angle)) / angle**2) * s2
    )


def log_so3(C):
    """Inverse of exp_so3 on angles < pi; angle = pi resolved by eigen-axis.

    Returned rotation vector has norm in [0, pi].
    """
    C = np.asarray(C, dtype=float)
    # sin(theta) * axis from the antisymmetric part, cos(theta) from the trace
    w = 0.5 * np.array([C[2, 1] - C[1, 2], C[0, 2] - C[2, 0], C[1, 0] - C[0, 1]])
    s = np.linalg.norm(w)
    c = 0.5 * (np.trace(C) - 1.0)
    angle = np.arctan2(s, c)
    if angle < _SMALL_ANGLE:
        return w  # first-order: log(C) ~ vee(C - I)/... = w for small angles
    if np.pi - angle > 1e-6:
        return w * (angle / s)
    # Near pi the antisymmetric part vanishes; extract the axis from the
    # symmetric part a a^T = (C + I - ...)/(2(1-cos)).
    B = (C + C.T) / 2.0 - c * np.eye(3)
    B /= 1.0 - c
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / np.sqrt(max(B[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    # choose the sign consistent with the (possibly tiny) antisymmetric part
    if s > 1e-12 and np.dot(axis, w) < 0.0:
        axis = -axis
    return axis * angle


def so3_left_jacobian(phi):
    """Left Jacobian of SO(3) at rotation vector phi."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    S = skew(phi)
    if angle < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * S + (S @ S) / 6.0
    a2 = angle * angle
    return (
        np.eye(3)
        + ((1.0 - np.cos(angle)) / a2) * S
        + ((angle - np.sin(angle)) / (a2 * angle)) * (S @ S)
    )


def so3_left_jacobian_inv(phi):
    """Inverse left Jacobian of SO(3) at rotation vector phi (needs |phi| < 2*pi)."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    S = skew(phi)
    if angle < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * S + (S @ S) / 12.0
    a2 = angle * angle
    coef = 1.0 / a2 - (1.0 + np.cos(angle)) / (2.0 * angle * np.sin(angle))
    return np.eye(3) - 0.5 * S + coef * (S @ S)


def so3_right_jacobian(phi):
    return so3_left_jacobian(-np.asarray(phi, dtype=float))


def so3_right_jacobian_inv(phi):
    return so3_left_jacobian_inv(-np.asarray(phi, dtype=float))


def project_so3(C):
    """Nearest rotation matrix (polar projection via SVD)."""
    U, _, Vt = np.linalg.svd(C)
    R = U @ Vt
    if np.linalg.det(R) < 0.0:
        R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    return R


def yaw_of(C):
    """Heading (z-y-x yaw) of a DCM, wrapped to (-pi, pi]."""
    return float(np.arctan2(C[1, 0], C[0, 0]))


class ExtendedPose:
    """Element of the extended pose group (rotation, velocity, position).

    Group product and inverse follow the 5x5 matrix embedding
    [[C, v, r], [0, 1, 0], [0, 0, 1]].  Log/exp coordinates are ordered
    [phi, nu, rho] (attitude, velocity, position).
    """

    __slots__ = ("C", "v", "r")

    def __init__(self, C, v, r):
        self.C = np.asarray(C, dtype=float)
        self.v = np.asarray(v, dtype=float)
        self.r = np.asarray(r, dtype=float)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3), np.zeros(3))

    @classmethod
    def exp(cls, xi):
        xi = np.asarray(xi, dtype=float)
        phi, nu, rho = xi[0:3], xi[3:6], xi[6:9]
        J = so3_left_jacobian(phi)
        return cls(exp_so3(phi), J @ nu, J @ rho)

    def log(self):
        phi = log_so3(self.C)
        Jinv = so3_left_jacobian_inv(phi)
        return np.concatenate([phi, Jinv @ self.v, Jinv @ self.r])

    def compose(self, other):
        return ExtendedPose(
            self.C @ other.C,
            self.C @ other.v + self.v,
            self.C @ other.r + self.r,
        )

    def inverse(self):
        Ct = self.C.T
        return ExtendedPose(Ct, -(Ct @ self.v), -(Ct @ self.r))

    def as_matrix(self):
        M = np.eye(5)
        M[0:3, 0:3] = self.C
        M[0:3, 3] = self.v
        M[0:3, 4] = self.r
        return M

    def copy(self):
        return ExtendedPose(self.C.copy(), self.v.copy(), self.r.copy())

    def __repr__(self):
        return f"ExtendedPose(r={self.r}, v={self.v})"


def left_invariant_error(X_ref, X):
    """delta_X = X_ref^{-1} X; identity when X == X_ref."""
    return X_ref.inverse().compose(X)


def strapdown_step(C, v, r, f_body, omega_body, dt, gravity):
    """One discrete step of the specific-force/angular-rate kinematics.

    Specific force and angular rate are held constant over dt.  Used by the
    truth simulator, the EKF mean propagation and dead-reckoning so that
    noise-free replays reproduce the truth exactly.
    """
    a_m = C @ f_body + gravity
    C_next = C @ exp_so3(omega_body * dt)
    v_next = v + a_m * dt
    r_next = r + v * dt + 0.5 * dt * dt * a_m
    return C_next, v_next, r_next
