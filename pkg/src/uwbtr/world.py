"""Ground-truth world: anchors, vehicle kinematics, sensor sampling, teach scripts.

The body frame is fixed to the IMU point, the map frame coincides with the
body frame at the start of the teach pass, and gravity in the map frame is
(0, 0, -g) because the vehicle starts flat on the floor.
"""

import csv
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .lie import exp_so3, log_so3, strapdown_step, wrap_angle, yaw_of, ExtendedPose

GRAVITY = 9.80665
GRAVITY_M = np.array([0.0, 0.0, -GRAVITY])

# Tag positions relative to the IMU, body frame (rows = tags 1..3).
# Pairwise non-collinear so that anchor positions and heading are observable.
DEFAULT_TAG_OFFSETS = np.array(
    [
        [0.15, 0.00, 0.02],
        [-0.10, 0.12, 0.02],
        [-0.10, -0.12, 0.02],
    ]
)


@dataclass
class Environment:
    """Static anchors and the communication-range model (closed ball)."""

    anchor_ids: list
    anchor_positions: np.ndarray  # (n, 3), metres
    comm_range: float = 20.0

    def __post_init__(self):
        self.anchor_positions = np.atleast_2d(np.asarray(self.anchor_positions, dtype=float))
        if len(set(self.anchor_ids)) != len(self.anchor_ids):
            raise ValueError("anchor IDs must be unique")
        if np.any(self.anchor_positions[:, 2] < 0.0):
            raise ValueError("anchors must be at or above the floor (z >= 0)")

    def position_of(self, anchor_id):
        return self.anchor_positions[self.anchor_ids.index(anchor_id)]


def anchors_in_range(env, position):
    """IDs of anchors within comm_range of `position` (boundary included), sorted."""
    d = np.linalg.norm(env.anchor_positions - np.asarray(position), axis=1)
    ids = [i for i, dist in zip(env.anchor_ids, d) if dist <= env.comm_range]
    return sorted(ids)


@dataclass
class SensorSpec:
    """Noise intensities and rates for every simulated sensor.

    PSD fields are variance densities: accel_psd in (m/s^2)^2/Hz, etc.
    Per-sample white noise std over a step dt is sqrt(psd / dt); random-walk
    increments have std sqrt(psd * dt).
    """

    accel_psd: float = 1.0e-4
    gyro_psd: float = 1.0e-6
    accel_bias_psd: float = 1.0e-8
    gyro_bias_psd: float = 1.0e-10
    clock_offset_psd: float = 1.0e-20  # s^2/Hz
    clock_skew_psd: float = 1.0e-18  # (s/s)^2/Hz
    thrust_psd: float = 4.0e-4  # actuation noise on specific force
    omega_psd: float = 4.0e-6  # actuation noise on angular velocity
    height_std: float = 0.02  # m
    sigma_t: float = 1.0e-10  # timestamp receive-noise std, s (~3 cm)
    anchor_reply_delay: float = 500.0e-6  # s, fixed and known
    imu_rate: float = 100.0
    ranging_rate: float = 10.0
    height_rate: float = 20.0

    def __post_init__(self):
        for name in (
            "accel_psd", "gyro_psd", "accel_bias_psd", "gyro_bias_psd",
            "clock_offset_psd", "clock_skew_psd", "thrust_psd", "omega_psd",
            "height_std", "sigma_t",
        ):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("imu_rate", "ranging_rate", "height_rate"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")

    @property
    def imu_dt(self):
        return 1.0 / self.imu_rate

    def zero_noise(self):
        """Copy with every stochastic term removed (rates kept)."""
        return SensorSpec(
            accel_psd=0.0, gyro_psd=0.0, accel_bias_psd=0.0, gyro_bias_psd=0.0,
            clock_offset_psd=0.0, clock_skew_psd=0.0, thrust_psd=0.0, omega_psd=0.0,
            height_std=0.0, sigma_t=0.0, anchor_reply_delay=self.anchor_reply_delay,
            imu_rate=self.imu_rate, ranging_rate=self.ranging_rate,
            height_rate=self.height_rate,
        )


@dataclass
class ClockStates:
    """Clock errors: tag 2/3 offsets+skews w.r.t. tag 1, anchor offsets w.r.t. tag 1.

    Anchor offsets may be arbitrarily large -- the ranging protocol must
    cancel them exactly, so they are held constant.
    """

    tag_offsets: np.ndarray = field(default_factory=lambda: np.zeros(2))  # s
    tag_skews: np.ndarray = field(default_factory=lambda: np.zeros(2))  # s/s
    anchor_offsets: dict = field(default_factory=dict)  # id -> s

    def copy(self):
        return ClockStates(
            self.tag_offsets.copy(), self.tag_skews.copy(), dict(self.anchor_offsets)
        )


class ControlCommand(NamedTuple):
    """Thrust (mass-normalized, body z, m/s^2) and body angular velocity (rad/s)."""

    f: float
    omega: np.ndarray


class TrueKinematics(NamedTuple):
    """Realized map-frame acceleration and body angular rate over one step."""

    accel_m: np.ndarray
    omega_b: np.ndarray


@dataclass
class VehicleTruth:
    """Complete true vehicle state; pose position is the IMU point."""

    pose: ExtendedPose
    accel_bias: np.ndarray
    gyro_bias: np.ndarray
    clock: ClockStates
    tag_offsets: np.ndarray = field(default_factory=lambda: DEFAULT_TAG_OFFSETS.copy())
    imu_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        validate_tag_geometry(self.tag_offsets)

    def copy(self):
        return VehicleTruth(
            self.pose.copy(),
            self.accel_bias.copy(),
            self.gyro_bias.copy(),
            self.clock.copy(),
            self.tag_offsets.copy(),
            self.imu_offset.copy(),
        )


def validate_tag_geometry(tag_offsets):
    t = np.asarray(tag_offsets, dtype=float)
    if t.shape != (3, 3):
        raise ValueError("expected three 3-vector tag offsets")
    cross = np.cross(t[1] - t[0], t[2] - t[0])
    if np.linalg.norm(cross) < 1e-9:
        raise ValueError("tag offsets are collinear; anchor geometry unobservable")
    return t


def step_truth(state, command, dt, spec, rng):
    """Advance the truth by one step of the thrust/angular-velocity kinematics.

    Returns the next state and the realized interval kinematics (needed to
    synthesize a consistent IMU sample).  Biases random-walk, clock offsets
    integrate their skew, both with PSD-scaled increments.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    C = state.pose.C
    w_f = rng.standard_normal(3) * np.sqrt(spec.thrust_psd / dt)
    w_w = rng.standard_normal(3) * np.sqrt(spec.omega_psd / dt)
    f_body = np.array([0.0, 0.0, command.f])
    a_m = C @ f_body + GRAVITY_M + w_f
    omega = np.asarray(command.omega, dtype=float) + w_w

    # strapdown_step applies body-frame specific force; fold the map-frame
    # actuation noise into an equivalent body-frame specific force.
    f_eff = C.T @ (a_m - GRAVITY_M)
    C_next, v_next, r_next = strapdown_step(
        C, state.pose.v, state.pose.r, f_eff, omega, dt, GRAVITY_M
    )

    out = state.copy()
    out.pose = ExtendedPose(C_next, v_next, r_next)
    out.accel_bias = state.accel_bias + rng.standard_normal(3) * np.sqrt(
        spec.accel_bias_psd * dt
    )
    out.gyro_bias = state.gyro_bias + rng.standard_normal(3) * np.sqrt(
        spec.gyro_bias_psd * dt
    )
    out.clock.tag_offsets = (
        state.clock.tag_offsets
        + state.clock.tag_skews * dt
        + rng.standard_normal(2) * np.sqrt(spec.clock_offset_psd * dt)
    )
    out.clock.tag_skews = state.clock.tag_skews + rng.standard_normal(2) * np.sqrt(
        spec.clock_skew_psd * dt
    )
    return out, TrueKinematics(accel_m=a_m, omega_b=omega)


def step_truth_static(state, dt, spec, rng):
    """Advance only biases and clocks while the robot sits on the floor.

    The floor reaction holds the pose fixed, which the free-flight model
    cannot represent; the IMU then reads pure gravity reaction plus bias.
    """
    out = state.copy()
    out.accel_bias = state.accel_bias + rng.standard_normal(3) * np.sqrt(
        spec.accel_bias_psd * dt
    )
    out.gyro_bias = state.gyro_bias + rng.standard_normal(3) * np.sqrt(
        spec.gyro_bias_psd * dt
    )
    out.clock.tag_offsets = (
        state.clock.tag_offsets
        + state.clock.tag_skews * dt
        + rng.standard_normal(2) * np.sqrt(spec.clock_offset_psd * dt)
    )
    out.clock.tag_skews = state.clock.tag_skews + rng.standard_normal(2) * np.sqrt(
        spec.clock_skew_psd * dt
    )
    return out


def sample_imu(state, kin, dt, spec, rng):
    """IMU sample for one step: measurement + bias + noise = true value.

    u_acc = C^T (vdot - g) - b_acc - w, u_gyr = omega - b_gyr - w.
    Uses the state at the beginning of the interval.
    """
    w_acc = rng.standard_normal(3) * np.sqrt(spec.accel_psd / dt)
    w_gyr = rng.standard_normal(3) * np.sqrt(spec.gyro_psd / dt)
    u_acc = state.pose.C.T @ (kin.accel_m - GRAVITY_M) - state.accel_bias - w_acc
    u_gyr = kin.omega_b - state.gyro_bias - w_gyr
    return u_acc, u_gyr


def sample_height(state, spec, rng):
    """Height measurement: z of the IMU point plus Gaussian noise."""
    return float(state.pose.r[2]) + rng.standard_normal() * spec.height_std


# ---------------------------------------------------------------------------
# Teach scripts


@dataclass
class TeachScript:
    """Commands plus the noise-free trajectory they integrate to.

    `poses` has K+1 entries (C, v, r arrays); commands have K entries and are
    held constant over each IMU step.
    """

    dt: float
    f: np.ndarray  # (K,)
    omega: np.ndarray  # (K, 3)
    C: np.ndarray  # (K+1, 3, 3)
    v: np.ndarray  # (K+1, 3)
    r: np.ndarray  # (K+1, 3)

    @property
    def steps(self):
        return len(self.f)

    @property
    def times(self):
        return np.arange(self.steps + 1) * self.dt

    def command(self, k):
        return ControlCommand(f=float(self.f[k]), omega=self.omega[k])

    def check_closed_loop(self, tol_xy=0.5, tol_heading=0.2):
        """Verify floor start/end and that the loop closes within tolerance."""
        if abs(self.r[0][2]) > 1e-9 or abs(self.r[-1][2]) > 0.05:
            raise ValueError("script must start and end on the floor")
        gap = np.linalg.norm(self.r[-1][:2] - self.r[0][:2])
        if gap > tol_xy:
            raise ValueError(f"script start/end 2D gap {gap:.3f} m exceeds {tol_xy} m")
        dpsi = abs(wrap_angle(yaw_of(self.C[-1]) - yaw_of(self.C[0])))
        if dpsi > tol_heading:
            raise ValueError(f"script heading gap {dpsi:.3f} rad exceeds {tol_heading}")
        return gap


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u**3 * (6.0 * u**2 - 15.0 * u + 10.0)


def _smoothstep_d(u):
    u = np.clip(u, 0.0, 1.0)
    return 30.0 * u**2 * (u - 1.0) ** 2


def _smoothstep_dd(u):
    inside = (u > 0.0) & (u < 1.0)
    u = np.clip(u, 0.0, 1.0)
    return np.where(inside, 60.0 * u * (2.0 * u - 1.0) * (u - 1.0), 0.0)


class _RoundedRectPath:
    """Arc-length parameterized rounded rectangle, CCW from mid-bottom edge."""

    def __init__(self, width, height, radius):
        if radius <= 0 or width <= 2 * radius or height <= 2 * radius:
            raise ValueError("need width, height > 2 * corner radius > 0")
        w2 = width / 2.0
        hs = height - 2.0 * radius
        ws = width - 2.0 * radius
        qc = 0.5 * np.pi * radius
        self.radius = radius
        # (kind, length, data): straights carry (start, direction),
        # arcs carry (center, start angle); all CCW.
        self.segments = [
            ("s", w2 - radius, (np.array([0.0, 0.0]), np.array([1.0, 0.0]))),
            ("a", qc, (np.array([w2 - radius, radius]), -0.5 * np.pi)),
            ("s", hs, (np.array([w2, radius]), np.array([0.0, 1.0]))),
            ("a", qc, (np.array([w2 - radius, height - radius]), 0.0)),
            ("s", ws, (np.array([w2 - radius, height]), np.array([-1.0, 0.0]))),
            ("a", qc, (np.array([radius - w2, height - radius]), 0.5 * np.pi)),
            ("s", hs, (np.array([-w2, height - radius]), np.array([0.0, -1.0]))),
            ("a", qc, (np.array([radius - w2, radius]), np.pi)),
            ("s", w2 - radius, (np.array([radius - w2, 0.0]), np.array([1.0, 0.0]))),
        ]
        self.length = sum(seg[1] for seg in self.segments)

    def evaluate(self, s):
        """Position, unit tangent and curvature vector at arc length s (vectorized)."""
        s = np.atleast_1d(np.asarray(s, dtype=float)) % self.length
        p = np.zeros((len(s), 2))
        t = np.zeros((len(s), 2))
        kn = np.zeros((len(s), 2))  # curvature * normal
        s0 = 0.0
        remaining = np.ones(len(s), dtype=bool)
        for kind, seg_len, data in self.segments:
            m = remaining & (s <= s0 + seg_len + 1e-12)
            if np.any(m):
                u = s[m] - s0
                if kind == "s":
                    start, d = data
                    p[m] = start + np.outer(u, d)
                    t[m] = d
                else:
                    center, a0 = data
                    ang = a0 + u / self.radius
                    p[m] = center + self.radius * np.stack(
                        [np.cos(ang), np.sin(ang)], axis=1
                    )
                    t[m] = np.stack([-np.sin(ang), np.cos(ang)], axis=1)
                    kn[m] = -np.stack([np.cos(ang), np.sin(ang)], axis=1) / self.radius
                remaining &= ~m
            s0 += seg_len
        return p, t, kn


def _moving_average(x, window):
    """Centered moving average along axis 0 with edge padding."""
    if window <= 1:
        return x
    half = window // 2
    padded = np.concatenate([np.repeat(x[:1], half, 0), x, np.repeat(x[-1:], half, 0)])
    kernel = np.ones(window) / window
    return np.stack(
        [np.convolve(padded[:, i], kernel, mode="valid") for i in range(x.shape[1])],
        axis=1,
    )


def _attitude_from_accel_yaw(a_m, yaw):
    """DCM whose body z axis carries the thrust (a - g) and whose heading is yaw."""
    b3 = a_m - GRAVITY_M
    b3 = b3 / np.linalg.norm(b3)
    c1 = np.array([np.cos(yaw), np.sin(yaw), 0.0])
    b2 = np.cross(b3, c1)
    b2 = b2 / np.linalg.norm(b2)
    b1 = np.cross(b2, b3)
    return np.stack([b1, b2, b3], axis=1)


def build_loop_script(
    imu_rate=100.0,
    duration=200.0,
    width=50.0,
    height=30.0,
    corner_radius=6.0,
    cruise_height=1.5,
    takeoff=10.0,
    landing=10.0,
    turns=1.0,
):
    """Closed-loop teach script: takeoff, rounded-rectangle cruise with one full
    heading turn, landing.  Commands are chosen so that discrete integration of
    the thrust/angular-velocity model retraces the analytic reference.
    """
    dt = 1.0 / imu_rate
    K = int(round(duration * imu_rate))
    path = _RoundedRectPath(width, height, corner_radius)
    t_up, t_down = takeoff, landing
    t_cruise = duration - t_up - t_down
    if t_cruise <= 0:
        raise ValueError("duration must exceed takeoff + landing")

    def reference(tq):
        """Analytic position/velocity/acceleration/yaw at times tq (vectorized)."""
        tq = np.atleast_1d(tq)
        r = np.zeros((len(tq), 3))
        v = np.zeros((len(tq), 3))
        a = np.zeros((len(tq), 3))
        yaw = np.zeros(len(tq))
        m1 = tq < t_up
        m3 = tq > duration - t_down
        m2 = ~(m1 | m3)
        if np.any(m1):
            u = tq[m1] / t_up
            r[m1, 2] = cruise_height * _smoothstep(u)
            v[m1, 2] = cruise_height * _smoothstep_d(u) / t_up
            a[m1, 2] = cruise_height * _smoothstep_dd(u) / t_up**2
        if np.any(m2):
            u = (tq[m2] - t_up) / t_cruise
            s = path.length * _smoothstep(u)
            sd = path.length * _smoothstep_d(u) / t_cruise
            sdd = path.length * _smoothstep_dd(u) / t_cruise**2
            p, tan, kn = path.evaluate(s)
            r[m2, 0:2] = p
            r[m2, 2] = cruise_height
            v[m2, 0:2] = tan * sd[:, None]
            a[m2, 0:2] = tan * sdd[:, None] + kn * (sd**2)[:, None]
            yaw[m2] = 2.0 * np.pi * turns * _smoothstep(u)
        if np.any(m3):
            u = (tq[m3] - (duration - t_down)) / t_down
            r[m3, 2] = cruise_height * (1.0 - _smoothstep(u))
            v[m3, 2] = -cruise_height * _smoothstep_d(u) / t_down
            a[m3, 2] = -cruise_height * _smoothstep_dd(u) / t_down**2
            yaw[m3] = 2.0 * np.pi * turns
        return r, v, a, yaw

    tk = np.arange(K + 1) * dt
    tm = tk[:-1] + 0.5 * dt
    r_ref, v_ref, a_k, yaw_k = reference(tk)
    _, _, a_m, _ = reference(tm)
    # curvature jumps at the corner joins would command one-step attitude
    # spikes; smooth the acceleration profile before deriving attitude/thrust
    a_k = _moving_average(a_k, int(round(0.5 * imu_rate)) | 1)
    a_m = _moving_average(a_m, int(round(0.5 * imu_rate)) | 1)

    # Integrate through the same discrete model the simulator uses, with a
    # small feedback trim against the analytic reference: thrust and the
    # commanded attitude both absorb the position/velocity error so that
    # discretization and smoothing errors cannot accumulate into a drifting
    # or below-floor trajectory.
    Ct = np.empty((K + 1, 3, 3))
    v = np.zeros((K + 1, 3))
    r = np.zeros((K + 1, 3))
    f = np.empty(K)
    omega = np.empty((K, 3))
    Ct[0] = np.eye(3)
    kp, kv = 1.0, 2.0
    for k in range(K):
        trim = kp * (r_ref[k] - r[k]) + kv * (v_ref[k] - v[k])
        C_target = _attitude_from_accel_yaw(a_k[k + 1] + trim, yaw_k[k + 1])
        omega[k] = log_so3(Ct[k].T @ C_target) / dt
        thrust = Ct[k][:, 2] @ (a_m[k] + trim - GRAVITY_M)
        f[k] = max(thrust, 0.1 * GRAVITY)
        f_body = np.array([0.0, 0.0, f[k]])
        Ct[k + 1], v[k + 1], r[k + 1] = strapdown_step(
            Ct[k], v[k], r[k], f_body, omega[k], dt, GRAVITY_M
        )

    script = TeachScript(dt=dt, f=f, omega=omega, C=Ct, v=v, r=r)
    script.check_closed_loop()
    return script


def pilot_command(pose, k, script, kp=1.0, kv=2.0):
    """Manual-pilot stand-in: scripted command trimmed against the true pose.

    The teach pass of a real system is flown by a pilot who keeps the vehicle
    on the intended path; replaying the script open loop would let actuation
    noise random-walk the vehicle away from the anchors.  Feedback uses the
    truth (the pilot's own eyes), never the estimator.
    """
    K = script.steps
    k = min(k, K - 1)
    dt = script.dt
    a_script = (script.v[k + 1] - script.v[k]) / dt
    trim = kp * (script.r[k] - pose.r) + kv * (script.v[k] - pose.v)
    a_des = a_script + trim
    C_target = _attitude_from_accel_yaw(a_des, yaw_of(script.C[min(k + 1, K)]))
    omega = log_so3(pose.C.T @ C_target) / dt
    f = max(float(pose.C[:, 2] @ (a_des - GRAVITY_M)), 0.1 * GRAVITY)
    return ControlCommand(f=f, omega=omega)


def default_environment(comm_range=13.0):
    """Nine anchors ringing the default loop; exactly one is in range at the
    start, new anchors appear one at a time in a fixed order, and a short
    uncovered stretch on the bottom-left return exercises the feedforward
    fallback."""
    ids = [1, 2, 3, 4, 5, 6, 7, 8, 9]
    positions = np.array(
        [
            [6.0, -4.0, 2.2],
            [22.0, -3.0, 2.0],
            [29.0, 12.0, 2.4],
            [28.0, 26.0, 2.1],
            [12.0, 34.0, 2.3],
            [-8.0, 33.0, 2.5],
            [-28.0, 27.0, 2.0],
            [-29.0, 11.0, 2.3],
            [-21.0, -4.0, 2.1],
        ]
    )
    return Environment(anchor_ids=ids, anchor_positions=positions, comm_range=comm_range)


# ---------------------------------------------------------------------------
# CSV / JSON interfaces


def environment_from_dict(d):
    anchors = d.get("anchors")
    if anchors is None:
        return default_environment(comm_range=d.get("comm_range", 20.0))
    ids = [int(a[0]) for a in anchors]
    pos = np.array([[float(a[1]), float(a[2]), float(a[3])] for a in anchors])
    return Environment(anchor_ids=ids, anchor_positions=pos,
                       comm_range=float(d.get("comm_range", 20.0)))


def write_truth_csv(path, times, C, v, r):
    """Trajectory CSV: t, position, velocity, attitude as a rotation vector."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "rx", "ry", "rz", "vx", "vy", "vz", "phix", "phiy", "phiz"])
        for k, t in enumerate(times):
            phi = log_so3(C[k])
            w.writerow([repr(float(x)) for x in (t, *r[k], *v[k], *phi)])


def read_truth_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    times = data[:, 0]
    r = data[:, 1:4]
    v = data[:, 4:7]
    C = np.array([exp_so3(phi) for phi in data[:, 7:10]])
    return times, C, v, r


def script_from_command_csv(path, imu_rate):
    """Load a script from a command CSV with columns t, f, wx, wy, wz."""
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    dt = 1.0 / imu_rate
    f = data[:, 1]
    omega = data[:, 2:5]
    K = len(f)
    C = np.empty((K + 1, 3, 3))
    v = np.zeros((K + 1, 3))
    r = np.zeros((K + 1, 3))
    C[0] = np.eye(3)
    for k in range(K):
        C[k + 1], v[k + 1], r[k + 1] = strapdown_step(
            C[k], v[k], r[k], np.array([0.0, 0.0, f[k]]), omega[k], dt, GRAVITY_M
        )
    script = TeachScript(dt=dt, f=f, omega=omega, C=C, v=v, r=r)
    script.check_closed_loop()
    return script
