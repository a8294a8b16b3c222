"""
Navigation core: frames, attitude algebra, strapdown mechanization and the
15-state error model shared by every filter branch.

Conventions used throughout the package:

- Navigation frame is local-level NED, body frame is forward-right-down.
- Attitude is the rotation of the body w.r.t. NED, stored as a unit
  quaternion in scalar-last order ``[x, y, z, w]`` (the order used by
  ``scipy.spatial.transform.Rotation``). ``T_b^n`` is its rotation matrix.
- Error state ``dx`` is ordered ``[dp(0..2), dv(3..5), eps(6..8),
  dba(9..11), dbg(12..14)]``. A state is corrected by ``p - dp``,
  ``v - dv``, ``T <- (I + [eps]x)^T T`` and ``b + db``, so ``dp``, ``dv`` and
  ``eps`` are estimate-minus-truth while ``db`` is truth-minus-estimate.
- The full-state parameterization (``StateVector15``) is
  ``[north, east, altitude, v_ned, roll, pitch, yaw, b_a, b_g]`` with
  ``altitude = -p_down``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.transform import Rotation

GRAVITY = 9.80665
GIMBAL_LOCK_MARGIN = 1e-6
EXPM_TOLERANCE = 1e-13
EXPM_MAX_TERMS = 40
PHI_MODES = ("exact", "first-order")

STATE_DIM = 15
POS = slice(0, 3)
VEL = slice(3, 6)
ATT = slice(6, 9)
ACC_BIAS = slice(9, 12)
GYRO_BIAS = slice(12, 15)

# StateVector15 slot names, also used as CSV/JSON column suffixes
SLOT_LABELS = (
    "n", "e", "h",
    "vn", "ve", "vd",
    "roll", "pitch", "yaw",
    "bax", "bay", "baz",
    "bgx", "bgy", "bgz",
)
SLOT_ALTITUDE = 2
SLOT_V_DOWN = 5
SLOT_ROLL = 6
SLOT_PITCH = 7
SLOT_YAW = 8


class GimbalLockError(ValueError):
    """Raised when Euler angles are requested for a pitch too close to +-90 deg."""


def _vector(value: ArrayLike, name: str, size: int = 3) -> NDArray[np.float64]:
    arr = np.array(value, dtype=np.float64).reshape(-1)
    if arr.shape != (size,):
        raise ValueError(f"{name} must have {size} components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite, got {arr}")
    arr.flags.writeable = False
    return arr


def skew(v: ArrayLike) -> NDArray[np.float64]:
    """Cross-product matrix, ``skew(a) @ b == np.cross(a, b)``."""
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True, eq=False)
class ImuSample:
    """
    One IMU epoch. The readings cover the interval ending at ``t``.

    Args:
        t: Timestamp in seconds.
        f_b: Specific force in the body frame (m/s^2).
        w_b: Angular rate in the body frame (rad/s).
    """
    t: float
    f_b: NDArray[np.float64]
    w_b: NDArray[np.float64]

    def __post_init__(self):
        if not np.isfinite(self.t):
            raise ValueError(f"IMU timestamp must be finite, got {self.t}")
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "f_b", _vector(self.f_b, "f_b"))
        object.__setattr__(self, "w_b", _vector(self.w_b, "w_b"))


@dataclass(frozen=True, eq=False)
class GnssFix:
    """GNSS position fix in the local NED frame (down positive)."""
    t: float
    p_ned: NDArray[np.float64]
    sigma: NDArray[np.float64]

    def __post_init__(self):
        if not np.isfinite(self.t):
            raise ValueError(f"GNSS timestamp must be finite, got {self.t}")
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "p_ned", _vector(self.p_ned, "p_ned"))
        sigma = _vector(np.broadcast_to(self.sigma, (3,)), "sigma")
        if np.any(sigma <= 0.0):
            raise ValueError(f"GNSS sigma must be positive, got {sigma}")
        object.__setattr__(self, "sigma", sigma)


@dataclass(frozen=True, eq=False)
class NavState:
    """
    Nominal navigation state: position, velocity, attitude and IMU biases.

    Instances are immutable; every operation returns a new state.
    """
    p_ned: NDArray[np.float64]
    v_ned: NDArray[np.float64]
    att: NDArray[np.float64]
    b_a: NDArray[np.float64]
    b_g: NDArray[np.float64]

    def __post_init__(self):
        object.__setattr__(self, "p_ned", _vector(self.p_ned, "p_ned"))
        object.__setattr__(self, "v_ned", _vector(self.v_ned, "v_ned"))
        object.__setattr__(self, "b_a", _vector(self.b_a, "b_a"))
        object.__setattr__(self, "b_g", _vector(self.b_g, "b_g"))
        q = np.array(self.att, dtype=np.float64).reshape(-1)
        if q.shape != (4,) or not np.all(np.isfinite(q)):
            raise ValueError(f"attitude must be a finite 4-vector quaternion, got {q}")
        norm = np.linalg.norm(q)
        if norm == 0.0:
            raise ValueError("attitude quaternion has zero norm")
        if abs(norm - 1.0) > 1e-9:
            q = q / norm
        q.flags.writeable = False
        object.__setattr__(self, "att", q)

    @classmethod
    def from_euler(
            cls,
            p_ned: ArrayLike = (0.0, 0.0, 0.0),
            v_ned: ArrayLike = (0.0, 0.0, 0.0),
            euler: ArrayLike = (0.0, 0.0, 0.0),
            b_a: ArrayLike = (0.0, 0.0, 0.0),
            b_g: ArrayLike = (0.0, 0.0, 0.0),
        ) -> "NavState":
        """Builds a state from ``euler = (roll, pitch, yaw)`` in radians."""
        roll, pitch, yaw = _vector(euler, "euler")
        att = Rotation.from_euler("ZYX", [yaw, pitch, roll]).as_quat()
        return cls(p_ned, v_ned, att, b_a, b_g)

    @property
    def rotation(self) -> Rotation:
        return Rotation.from_quat(self.att)

    @property
    def dcm(self) -> NDArray[np.float64]:
        """Body-to-navigation rotation matrix ``T_b^n``."""
        return self.rotation.as_matrix()

    @property
    def euler(self) -> NDArray[np.float64]:
        """``(roll, pitch, yaw)`` in radians, yaw in (-pi, pi]."""
        yaw, pitch, roll = self.rotation.as_euler("ZYX")
        if abs(pitch) > np.pi / 2 - GIMBAL_LOCK_MARGIN:
            raise GimbalLockError(
                f"pitch {pitch:.9f} rad is within {GIMBAL_LOCK_MARGIN} of +-pi/2"
            )
        return np.array([roll, pitch, yaw])

    def replace(self, **changes) -> "NavState":
        fields = dict(
            p_ned=self.p_ned, v_ned=self.v_ned, att=self.att,
            b_a=self.b_a, b_g=self.b_g,
        )
        fields.update(changes)
        return NavState(**fields)


@dataclass(frozen=True)
class NoiseSpec:
    """
    IMU noise densities used for the process noise.

    Args:
        accel_density: Accelerometer white noise, m/s^2/sqrt(Hz).
        gyro_density: Gyro white noise, rad/s/sqrt(Hz).
        accel_bias_rw: Accelerometer bias random walk, m/s^3/sqrt(Hz).
        gyro_bias_rw: Gyro bias random walk, rad/s^2/sqrt(Hz).
    """
    accel_density: float = 0.005
    gyro_density: float = 5e-4
    accel_bias_rw: float = 1e-4
    gyro_bias_rw: float = 1e-6

    def __post_init__(self):
        for name in ("accel_density", "gyro_density", "accel_bias_rw", "gyro_bias_rw"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0.0:
                raise ValueError(f"{name} must be a finite non-negative density, got {value}")


def propagate_nominal(
        state: NavState,
        imu: ImuSample,
        dt: float,
        gravity: float = GRAVITY,
    ) -> NavState:
    """
    One bias-corrected strapdown step in a flat-earth NED frame.

    Attitude is advanced by the quaternion exponential of the corrected
    angular increment, velocity by the rotated specific force plus gravity
    (using the attitude at the start of the step), position by the
    trapezoidal rule. Earth rate and transport rate are not modelled.
    """
    if not np.isfinite(dt) or dt <= 0.0:
        raise ValueError(f"propagation step must be positive and finite, got dt={dt}")
    if not np.isfinite(gravity):
        raise ValueError(f"gravity must be finite, got {gravity}")

    f_b = imu.f_b - state.b_a
    w_b = imu.w_b - state.b_g

    rot = state.rotation
    accel_n = rot.apply(f_b) + np.array([0.0, 0.0, gravity])
    v_new = state.v_ned + accel_n * dt
    p_new = state.p_ned + 0.5 * (state.v_ned + v_new) * dt

    q_new = (rot * Rotation.from_rotvec(w_b * dt)).as_quat()
    q_new /= np.linalg.norm(q_new)
    if np.dot(q_new, state.att) < 0.0:
        q_new = -q_new

    return NavState(p_new, v_new, q_new, state.b_a, state.b_g)


def error_dynamics(state: NavState, imu: ImuSample) -> NDArray[np.float64]:
    """Continuous-time error model ``F`` (15x15) at the given state."""
    dcm = state.dcm
    f_n = dcm @ (imu.f_b - state.b_a)

    F = np.zeros((STATE_DIM, STATE_DIM))
    F[POS, VEL] = np.eye(3)
    F[VEL, ATT] = -skew(f_n)
    # truth-minus-estimate bias errors enter with a positive sign
    F[VEL, ACC_BIAS] = dcm
    F[ATT, GYRO_BIAS] = dcm
    return F


def expm_series(A: NDArray[np.float64], tol: float = EXPM_TOLERANCE) -> NDArray[np.float64]:
    """
    Matrix exponential by scaling and squaring of a truncated Taylor series.

    Terms are summed until the next one drops below ``tol`` relative to the
    partial sum. The 15-state error model is nilpotent, so the series ends
    after a handful of terms.
    """
    A = np.asarray(A, dtype=np.float64)
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix exponential of a non-finite matrix")
    norm = np.linalg.norm(A, ord=np.inf)
    squarings = 0
    if norm > 0.5:
        squarings = int(np.ceil(np.log2(norm / 0.5)))
        A = A / (2.0 ** squarings)

    result = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for k in range(1, EXPM_MAX_TERMS + 1):
        term = term @ A / k
        result = result + term
        term_norm = np.linalg.norm(term, ord=np.inf)
        if term_norm == 0.0 or term_norm <= tol * np.linalg.norm(result, ord=np.inf):
            break

    for _ in range(squarings):
        result = result @ result
    return result


def state_transition(
        state: NavState,
        imu: ImuSample,
        dt: float,
        phi_mode: str = "exact",
    ) -> NDArray[np.float64]:
    """Discrete transition ``Phi = exp(F dt)`` or its first-order form ``I + F dt``."""
    if not np.isfinite(dt) or dt <= 0.0:
        raise ValueError(f"transition step must be positive and finite, got dt={dt}")
    F = error_dynamics(state, imu)
    if phi_mode == "exact":
        return expm_series(F * dt)
    if phi_mode == "first-order":
        return np.eye(STATE_DIM) + F * dt
    raise ValueError(f"unknown phi_mode {phi_mode!r}, expected one of {PHI_MODES}")


def process_noise(
        imu_spec: NoiseSpec,
        dt: float,
        dcm: Optional[NDArray[np.float64]] = None,
    ) -> NDArray[np.float64]:
    """
    Discrete process noise ``G Q G^T dt``.

    Accelerometer and gyro white noise map through ``T_b^n`` into the
    velocity and attitude slots, bias random walks map one to one.
    """
    if not np.isfinite(dt) or dt <= 0.0:
        raise ValueError(f"process noise step must be positive and finite, got dt={dt}")
    dcm = np.eye(3) if dcm is None else np.asarray(dcm, dtype=np.float64)

    G = np.zeros((STATE_DIM, 12))
    G[VEL, 0:3] = dcm
    G[ATT, 3:6] = dcm
    G[ACC_BIAS, 6:9] = np.eye(3)
    G[GYRO_BIAS, 9:12] = np.eye(3)

    Qc = np.diag(np.repeat(
        [
            imu_spec.accel_density ** 2,
            imu_spec.gyro_density ** 2,
            imu_spec.accel_bias_rw ** 2,
            imu_spec.gyro_bias_rw ** 2,
        ],
        3,
    ))
    Q = G @ Qc @ G.T * dt
    return 0.5 * (Q + Q.T)


def to_state_vector(state: NavState) -> NDArray[np.float64]:
    """NavState -> StateVector15 (raises GimbalLockError near +-90 deg pitch)."""
    p = state.p_ned
    return np.concatenate((
        [p[0], p[1], -p[2]],
        state.v_ned,
        state.euler,
        state.b_a,
        state.b_g,
    ))


def from_state_vector(
        x15: ArrayLike,
        ref: Optional[NavState] = None,
    ) -> NavState:
    """
    StateVector15 -> NavState.

    ``ref`` only selects the quaternion hemisphere so that sign flips do not
    appear between consecutive states.
    """
    x = _vector(x15, "x15", STATE_DIM)
    roll, pitch, yaw = x[ATT]
    if abs(pitch) > np.pi / 2 - GIMBAL_LOCK_MARGIN:
        raise GimbalLockError(f"pitch {pitch:.9f} rad is too close to +-pi/2")
    att = Rotation.from_euler("ZYX", [yaw, pitch, roll]).as_quat()
    if ref is not None and np.dot(att, ref.att) < 0.0:
        att = -att
    return NavState(
        p_ned=[x[0], x[1], -x[2]],
        v_ned=x[VEL],
        att=att,
        b_a=x[ACC_BIAS],
        b_g=x[GYRO_BIAS],
    )


def euler_rate_map(euler: ArrayLike) -> NDArray[np.float64]:
    """
    Matrix ``E`` with ``omega_n = E @ d(roll, pitch, yaw)`` for ZYX angles,
    where ``omega_n`` is a small rotation expressed in the navigation frame.
    """
    _, pitch, yaw = np.asarray(euler, dtype=np.float64)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    return np.array([
        [cy * cp, -sy, 0.0],
        [sy * cp, cy, 0.0],
        [-sp, 0.0, 1.0],
    ])


def state_jacobian(state: NavState) -> NDArray[np.float64]:
    """
    Jacobian of the StateVector15 of the corrected state with respect to the
    applied error state ``dx`` (first order, at ``dx = 0``).
    """
    M = np.zeros((STATE_DIM, STATE_DIM))
    M[0, 0] = -1.0
    M[1, 1] = -1.0
    M[2, 2] = 1.0
    M[VEL, VEL] = -np.eye(3)
    # T+ = exp(-[eps]x) T, a navigation-frame rotation of -eps
    M[ATT, ATT] = -np.linalg.inv(euler_rate_map(state.euler))
    M[ACC_BIAS, ACC_BIAS] = np.eye(3)
    M[GYRO_BIAS, GYRO_BIAS] = np.eye(3)
    return M


def to_state_covariance(state: NavState, P: NDArray[np.float64]) -> NDArray[np.float64]:
    """Error covariance mapped into the StateVector15 layout."""
    M = state_jacobian(state)
    P15 = M @ np.asarray(P, dtype=np.float64) @ M.T
    return 0.5 * (P15 + P15.T)


def state_error(estimate: NavState, reference: NavState) -> NDArray[np.float64]:
    """
    Error state of ``estimate`` relative to ``reference``: correcting
    ``estimate`` by the returned ``dx`` yields ``reference`` to first order.
    """
    dx = np.empty(STATE_DIM)
    dx[POS] = estimate.p_ned - reference.p_ned
    dx[VEL] = estimate.v_ned - reference.v_ned
    dx[ATT] = (estimate.rotation * reference.rotation.inv()).as_rotvec()
    dx[ACC_BIAS] = reference.b_a - estimate.b_a
    dx[GYRO_BIAS] = reference.b_g - estimate.b_g
    return dx


def wrap_angle(angle: ArrayLike) -> NDArray[np.float64]:
    """Wraps angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(angle, dtype=np.float64), 2.0 * np.pi)
