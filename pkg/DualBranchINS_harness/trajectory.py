"""
Trajectory sources for experiments.

Synthetic logs are built from an analytic attitude/body-velocity profile.
Truth position is the trapezoidal integral of truth velocity and the IMU
stream is obtained by running the strapdown mechanization backwards, so a
noiseless IMU replayed through ``propagate_nominal`` reproduces the truth
to rounding error.

Profiles:
    - static: vehicle at rest, level.
    - straight: constant heading and speed, optional constant grade.
    - circuit: constant speed around a circle with a gentle roll oscillation.
    - hilly: slowly turning road just under the speed cap, with short
      sinusoidal hills (the pitch changes sign several times in a 30 s
      outage) and a roll oscillation.

Body heave and sideslip are zero by default, so the non-holonomic
assumption holds on every profile. Set ``heave_amplitude`` or
``sideslip_amplitude`` through ``with_profile`` to violate it on purpose.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
import logging
from typing import Dict, Optional, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy.spatial.transform import Rotation

from DualBranchINS.constraint_branch import INIT_V_MAX, EnvelopeBounds
from DualBranchINS.nav_core import GRAVITY, GnssFix, ImuSample

logger = logging.getLogger(__name__)

PROFILES = ("static", "straight", "circuit", "hilly")
ALTITUDE_MODES = ("relative", "absolute")

INIT_DURATION = 90.0
INIT_RATE = 100.0
INIT_BOUNDS_SCALE = 2.0
MIN_GNSS_SIGMA = 0.01
MIN_HEIGHT_HALF_WIDTH = 1.0
MIN_ANGLE_HALF_WIDTH = np.radians(1.0)

# independent random streams derived from one user seed
_IMU_STREAM = 0
_GNSS_STREAM = 1


@dataclass(frozen=True)
class ProfileSpec:
    """
    Shape parameters of a synthetic profile.

    Args:
        speed: Forward body speed (m/s).
        heading: Initial heading (rad).
        turn_rate: Constant yaw rate (rad/s).
        grade: Constant road grade (rise over run).
        hill_amplitude: Amplitude of the sinusoidal altitude (m).
        hill_period: Period of the altitude sinusoid (s).
        roll_amplitude: Amplitude of the roll oscillation (rad).
        roll_period: Period of the roll oscillation (s).
        heave_amplitude: Amplitude of body-down velocity (m/s).
        heave_period: Period of the heave (s).
        sideslip_amplitude: Amplitude of body-right velocity (m/s).
        sideslip_period: Period of the sideslip (s).
    """
    speed: float = 12.0
    heading: float = 0.0
    turn_rate: float = 0.0
    grade: float = 0.0
    hill_amplitude: float = 0.0
    hill_period: float = 45.0
    roll_amplitude: float = 0.0
    roll_period: float = 7.0
    heave_amplitude: float = 0.0
    heave_period: float = 2.5
    sideslip_amplitude: float = 0.0
    sideslip_period: float = 9.0


PROFILE_DEFAULTS: Dict[str, ProfileSpec] = {
    "static": ProfileSpec(speed=0.0),
    "straight": ProfileSpec(),
    "circuit": ProfileSpec(turn_rate=2.0 * np.pi / 60.0, roll_amplitude=0.02),
    "hilly": ProfileSpec(
        speed=13.5,
        turn_rate=2.0 * np.pi / 180.0,
        hill_amplitude=4.0,
        hill_period=20.0,
        roll_amplitude=0.03,
    ),
}


@dataclass(frozen=True)
class ImuErrorSpec:
    """Constant biases and white noise densities added to a clean IMU stream."""
    accel_bias: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    gyro_bias: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    accel_density: float = 0.0
    gyro_density: float = 0.0

    def __post_init__(self):
        if self.accel_density < 0.0 or self.gyro_density < 0.0:
            raise ValueError("IMU noise densities must be non-negative")
        object.__setattr__(self, "accel_bias", tuple(float(v) for v in np.broadcast_to(self.accel_bias, (3,))))
        object.__setattr__(self, "gyro_bias", tuple(float(v) for v in np.broadcast_to(self.gyro_bias, (3,))))


@dataclass(frozen=True, eq=False)
class NavSeries:
    """Time series of positions, velocities and Euler angles (roll, pitch, yaw)."""
    t: NDArray[np.float64]
    p_ned: NDArray[np.float64]
    v_ned: NDArray[np.float64]
    euler: NDArray[np.float64]

    def __post_init__(self):
        t = np.array(self.t, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "t", t)
        for name in ("p_ned", "v_ned", "euler"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.shape != (t.size, 3):
                raise ValueError(f"{name} must have shape ({t.size}, 3), got {arr.shape}")
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.t.size

    def slice(self, mask: NDArray[np.bool_]) -> "NavSeries":
        return NavSeries(self.t[mask], self.p_ned[mask], self.v_ned[mask], self.euler[mask])


@dataclass(frozen=True)
class LogMeta:
    name: str
    imu_rate: float
    duration: float


@dataclass(frozen=True, eq=False)
class TrajectoryLog:
    """IMU stream with optional truth on the same epochs."""
    imu: Tuple[ImuSample, ...]
    truth: Optional[NavSeries]
    meta: LogMeta

    def __post_init__(self):
        imu = tuple(self.imu)
        if not imu:
            raise ValueError("a trajectory log needs at least one IMU sample")
        t = np.array([s.t for s in imu])
        if t.size > 1:
            steps = np.diff(t)
            if np.any(steps <= 0.0):
                raise ValueError("IMU timestamps must be strictly increasing")
            nominal = np.median(steps)
            if np.max(np.abs(steps - nominal)) > 0.01 * nominal:
                raise ValueError("IMU rate varies by more than 1%")
        if self.truth is not None:
            if len(self.truth) != t.size or not np.allclose(self.truth.t, t, rtol=0.0, atol=1e-9):
                raise ValueError("truth and IMU must cover the same epochs")
        object.__setattr__(self, "imu", imu)

    @property
    def t(self) -> NDArray[np.float64]:
        return np.array([s.t for s in self.imu])

    def imu_arrays(self) -> Tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.float64]]:
        t = self.t
        f = np.array([s.f_b for s in self.imu])
        w = np.array([s.w_b for s in self.imu])
        return t, f, w


def _seed_stream(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream]))


def _profile_kinematics(
        params: ProfileSpec,
        t: NDArray[np.float64],
    ) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Returns (euler ZYX as (yaw, pitch, roll) rows, body velocity rows)."""
    s = params.speed
    yaw = params.heading + params.turn_rate * t

    climb = np.full_like(t, s * params.grade)
    if params.hill_amplitude:
        omega = 2.0 * np.pi / params.hill_period
        climb = climb + params.hill_amplitude * omega * np.cos(omega * t)
    pitch = np.arctan2(climb, s) if s > 0.0 else np.zeros_like(t)

    roll = np.zeros_like(t)
    if params.roll_amplitude:
        roll = params.roll_amplitude * np.sin(2.0 * np.pi * t / params.roll_period)

    v_body = np.zeros((t.size, 3))
    v_body[:, 0] = s
    if params.sideslip_amplitude:
        v_body[:, 1] = params.sideslip_amplitude * np.sin(2.0 * np.pi * t / params.sideslip_period)
    if params.heave_amplitude:
        v_body[:, 2] = params.heave_amplitude * np.sin(2.0 * np.pi * t / params.heave_period)

    return np.column_stack((yaw, pitch, roll)), v_body


def gen_synthetic(
        profile: str,
        duration: float = INIT_DURATION,
        rate: float = INIT_RATE,
        imu_errors: Optional[ImuErrorSpec] = None,
        seed: int = 0,
        params: Optional[ProfileSpec] = None,
        gravity: float = GRAVITY,
    ) -> TrajectoryLog:
    """
    Generates a kinematically consistent truth and the IMU stream that
    reproduces it, then corrupts the IMU with ``imu_errors``.

    Sample ``k`` carries the specific force and angular rate over
    ``(t[k-1], t[k]]``; sample 0 repeats sample 1.
    """
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}, expected one of {PROFILES}")
    if not duration > 0.0 or not rate > 0.0:
        raise ValueError(f"duration and rate must be positive, got {duration}, {rate}")
    imu_errors = imu_errors or ImuErrorSpec()
    params = params or PROFILE_DEFAULTS[profile]

    n = int(round(duration * rate)) + 1
    dt = 1.0 / rate
    t = np.arange(n) * dt

    zyx, v_body = _profile_kinematics(params, t)
    rot = Rotation.from_euler("ZYX", zyx)
    dcm = rot.as_matrix()
    v_ned = np.einsum("nij,nj->ni", dcm, v_body)

    p_ned = np.zeros((n, 3))
    p_ned[1:] = np.cumsum(0.5 * (v_ned[1:] + v_ned[:-1]) * dt, axis=0)

    g_ned = np.array([0.0, 0.0, gravity])
    f_b = np.zeros((n, 3))
    w_b = np.zeros((n, 3))
    if n > 1:
        w_b[1:] = (rot[:-1].inv() * rot[1:]).as_rotvec() / dt
        accel = (v_ned[1:] - v_ned[:-1]) / dt - g_ned
        f_b[1:] = np.einsum("nji,nj->ni", dcm[:-1], accel)
        f_b[0], w_b[0] = f_b[1], w_b[1]
    else:
        f_b[0] = -dcm[0].T @ g_ned

    rng = _seed_stream(seed, _IMU_STREAM)
    f_b = f_b + np.asarray(imu_errors.accel_bias)
    w_b = w_b + np.asarray(imu_errors.gyro_bias)
    if imu_errors.accel_density > 0.0:
        f_b = f_b + rng.normal(0.0, imu_errors.accel_density * np.sqrt(rate), size=(n, 3))
    if imu_errors.gyro_density > 0.0:
        w_b = w_b + rng.normal(0.0, imu_errors.gyro_density * np.sqrt(rate), size=(n, 3))

    euler = rot.as_euler("ZYX")[:, ::-1]
    truth = NavSeries(t=t, p_ned=p_ned, v_ned=v_ned, euler=euler)
    imu = tuple(ImuSample(t[k], f_b[k], w_b[k]) for k in range(n))
    logger.debug("generated %s profile: %d epochs at %.1f Hz", profile, n, rate)
    return TrajectoryLog(imu=imu, truth=truth, meta=LogMeta(profile, float(rate), float(t[-1])))


def corrupt_gnss(
        truth: NavSeries,
        std: float,
        rate: float = 1.0,
        seed: int = 0,
    ) -> Tuple[GnssFix, ...]:
    """
    Subsamples truth positions to ``rate`` (first epoch included) and adds
    i.i.d. zero-mean Gaussian noise per axis.
    """
    if std < 0.0 or not np.isfinite(std):
        raise ValueError(f"GNSS noise std must be non-negative, got {std}")
    if not rate > 0.0:
        raise ValueError(f"GNSS rate must be positive, got {rate}")
    if len(truth) == 0:
        return ()

    if len(truth) > 1:
        imu_rate = 1.0 / float(np.median(np.diff(truth.t)))
        step = max(1, int(round(imu_rate / rate)))
    else:
        step = 1
    index = np.arange(0, len(truth), step)

    rng = _seed_stream(seed, _GNSS_STREAM)
    noise = rng.normal(0.0, std, size=(index.size, 3)) if std > 0.0 else np.zeros((index.size, 3))
    sigma = max(std, MIN_GNSS_SIGMA)
    return tuple(
        GnssFix(t=truth.t[k], p_ned=truth.p_ned[k] + noise[i], sigma=sigma)
        for i, k in enumerate(index)
    )


def derive_bounds(
        truth: NavSeries,
        scale: float = INIT_BOUNDS_SCALE,
        v_max: float = INIT_V_MAX,
        altitude_mode: str = "relative",
        min_height: float = MIN_HEIGHT_HALF_WIDTH,
        min_angle: float = MIN_ANGLE_HALF_WIDTH,
    ) -> EnvelopeBounds:
    """
    Symmetric per-sequence envelope: ``scale`` times the largest absolute
    truth value of roll, pitch and altitude.

    Altitude is measured from the first epoch in ``relative`` mode and from
    zero in ``absolute`` mode. Half-widths never drop below ``min_height``
    and ``min_angle`` so constant truth still yields a valid envelope.
    """
    if len(truth) == 0:
        raise ValueError("bounds need a non-empty truth series")
    if not scale > 0.0:
        raise ValueError(f"bounds scale must be positive, got {scale}")
    if altitude_mode not in ALTITUDE_MODES:
        raise ValueError(f"altitude_mode must be one of {ALTITUDE_MODES}, got {altitude_mode!r}")

    h = -truth.p_ned[:, 2]
    centre = h[0] if altitude_mode == "relative" else 0.0
    h_half = max(scale * float(np.max(np.abs(h - centre))), min_height)
    roll_half = max(scale * float(np.max(np.abs(truth.euler[:, 0]))), min_angle)
    pitch_half = max(scale * float(np.max(np.abs(truth.euler[:, 1]))), min_angle)

    return EnvelopeBounds(
        h_min=centre - h_half,
        h_max=centre + h_half,
        roll_min=-roll_half,
        roll_max=roll_half,
        pitch_min=-pitch_half,
        pitch_max=pitch_half,
        v_max=v_max,
    )


def with_profile(profile: str, **overrides) -> ProfileSpec:
    """Profile defaults with selected fields replaced."""
    return replace(PROFILE_DEFAULTS[profile], **overrides)
