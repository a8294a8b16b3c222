"""
Unconstrained error-state EKF: covariance prediction, GNSS position update
with Joseph-form covariance and injection of the error state into the
nominal state.

This is the "EKF" baseline and the substrate of both constrained branches.
All functions are pure; a ``FilterState`` is never modified in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import logging

import numpy as np
from numpy.typing import NDArray
from scipy.spatial.transform import Rotation

from .nav_core import (
    ACC_BIAS,
    ATT,
    GRAVITY,
    GYRO_BIAS,
    PHI_MODES,
    POS,
    STATE_DIM,
    VEL,
    GnssFix,
    ImuSample,
    NavState,
    NoiseSpec,
    process_noise,
    propagate_nominal,
    skew,
    state_transition,
)

logger = logging.getLogger(__name__)

INIT_GNSS_STD = 3.5
INIT_NHC_STD = 0.05
INIT_P0_STD = (
    1.0, 1.0, 1.0,          # position, m
    0.1, 0.1, 0.1,          # velocity, m/s
    0.01, 0.01, 0.02,       # attitude, rad
    5e-3, 5e-3, 5e-3,       # accelerometer bias, m/s^2, factory-calibrated unit
    1e-3, 1e-3, 1e-3,       # gyro bias, rad/s
)
INIT_GNSS_TIME_TOLERANCE = 0.01
INIT_FEASIBILITY_EPS = 1e-6
INIT_QP_TOL = 1e-8
INIT_QP_MAX_ITER = 50
PROJECTION_WEIGHTINGS = ("per-slot", "full")
SINGULAR_CONDITION = 1e14


def symmetrize(P: NDArray[np.float64]) -> NDArray[np.float64]:
    return 0.5 * (P + P.T)


def _check_covariance(M: NDArray[np.float64], name: str, size: int) -> NDArray[np.float64]:
    M = np.array(M, dtype=np.float64)
    if M.shape != (size, size):
        raise ValueError(f"{name} must be {size}x{size}, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} must be finite")
    if np.max(np.abs(M - M.T)) > 1e-9 * max(1.0, np.max(np.abs(M))):
        raise ValueError(f"{name} must be symmetric")
    if np.min(np.linalg.eigvalsh(M)) < -1e-9 * max(1.0, np.max(np.abs(M))):
        raise ValueError(f"{name} must be positive semidefinite")
    M = symmetrize(M)
    M.flags.writeable = False
    return M


@dataclass(frozen=True, eq=False)
class FilterConfig:
    """
    Filter tuning.

    Args:
        q_spec: IMU noise densities for the process noise.
        r_gnss: 3x3 GNSS position measurement covariance (m^2).
        p0: Initial 15x15 error covariance.
        phi_mode: "exact" (series exponential) or "first-order".
        r_nhc: 2x2 covariance of the non-holonomic pseudo-measurement ((m/s)^2).
        gravity: Gravity magnitude (m/s^2).
        gnss_time_tolerance: Largest accepted gap between a fix and the
            filter epoch it is applied at (s). Usually one IMU period.
        feasibility_eps: Tolerance of the constraint feasibility check.
        qp_tol: Primal tolerance handed to the QP solver.
        qp_max_iter: Iteration cap of the QP solver.
        projection_weighting: Metric of the outage projection, "per-slot"
            (covariance diagonal) or "full" (whole covariance).
    """
    q_spec: NoiseSpec = field(default_factory=NoiseSpec)
    r_gnss: NDArray[np.float64] = field(
        default_factory=lambda: np.eye(3) * INIT_GNSS_STD ** 2)
    p0: NDArray[np.float64] = field(
        default_factory=lambda: np.diag(np.square(INIT_P0_STD)))
    phi_mode: str = "exact"
    r_nhc: NDArray[np.float64] = field(
        default_factory=lambda: np.eye(2) * INIT_NHC_STD ** 2)
    gravity: float = GRAVITY
    gnss_time_tolerance: float = INIT_GNSS_TIME_TOLERANCE
    feasibility_eps: float = INIT_FEASIBILITY_EPS
    qp_tol: float = INIT_QP_TOL
    qp_max_iter: int = INIT_QP_MAX_ITER
    projection_weighting: str = "per-slot"

    def __post_init__(self):
        object.__setattr__(self, "r_gnss", _check_covariance(self.r_gnss, "r_gnss", 3))
        object.__setattr__(self, "p0", _check_covariance(self.p0, "p0", STATE_DIM))
        object.__setattr__(self, "r_nhc", _check_covariance(self.r_nhc, "r_nhc", 2))
        if self.phi_mode not in PHI_MODES:
            raise ValueError(f"phi_mode must be one of {PHI_MODES}, got {self.phi_mode!r}")
        if self.projection_weighting not in PROJECTION_WEIGHTINGS:
            raise ValueError(
                f"projection_weighting must be one of {PROJECTION_WEIGHTINGS}, got {self.projection_weighting!r}")
        if self.gnss_time_tolerance < 0.0:
            raise ValueError("gnss_time_tolerance must be non-negative")


@dataclass(frozen=True, eq=False)
class FilterState:
    """
    Filter output at one epoch.

    ``fallbacks`` counts epochs at which a constrained step could not be
    solved and the unconstrained result was kept instead.
    """
    nominal: NavState
    P: NDArray[np.float64]
    t: float
    fallbacks: int = 0

    def __post_init__(self):
        P = np.array(self.P, dtype=np.float64)
        if P.shape != (STATE_DIM, STATE_DIM):
            raise ValueError(f"P must be {STATE_DIM}x{STATE_DIM}, got shape {P.shape}")
        if not np.all(np.isfinite(P)):
            raise ValueError("P must be finite")
        P.flags.writeable = False
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "t", float(self.t))


def initial_state(nominal: NavState, t: float, cfg: FilterConfig) -> FilterState:
    return FilterState(nominal=nominal, P=cfg.p0, t=t)


def predict(fs: FilterState, imu: ImuSample, cfg: FilterConfig) -> FilterState:
    """Propagates the nominal state and the covariance to ``imu.t``."""
    dt = imu.t - fs.t
    if not dt > 0.0:
        raise ValueError(
            f"IMU timestamp {imu.t:.6f} does not advance past filter time {fs.t:.6f}")

    phi = state_transition(fs.nominal, imu, dt, cfg.phi_mode)
    Q = process_noise(cfg.q_spec, dt, fs.nominal.dcm)
    nominal = propagate_nominal(fs.nominal, imu, dt, cfg.gravity)
    P = symmetrize(phi @ fs.P @ phi.T + Q)
    return replace(fs, nominal=nominal, P=P, t=imu.t)


def kalman_gain(
        P: NDArray[np.float64],
        H: NDArray[np.float64],
        R: NDArray[np.float64],
    ) -> NDArray[np.float64]:
    """
    Optimal gain ``K = P H^T (H P H^T + R)^-1``.

    Raises:
        numpy.linalg.LinAlgError: if the innovation covariance is singular.
    """
    S = H @ P @ H.T + R
    if not np.all(np.isfinite(S)) or np.linalg.cond(S) > SINGULAR_CONDITION:
        raise np.linalg.LinAlgError(
            f"singular innovation covariance (cond={np.linalg.cond(S):.3e})")
    return np.linalg.solve(S, H @ P).T


def joseph_covariance(
        P: NDArray[np.float64],
        K: NDArray[np.float64],
        H: NDArray[np.float64],
        R: NDArray[np.float64],
    ) -> NDArray[np.float64]:
    """Joseph-form update, valid for any gain ``K``."""
    IKH = np.eye(P.shape[0]) - K @ H
    return symmetrize(IKH @ P @ IKH.T + K @ R @ K.T)


def correct_nominal(state: NavState, dx: NDArray[np.float64]) -> NavState:
    """Injects an error state into the nominal state."""
    dx = np.asarray(dx, dtype=np.float64)
    if dx.shape != (STATE_DIM,) or not np.all(np.isfinite(dx)):
        raise ValueError(f"error state must be a finite {STATE_DIM}-vector")

    att = state.att
    eps = dx[ATT]
    if np.any(eps):
        corrected = (np.eye(3) + skew(eps)).T @ state.dcm
        att = Rotation.from_matrix(corrected).as_quat()
        if np.dot(att, state.att) < 0.0:
            att = -att

    return NavState(
        p_ned=state.p_ned - dx[POS],
        v_ned=state.v_ned - dx[VEL],
        att=att,
        b_a=state.b_a + dx[ACC_BIAS],
        b_g=state.b_g + dx[GYRO_BIAS],
    )


def update_with_gain(
        fs: FilterState,
        K: NDArray[np.float64],
        H: NDArray[np.float64],
        R: NDArray[np.float64],
        innovation: NDArray[np.float64],
    ) -> FilterState:
    """
    Applies ``dx = K @ innovation`` and the Joseph covariance for ``K``.

    ``innovation`` is predicted minus measured; the error state is reset to
    zero by the injection.
    """
    dx = K @ innovation
    return replace(
        fs,
        nominal=correct_nominal(fs.nominal, dx),
        P=joseph_covariance(fs.P, K, H, R),
    )


def gnss_observation_matrix() -> NDArray[np.float64]:
    H = np.zeros((3, STATE_DIM))
    H[:, POS] = np.eye(3)
    return H


def gnss_update(fs: FilterState, fix: GnssFix, cfg: FilterConfig) -> FilterState:
    """Loosely coupled GNSS position update."""
    if abs(fix.t - fs.t) > cfg.gnss_time_tolerance:
        raise ValueError(
            f"GNSS fix at t={fix.t:.6f} is more than {cfg.gnss_time_tolerance} s "
            f"from filter epoch t={fs.t:.6f}")

    H = gnss_observation_matrix()
    innovation = fs.nominal.p_ned - fix.p_ned
    try:
        K = kalman_gain(fs.P, H, cfg.r_gnss)
    except np.linalg.LinAlgError:
        logger.error("GNSS update at t=%.3f rejected: singular innovation covariance", fs.t)
        raise
    logger.debug("GNSS update t=%.3f innovation=%s", fs.t, innovation)
    return update_with_gain(fs, K, H, cfg.r_gnss, innovation)
