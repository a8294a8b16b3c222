"""
The two aiding branches of the dual-branch filter.

Branch 1 (NHC) treats the body-frame lateral and vertical velocity of a
wheeled vehicle as zero-valued pseudo-measurements. Branch 2 (INQ) keeps the
state inside a physical envelope: height, roll and pitch bounds plus a
forward-velocity cap. Without GNSS the predicted state is projected onto the
envelope (covariance untouched), with GNSS the Kalman gain itself is
re-optimized so that the corrected state lands inside the envelope.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
import logging
from typing import Optional, Tuple

import numpy as np
from numpy.typing import NDArray

from .eskf import (
    FilterConfig,
    FilterState,
    gnss_observation_matrix,
    gnss_update,
    kalman_gain,
    predict,
    update_with_gain,
)
from .nav_core import (
    ATT,
    SLOT_ALTITUDE,
    SLOT_PITCH,
    SLOT_ROLL,
    SLOT_V_DOWN,
    STATE_DIM,
    VEL,
    GnssFix,
    ImuSample,
    NavState,
    from_state_vector,
    skew,
    state_error,
    state_jacobian,
    to_state_covariance,
    to_state_vector,
)
from .qp_solver import InfeasibleProjectionError, QpProblem, project_state, solve

logger = logging.getLogger(__name__)

INIT_V_MAX = 13.89  # 50 km/h
GAIN_REFINEMENT_PASSES = 3

ROW_STATE = "state"
ROW_BODY = "body"


class BranchId(str, Enum):
    NHC = "NHC"
    INQ = "INQ"


@dataclass(frozen=True)
class EnvelopeBounds:
    """Physical envelope of one sequence. Angles in radians, height in meters."""
    h_min: float
    h_max: float
    roll_min: float
    roll_max: float
    pitch_min: float
    pitch_max: float
    v_max: float = INIT_V_MAX

    def __post_init__(self):
        for low, high in (("h_min", "h_max"), ("roll_min", "roll_max"), ("pitch_min", "pitch_max")):
            lo, hi = getattr(self, low), getattr(self, high)
            if np.isnan(lo) or np.isnan(hi) or not lo < hi:
                raise ValueError(f"{low}={lo} must be below {high}={hi}")
        if not self.v_max > 0.0:
            raise ValueError(f"v_max must be positive, got {self.v_max}")

    @classmethod
    def unbounded(cls, v_max: float = np.inf) -> "EnvelopeBounds":
        return cls(-np.inf, np.inf, -np.inf, np.inf, -np.inf, np.inf, v_max)


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    """
    Linear inequality rows ``C x <= d``.

    Rows of kind ``"state"`` act on the StateVector15 of a state. Rows of
    kind ``"body"`` act on the error state and are linearized at ``anchor``:
    their value at a state ``s`` is ``C[:, 3:6] @ anchor.v_ned - C @ dx``
    where ``dx`` is the error of ``anchor`` relative to ``s``.
    """
    C: NDArray[np.float64]
    d: NDArray[np.float64]
    labels: Tuple[str, ...]
    kinds: Tuple[str, ...]
    anchor: Optional[NavState] = None

    def __post_init__(self):
        C = np.array(self.C, dtype=np.float64)
        d = np.array(self.d, dtype=np.float64).reshape(-1)
        rows = d.size
        if C.shape != (rows, STATE_DIM):
            raise ValueError(f"C must be {rows}x{STATE_DIM}, got shape {C.shape}")
        if not np.all(np.isfinite(C)) or np.any(np.isnan(d)):
            raise ValueError("constraint rows must be finite and limits must not be NaN")
        if len(self.labels) != rows or len(self.kinds) != rows:
            raise ValueError("every constraint row needs a label and a kind")
        if any(kind not in (ROW_STATE, ROW_BODY) for kind in self.kinds):
            raise ValueError(f"unknown constraint row kind in {self.kinds}")
        if ROW_BODY in self.kinds and self.anchor is None:
            raise ValueError("body-frame constraint rows need a linearization anchor")
        C.flags.writeable = False
        d.flags.writeable = False
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "kinds", tuple(self.kinds))

    def __len__(self) -> int:
        return self.d.size

    @property
    def is_state_space(self) -> bool:
        return all(kind == ROW_STATE for kind in self.kinds)

    @property
    def _body_rows(self) -> NDArray[np.bool_]:
        return np.array([kind == ROW_BODY for kind in self.kinds], dtype=bool)

    def combine(self, other: "ConstraintSet") -> "ConstraintSet":
        if self.anchor is not None and other.anchor is not None and self.anchor is not other.anchor:
            raise ValueError("cannot combine body rows linearized at different states")
        return ConstraintSet(
            C=np.vstack((self.C, other.C)),
            d=np.concatenate((self.d, other.d)),
            labels=self.labels + other.labels,
            kinds=self.kinds + other.kinds,
            anchor=self.anchor if self.anchor is not None else other.anchor,
        )

    def values(self, state: NavState) -> NDArray[np.float64]:
        """Left-hand side ``C x`` of every row evaluated at ``state``."""
        out = np.empty(len(self))
        body = self._body_rows
        if not np.all(body):
            out[~body] = self.C[~body] @ to_state_vector(state)
        if np.any(body):
            dx = state_error(self.anchor, state)
            out[body] = self.C[body, VEL] @ self.anchor.v_ned - self.C[body] @ dx
        return out

    def violation(self, state: NavState) -> NDArray[np.float64]:
        return self.values(state) - self.d

    def correction_jacobian(self, state: NavState) -> NDArray[np.float64]:
        """
        Derivative of the row values of ``correct_nominal(state, dx)`` with
        respect to ``dx``. Body rows assume ``state`` is their anchor.
        """
        J = np.empty((len(self), STATE_DIM))
        body = self._body_rows
        if not np.all(body):
            J[~body] = self.C[~body] @ state_jacobian(state)
        J[body] = -self.C[body]
        return J


@dataclass(frozen=True, eq=False)
class BranchEstimate:
    state: NavState
    P: NDArray[np.float64]
    branch_id: BranchId

    @classmethod
    def from_filter(cls, fs: FilterState, branch_id: BranchId) -> "BranchEstimate":
        return cls(state=fs.nominal, P=fs.P, branch_id=BranchId(branch_id))


def nhc_observation(state: NavState) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """
    Jacobian and predicted value of the body lateral/vertical velocity.

    Returns:
        (H, y) where ``H`` is 2x15 and ``y`` are rows 2 and 3 of ``T_n^b v``.
    """
    c_nb = state.dcm.T
    H_full = np.zeros((3, STATE_DIM))
    H_full[:, VEL] = c_nb
    H_full[:, ATT] = c_nb @ skew(state.v_ned)
    y = c_nb @ state.v_ned
    return H_full[1:], y[1:]


def nhc_update(fs: FilterState, r_nhc: NDArray[np.float64]) -> FilterState:
    """Zero lateral/vertical body velocity pseudo-measurement update."""
    H, y = nhc_observation(fs.nominal)
    r_nhc = np.asarray(r_nhc, dtype=np.float64)
    try:
        K = kalman_gain(fs.P, H, r_nhc)
    except np.linalg.LinAlgError as exc:
        logger.warning("NHC update skipped at t=%.3f: %s", fs.t, exc)
        return fs
    return update_with_gain(fs, K, H, r_nhc, y)


def _single_bound_row(slot: int, sign: float) -> NDArray[np.float64]:
    row = np.zeros(STATE_DIM)
    row[slot] = sign
    return row


def build_static_constraints(b: EnvelopeBounds) -> ConstraintSet:
    """Height, roll and pitch bounds as six single-slot rows."""
    slots = (SLOT_ALTITUDE, SLOT_ROLL, SLOT_PITCH)
    C = np.vstack(
        [_single_bound_row(slot, 1.0) for slot in slots]
        + [_single_bound_row(slot, -1.0) for slot in slots]
    )
    d = np.array([b.h_max, b.roll_max, b.pitch_max, -b.h_min, -b.roll_min, -b.pitch_min])
    labels = ("h_max", "roll_max", "pitch_max", "h_min", "roll_min", "pitch_min")
    return ConstraintSet(C=C, d=d, labels=labels, kinds=(ROW_STATE,) * 6)


def build_velocity_constraint_qp(pitch: float, v_max: float) -> ConstraintSet:
    """Down-velocity bound ``|v_d| <= |sin(pitch)| * v_max`` for the projection path."""
    if not v_max > 0.0:
        raise ValueError(f"v_max must be positive, got {v_max}")
    # an infinite cap times sin(0) is NaN, not 0
    v_d_max = np.inf if np.isinf(v_max) else abs(np.sin(pitch)) * v_max
    C = np.vstack((_single_bound_row(SLOT_V_DOWN, 1.0), _single_bound_row(SLOT_V_DOWN, -1.0)))
    return ConstraintSet(
        C=C,
        d=np.array([v_d_max, v_d_max]),
        labels=("v_down_max", "v_down_min"),
        kinds=(ROW_STATE, ROW_STATE),
    )


def build_velocity_constraint_gain(state: NavState, v_max: float) -> ConstraintSet:
    """
    Body forward-velocity bound ``|e1^T T_n^b v| <= v_max`` linearized at
    ``state``, for the gain-optimization path.
    """
    if not v_max > 0.0:
        raise ValueError(f"v_max must be positive, got {v_max}")
    c_nb = state.dcm.T
    row = np.zeros(STATE_DIM)
    row[VEL] = c_nb[0]
    row[ATT] = (c_nb @ skew(state.v_ned))[0]
    return ConstraintSet(
        C=np.vstack((row, -row)),
        d=np.array([v_max, v_max]),
        labels=("v_fwd_max", "v_fwd_min"),
        kinds=(ROW_BODY, ROW_BODY),
        anchor=state,
    )


def branch_constraint_set(
        state: NavState,
        has_fix: bool,
        bounds: EnvelopeBounds,
    ) -> ConstraintSet:
    """Rows applied by the inequality branch at an epoch with or without GNSS."""
    static = build_static_constraints(bounds)
    if has_fix:
        return static.combine(build_velocity_constraint_gain(state, bounds.v_max))
    pitch = state.euler[1]
    return static.combine(build_velocity_constraint_qp(pitch, bounds.v_max))


def _is_feasible(cs: ConstraintSet, state: NavState, eps: float) -> bool:
    return bool(np.all(cs.violation(state) <= eps))


def gain_problem(
        fs: FilterState,
        fix: GnssFix,
        cs: ConstraintSet,
        cfg: FilterConfig,
    ) -> Tuple[QpProblem, NDArray[np.float64]]:
    """
    QP over the row-major entries of the gain ``K`` (15x3).

    The objective is the trace of the Joseph covariance, up to a constant;
    each row becomes affine in ``K`` through the first-order correction map.

    Returns:
        (problem, innovation)
    """
    H = gnss_observation_matrix()
    R = cfg.r_gnss
    P = fs.P
    innovation = fs.nominal.p_ned - fix.p_ned
    n, m = H.shape[1], H.shape[0]

    S = H @ P @ H.T + R
    Hq = 2.0 * np.kron(np.eye(n), S)
    g = -2.0 * (P @ H.T).reshape(-1)

    J = cs.correction_jacobian(fs.nominal)
    A = np.einsum("ir,c->irc", J, innovation).reshape(len(cs), n * m)
    b = cs.d - cs.values(fs.nominal)
    return QpProblem(Hq=Hq, g=g, A_ineq=A, b_ineq=b), innovation


def constrained_gain_update(
        fs: FilterState,
        fix: GnssFix,
        cs: ConstraintSet,
        cfg: FilterConfig,
    ) -> FilterState:
    """
    GNSS update whose gain is re-optimized when the ordinary posterior
    leaves the envelope.

    If the unconstrained posterior satisfies every row within
    ``cfg.feasibility_eps`` it is returned as is. Otherwise the minimum-trace
    gain subject to all rows is solved for; rows still violated after the
    nonlinear attitude correction are tightened and the QP re-solved. A
    failed QP, or rows still violated after the last pass, keep the
    unconstrained gain and count a fallback.
    """
    unconstrained = gnss_update(fs, fix, cfg)
    if _is_feasible(cs, unconstrained.nominal, cfg.feasibility_eps):
        return unconstrained

    problem, innovation = gain_problem(fs, fix, cs, cfg)
    H = gnss_observation_matrix()
    n, m = H.shape[1], H.shape[0]
    b = problem.b_ineq
    result = None

    for attempt in range(GAIN_REFINEMENT_PASSES):
        solution = solve(replace(problem, b_ineq=b), cfg.qp_tol, cfg.qp_max_iter)
        if not solution.ok:
            logger.warning(
                "constrained gain at t=%.3f failed (%s), keeping the unconstrained gain",
                fs.t, solution.status.value)
            return replace(unconstrained, fallbacks=fs.fallbacks + 1)

        K_c = solution.x.reshape(n, m)
        result = update_with_gain(fs, K_c, H, cfg.r_gnss, innovation)
        overshoot = cs.violation(result.nominal)
        if np.all(overshoot <= cfg.feasibility_eps):
            logger.debug(
                "constrained gain at t=%.3f active rows %s",
                fs.t, [cs.labels[i] for i in solution.active_set])
            return result
        logger.debug("constrained gain pass %d overshoot %.3e", attempt, np.max(overshoot))
        b = b - np.maximum(overshoot, 0.0)

    excess = float(np.max(cs.violation(result.nominal))) if result is not None else float("nan")
    logger.warning(
        "constrained gain at t=%.3f still exceeds rows by %.3e after %d passes, "
        "keeping the unconstrained gain", fs.t, excess, GAIN_REFINEMENT_PASSES)
    return replace(unconstrained, fallbacks=fs.fallbacks + 1)


def project_filter_state(fs: FilterState, cs: ConstraintSet, cfg: FilterConfig) -> FilterState:
    """
    Projects the nominal state onto ``cs``; the covariance is left as is.

    The projection metric follows ``cfg.projection_weighting``: ``full``
    weights by the whole StateVector15 covariance, ``per-slot`` by its
    diagonal only. The covariance is never updated by a projection, so under
    ``full`` weighting every epoch a row binds re-applies the same
    cross-covariance and drags correlated slots (altitude with vertical
    velocity, bias with velocity) a little further. ``per-slot`` keeps each
    single-slot row on its own slot.
    """
    x15 = to_state_vector(fs.nominal)
    if np.all(cs.C @ x15 <= cs.d + cfg.qp_tol):
        return fs
    P15 = to_state_covariance(fs.nominal, fs.P)
    if cfg.projection_weighting == "per-slot":
        P15 = np.diag(np.diag(P15))
    try:
        projected = project_state(x15, P15, cs, cfg.qp_tol, cfg.qp_max_iter)
    except InfeasibleProjectionError as exc:
        logger.warning("projection skipped at t=%.3f: %s", fs.t, exc)
        return replace(fs, fallbacks=fs.fallbacks + 1)
    return replace(fs, nominal=from_state_vector(projected, ref=fs.nominal))


def inequality_branch_step(
        fs: FilterState,
        imu: ImuSample,
        fix: Optional[GnssFix],
        bounds: EnvelopeBounds,
        cfg: FilterConfig,
    ) -> FilterState:
    """
    One epoch of the inequality branch: predict, then constrain.

    Without a fix only the predicted state is projected. Position was
    already advanced by the prediction with the unclamped velocity, so at
    zero pitch the down velocity is clamped to 0 but altitude still moves by
    the within-epoch increment (``0.5 * a_d * dt**2`` per epoch), not exactly
    frozen.
    """
    predicted = predict(fs, imu, cfg)
    cs = branch_constraint_set(predicted.nominal, fix is not None, bounds)
    if fix is not None:
        return constrained_gain_update(predicted, fix, cs, cfg)
    return project_filter_state(predicted, cs, cfg)


def nhc_branch_step(
        fs: FilterState,
        imu: ImuSample,
        fix: Optional[GnssFix],
        cfg: FilterConfig,
    ) -> FilterState:
    """One epoch of the NHC branch: predict, GNSS when available, then NHC."""
    fs = predict(fs, imu, cfg)
    if fix is not None:
        fs = gnss_update(fs, fix, cfg)
    return nhc_update(fs, cfg.r_nhc)
