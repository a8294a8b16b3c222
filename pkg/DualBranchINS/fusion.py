"""
Variance-weighted fusion of the NHC and INQ branch estimates.

Weights are computed per StateVector15 slot from the branch covariances and
biased by a lambda vector that favours the inequality branch on the bounded
slots (altitude, roll, pitch, vertical velocity).
"""

from __future__ import annotations

from dataclasses import dataclass
import logging
from typing import Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .constraint_branch import BranchEstimate, BranchId
from .nav_core import (
    ATT,
    SLOT_YAW,
    STATE_DIM,
    NavState,
    euler_rate_map,
    from_state_vector,
    to_state_vector,
    wrap_angle,
)

logger = logging.getLogger(__name__)

WEIGHTING_MODES = ("normalized", "literal")
ATTITUDE_GUARD = np.radians(10.0)

FULL_GNSS_LAMBDA = (0.85, 0.85, 10.0, 1.0, 1.0, 10.0, 10.0, 10.0) + (1.0,) * 7
GNSS_DENIED_LAMBDA = (0.25, 0.25, 10.0) + (1.0,) * 12


@dataclass(frozen=True, eq=False)
class LambdaVector:
    """Per-slot bias of the INQ weight; all entries strictly positive."""
    lam: NDArray[np.float64]

    def __post_init__(self):
        lam = np.array(self.lam, dtype=np.float64).reshape(-1)
        if lam.shape != (STATE_DIM,):
            raise ValueError(f"lambda needs {STATE_DIM} entries, got {lam.size}")
        if not np.all(np.isfinite(lam)) or np.any(lam <= 0.0):
            raise ValueError(f"lambda entries must be finite and positive, got {lam}")
        lam.flags.writeable = False
        object.__setattr__(self, "lam", lam)

    @classmethod
    def full_gnss(cls) -> "LambdaVector":
        return cls(FULL_GNSS_LAMBDA)

    @classmethod
    def gnss_denied(cls) -> "LambdaVector":
        return cls(GNSS_DENIED_LAMBDA)


@dataclass(frozen=True, eq=False)
class FusedEstimate:
    state: NavState
    w_inq: NDArray[np.float64]
    w_nhc: NDArray[np.float64]
    x15: NDArray[np.float64]


def slot_variances(state: NavState, P: NDArray[np.float64]) -> NDArray[np.float64]:
    """Diagonal of the covariance in the StateVector15 layout."""
    P = np.asarray(P, dtype=np.float64)
    var = np.diag(P).copy()
    e_inv = np.linalg.inv(euler_rate_map(state.euler))
    var[ATT] = np.einsum("ij,jk,ik->i", e_inv, P[ATT, ATT], e_inv)
    return var


def fusion_weights(
        var_inq: ArrayLike,
        var_nhc: ArrayLike,
        lam: LambdaVector,
        weighting: str = "normalized",
    ) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """
    Per-slot weights ``(w_inq, w_nhc)``.

    ``normalized``: ``w_inq = lam * (1/var_inq) / (1/var_inq + 1/var_nhc)``.
    ``literal``:    ``w_inq = (1/var_inq + 1/var_nhc) * var_inq * lam``.
    Both are clipped to [0, 1] and ``w_nhc = 1 - w_inq``.
    """
    var_inq = np.asarray(var_inq, dtype=np.float64)
    var_nhc = np.asarray(var_nhc, dtype=np.float64)
    if np.any(~(var_inq > 0.0)) or np.any(~(var_nhc > 0.0)):
        raise ValueError("branch variances must be strictly positive on every slot")

    if weighting == "normalized":
        w_inq = lam.lam * var_nhc / (var_inq + var_nhc)
    elif weighting == "literal":
        w_inq = (1.0 / var_inq + 1.0 / var_nhc) * var_inq * lam.lam
    else:
        raise ValueError(f"weighting must be one of {WEIGHTING_MODES}, got {weighting!r}")

    w_inq = np.clip(w_inq, 0.0, 1.0)
    return w_inq, 1.0 - w_inq


def fuse(
        b1: BranchEstimate,
        b2: BranchEstimate,
        lam: LambdaVector,
        weighting: str = "normalized",
    ) -> FusedEstimate:
    """
    Fuses the NHC estimate ``b1`` with the INQ estimate ``b2``.

    Every slot, attitude included, is combined as
    ``x_nhc + w_inq * (x_inq - x_nhc)``; the yaw difference is wrapped first.
    """
    if b1.branch_id is not BranchId.NHC or b2.branch_id is not BranchId.INQ:
        raise ValueError(
            f"expected (NHC, INQ) branches, got ({b1.branch_id.value}, {b2.branch_id.value})")

    separation = (b1.state.rotation.inv() * b2.state.rotation).magnitude()
    if separation > ATTITUDE_GUARD:
        logger.warning(
            "branch attitudes differ by %.2f deg, Euler-slot fusion is unreliable",
            np.degrees(separation))

    x_nhc = to_state_vector(b1.state)
    x_inq = to_state_vector(b2.state)
    w_inq, w_nhc = fusion_weights(
        slot_variances(b2.state, b2.P),
        slot_variances(b1.state, b1.P),
        lam,
        weighting,
    )

    diff = x_inq - x_nhc
    diff[SLOT_YAW] = wrap_angle(diff[SLOT_YAW])
    x15 = x_nhc + w_inq * diff
    x15[SLOT_YAW] = wrap_angle(x15[SLOT_YAW])

    return FusedEstimate(
        state=from_state_vector(x15, ref=b1.state),
        w_inq=w_inq,
        w_nhc=w_nhc,
        x15=x15,
    )
