"""Error metrics for trajectory evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np
from numpy.typing import NDArray

from DualBranchINS.nav_core import wrap_angle

from .trajectory import NavSeries

METRIC_NAMES = ("prmse", "vrmse", "armse", "h_prmse", "v_prmse")
P95_NAMES = ("position", "velocity", "attitude", "horizontal", "vertical")


def _rms(squared: NDArray[np.float64]) -> float:
    return float(np.sqrt(np.mean(squared)))


def percentile95(values: NDArray[np.float64]) -> float:
    """95th percentile with linear interpolation between order statistics."""
    return float(np.percentile(np.asarray(values, dtype=np.float64), 95))


@dataclass(frozen=True, eq=False)
class MetricsReport:
    """
    Attributes:
        prmse, vrmse: RMS of the 3D position/velocity error norms.
        armse: RMS over roll and pitch errors (yaw excluded).
        h_prmse, v_prmse: Horizontal/vertical split of ``prmse``.
        yaw_rmse: Reported for completeness, not part of ``armse``.
        p95: 95th percentile of the per-epoch absolute error norms.
        position_error, velocity_error, attitude_error: Per-epoch errors,
            estimate minus truth; attitude as wrapped (roll, pitch, yaw).
    """
    prmse: float
    vrmse: float
    armse: float
    h_prmse: float
    v_prmse: float
    yaw_rmse: float
    p95: Dict[str, float]
    t: NDArray[np.float64]
    position_error: NDArray[np.float64]
    velocity_error: NDArray[np.float64]
    attitude_error: NDArray[np.float64]

    def summary(self) -> Dict[str, object]:
        out: Dict[str, object] = {name: getattr(self, name) for name in METRIC_NAMES}
        out["yaw_rmse"] = self.yaw_rmse
        out["p95"] = dict(self.p95)
        out["epochs"] = int(self.t.size)
        return out


def compute_metrics(est: NavSeries, truth: NavSeries) -> MetricsReport:
    """Compares two aligned series epoch by epoch."""
    if len(est) != len(truth):
        raise ValueError(f"series lengths differ: {len(est)} estimates vs {len(truth)} truth epochs")
    if len(est) == 0:
        raise ValueError("cannot compute metrics on empty series")
    if not np.allclose(est.t, truth.t, rtol=0.0, atol=1e-9):
        raise ValueError("estimate and truth timestamps are not aligned")

    dp = est.p_ned - truth.p_ned
    dv = est.v_ned - truth.v_ned
    datt = wrap_angle(est.euler - truth.euler)

    pos_sq = np.sum(dp ** 2, axis=1)
    vel_sq = np.sum(dv ** 2, axis=1)
    att_sq = np.sum(datt[:, :2] ** 2, axis=1)
    hor_sq = np.sum(dp[:, :2] ** 2, axis=1)
    ver_sq = dp[:, 2] ** 2

    p95 = {
        "position": percentile95(np.sqrt(pos_sq)),
        "velocity": percentile95(np.sqrt(vel_sq)),
        "attitude": percentile95(np.sqrt(att_sq)),
        "horizontal": percentile95(np.sqrt(hor_sq)),
        "vertical": percentile95(np.abs(dp[:, 2])),
    }

    return MetricsReport(
        prmse=_rms(pos_sq),
        vrmse=_rms(vel_sq),
        armse=_rms(att_sq),
        h_prmse=_rms(hor_sq),
        v_prmse=_rms(ver_sq),
        yaw_rmse=_rms(datt[:, 2] ** 2),
        p95=p95,
        t=est.t.copy(),
        position_error=dp,
        velocity_error=dv,
        attitude_error=datt,
    )

