"""
Canonical CSV log format and the converter for external exports.

Header: ``t,fx,fy,fz,wx,wy,wz[,gt_n,gt_e,gt_d,gt_vn,gt_ve,gt_vd,gt_roll,gt_pitch,gt_yaw]``,
SI units, one row per IMU epoch. Truth columns are all-or-nothing, except that
truth velocity may be missing in an input file; it is then derived from the
truth positions by central differences.
"""

from __future__ import annotations

import io
import logging
import os
from typing import Dict, Iterable, Mapping, Optional, TextIO, Union

import numpy as np
import pandas as pd

from DualBranchINS.nav_core import ImuSample

from .trajectory import LogMeta, NavSeries, TrajectoryLog

logger = logging.getLogger(__name__)

IMU_COLUMNS = ("t", "fx", "fy", "fz", "wx", "wy", "wz")
TRUTH_POSITION_COLUMNS = ("gt_n", "gt_e", "gt_d")
TRUTH_VELOCITY_COLUMNS = ("gt_vn", "gt_ve", "gt_vd")
TRUTH_ATTITUDE_COLUMNS = ("gt_roll", "gt_pitch", "gt_yaw")
TRUTH_COLUMNS = TRUTH_POSITION_COLUMNS + TRUTH_VELOCITY_COLUMNS + TRUTH_ATTITUDE_COLUMNS
ANGLE_COLUMNS = ("wx", "wy", "wz") + TRUTH_ATTITUDE_COLUMNS

# common names found in OXTS / UrbanNav style exports
COLUMN_ALIASES: Dict[str, str] = {
    "time": "t", "timestamp": "t", "time_s": "t", "sec": "t",
    "ax": "fx", "ay": "fy", "az": "fz",
    "acc_x": "fx", "acc_y": "fy", "acc_z": "fz",
    "accel_x": "fx", "accel_y": "fy", "accel_z": "fz",
    "gx": "wx", "gy": "wy", "gz": "wz",
    "gyro_x": "wx", "gyro_y": "wy", "gyro_z": "wz",
    "wf": "wx", "wl": "wy", "wu": "wz",
    "north": "gt_n", "east": "gt_e", "down": "gt_d",
    "pn": "gt_n", "pe": "gt_e", "pd": "gt_d",
    "vn": "gt_vn", "ve": "gt_ve", "vd": "gt_vd",
    "roll": "gt_roll", "pitch": "gt_pitch", "yaw": "gt_yaw",
    "heading": "gt_yaw",
}

PathOrBuffer = Union[str, os.PathLike, TextIO]


def log_to_frame(log: TrajectoryLog) -> pd.DataFrame:
    t, f, w = log.imu_arrays()
    frame = pd.DataFrame(np.column_stack((t, f, w)), columns=list(IMU_COLUMNS))
    if log.truth is not None:
        truth = np.column_stack((log.truth.p_ned, log.truth.v_ned, log.truth.euler))
        frame = pd.concat([frame, pd.DataFrame(truth, columns=list(TRUTH_COLUMNS))], axis=1)
    return frame


def frame_to_log(frame: pd.DataFrame, name: str = "log") -> TrajectoryLog:
    """Builds a log from a frame that already uses canonical column names."""
    missing = [c for c in IMU_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"log is missing required columns: {', '.join(missing)}")
    if frame.empty:
        raise ValueError("log has no rows")

    data = frame.astype(np.float64)
    if not np.all(np.isfinite(data[list(IMU_COLUMNS)].to_numpy())):
        raise ValueError("IMU columns contain non-finite values")

    t = data["t"].to_numpy()
    imu = tuple(
        ImuSample(row[0], row[1:4], row[4:7])
        for row in data[list(IMU_COLUMNS)].to_numpy()
    )

    truth = None
    present = [c for c in TRUTH_COLUMNS if c in data.columns]
    if present:
        needed = TRUTH_POSITION_COLUMNS + TRUTH_ATTITUDE_COLUMNS
        absent = [c for c in needed if c not in data.columns]
        if absent:
            raise ValueError(f"truth columns are incomplete, missing: {', '.join(absent)}")
        p_ned = data[list(TRUTH_POSITION_COLUMNS)].to_numpy()
        if all(c in data.columns for c in TRUTH_VELOCITY_COLUMNS):
            v_ned = data[list(TRUTH_VELOCITY_COLUMNS)].to_numpy()
        else:
            v_ned = differentiate_positions(t, p_ned)
            logger.info("truth velocity derived from positions by central differences")
        truth = NavSeries(t, p_ned, v_ned, data[list(TRUTH_ATTITUDE_COLUMNS)].to_numpy())

    rate = 1.0 / float(np.median(np.diff(t))) if t.size > 1 else 0.0
    return TrajectoryLog(imu=imu, truth=truth, meta=LogMeta(name, rate, float(t[-1] - t[0])))


def differentiate_positions(t: np.ndarray, p_ned: np.ndarray) -> np.ndarray:
    """Velocity from positions: central differences inside, one-sided at the ends."""
    if t.size < 2:
        return np.zeros_like(p_ned)
    return np.gradient(p_ned, t, axis=0)


def write_log(log: TrajectoryLog, target: PathOrBuffer) -> None:
    """Writes the canonical CSV; floats use shortest round-trip repr."""
    log_to_frame(log).to_csv(target, index=False, lineterminator="\n")


def read_log(source: PathOrBuffer, name: Optional[str] = None) -> TrajectoryLog:
    if name is None:
        name = os.path.splitext(os.path.basename(os.fspath(source)))[0] if not hasattr(source, "read") else "log"
    frame = pd.read_csv(source, float_precision="round_trip")
    unknown = [c for c in frame.columns if c not in IMU_COLUMNS + TRUTH_COLUMNS]
    if unknown:
        raise ValueError(f"not a canonical log, unexpected columns: {', '.join(unknown)}")
    return frame_to_log(frame, name)


def dump_log(log: TrajectoryLog) -> str:
    buffer = io.StringIO()
    write_log(log, buffer)
    return buffer.getvalue()


def _normalize_name(column: str) -> str:
    return column.strip().lower().replace(" ", "_")


def convert_csv(
        source: PathOrBuffer,
        column_map: Optional[Mapping[str, str]] = None,
        degrees: bool = False,
        name: Optional[str] = None,
        drop_columns: Iterable[str] = (),
    ) -> TrajectoryLog:
    """
    Ingests an external CSV into a canonical log.

    Args:
        source: Path or text buffer of the external CSV.
        column_map: Explicit ``source -> canonical`` renames, applied before
            the built-in aliases.
        degrees: Angular rates and truth angles are in degrees.
        name: Log name. Defaults to the file stem.
        drop_columns: Columns to ignore.

    Notes:
        Columns that map to nothing canonical are dropped with a warning.
    """
    if name is None:
        name = os.path.splitext(os.path.basename(os.fspath(source)))[0] if not hasattr(source, "read") else "converted"
    frame = pd.read_csv(source, float_precision="round_trip")
    frame = frame.drop(columns=[c for c in drop_columns if c in frame.columns])

    explicit = {k: v for k, v in (column_map or {}).items()}
    bad_targets = [v for v in explicit.values() if v not in IMU_COLUMNS + TRUTH_COLUMNS]
    if bad_targets:
        raise ValueError(f"unknown canonical column(s): {', '.join(bad_targets)}")

    renames = {}
    for column in frame.columns:
        if column in explicit:
            renames[column] = explicit[column]
            continue
        key = _normalize_name(column)
        if key in IMU_COLUMNS + TRUTH_COLUMNS:
            renames[column] = key
        elif key in COLUMN_ALIASES:
            renames[column] = COLUMN_ALIASES[key]
    frame = frame.rename(columns=renames)

    ignored = [c for c in frame.columns if c not in IMU_COLUMNS + TRUTH_COLUMNS]
    if ignored:
        logger.warning("ignoring columns without a canonical meaning: %s", ", ".join(map(str, ignored)))
        frame = frame.drop(columns=ignored)
    if frame.columns.duplicated().any():
        dupes = sorted(set(frame.columns[frame.columns.duplicated()]))
        raise ValueError(f"several input columns map to: {', '.join(dupes)}")

    if degrees:
        for column in ANGLE_COLUMNS:
            if column in frame.columns:
                frame[column] = np.radians(frame[column].astype(np.float64))

    ordered = [c for c in IMU_COLUMNS + TRUTH_COLUMNS if c in frame.columns]
    return frame_to_log(frame[ordered], name)
