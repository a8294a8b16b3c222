"""
Experiment orchestration: filter variants, GNSS outage protocol, result
files and multi-seed sweeps.

Variants:
    - EKF: predict + GNSS position updates.
    - NHCEKF: EKF plus the non-holonomic pseudo-measurement every epoch.
    - INQEKF: inequality branch (projection without GNSS, constrained gain with GNSS).
    - DUAL: NHCEKF and INQEKF run side by side, fused every epoch.

Scenarios:
    - full-gnss: fixes over the whole log, metrics over the whole log.
    - gnss-denied: fixes during the initialization window only, the run ends
      with the outage and metrics cover the outage window.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
import json
import logging
import multiprocessing as mp
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from DualBranchINS.constraint_branch import (
    INIT_V_MAX,
    BranchEstimate,
    BranchId,
    EnvelopeBounds,
    inequality_branch_step,
    nhc_branch_step,
)
from DualBranchINS.eskf import (
    INIT_GNSS_STD,
    INIT_NHC_STD,
    FilterConfig,
    FilterState,
    gnss_update,
    initial_state,
    predict,
)
from DualBranchINS.fusion import WEIGHTING_MODES, LambdaVector, fuse
from DualBranchINS.nav_core import SLOT_LABELS, NavState, NoiseSpec

from .metrics import METRIC_NAMES, P95_NAMES, MetricsReport, compute_metrics
from .trajectory import (
    ALTITUDE_MODES,
    INIT_BOUNDS_SCALE,
    MIN_GNSS_SIGMA,
    ImuErrorSpec,
    NavSeries,
    TrajectoryLog,
    corrupt_gnss,
    derive_bounds,
    gen_synthetic,
)

logger = logging.getLogger(__name__)

RESULTS_SCHEMA = 1

INIT_GNSS_RATE = 1.0
INIT_INIT_S = 60.0
INIT_OUTAGE_S = 30.0
INIT_SEED = 7
INIT_N_SEEDS = 3
INIT_ACCEL_BIAS = 0.05
INIT_GYRO_BIAS = 2e-4
INIT_ACCEL_DENSITY = 0.005
INIT_GYRO_DENSITY = 5e-4

# bounded slots first, then the rest in StateVector15 order
WEIGHT_COLUMN_SLOTS = ("h", "vd", "roll", "pitch") + tuple(
    s for s in SLOT_LABELS if s not in ("h", "vd", "roll", "pitch"))
ERROR_COLUMNS = ("err_n", "err_e", "err_d", "err_vn", "err_ve", "err_vd", "err_roll", "err_pitch")


class Scenario(str, Enum):
    FULL_GNSS = "full-gnss"
    GNSS_DENIED = "gnss-denied"


class Variant(str, Enum):
    EKF = "EKF"
    NHCEKF = "NHCEKF"
    INQEKF = "INQEKF"
    DUAL = "DUAL"


@dataclass(frozen=True)
class ExperimentSpec:
    """
    One filter run on one log.

    Args:
        scenario: "full-gnss" or "gnss-denied".
        variant: EKF, NHCEKF, INQEKF or DUAL.
        gnss_noise_std: White noise added to truth positions (m).
        gnss_rate: GNSS fix rate (Hz).
        init_s: Initialization window with GNSS in the denied scenario (s).
        outage_s: Outage length in the denied scenario (s).
        bounds_scale: Envelope = scale x truth extrema.
        v_max: Forward speed cap (m/s).
        seed: Seed of the GNSS noise.
        altitude_bounds: "relative" to the start or "absolute".
        weighting: Fusion weight form, "normalized" or "literal".
        phi_mode: Transition matrix, "exact" or "first-order".
        nhc_std: Standard deviation of the NHC pseudo-measurement (m/s).
        noise: IMU noise densities assumed by the filter.
    """
    scenario: Scenario = Scenario.FULL_GNSS
    variant: Variant = Variant.DUAL
    gnss_noise_std: float = INIT_GNSS_STD
    gnss_rate: float = INIT_GNSS_RATE
    init_s: float = INIT_INIT_S
    outage_s: float = INIT_OUTAGE_S
    bounds_scale: float = INIT_BOUNDS_SCALE
    v_max: float = INIT_V_MAX
    seed: int = INIT_SEED
    altitude_bounds: str = "relative"
    weighting: str = "normalized"
    phi_mode: str = "exact"
    nhc_std: float = INIT_NHC_STD
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self):
        object.__setattr__(self, "scenario", Scenario(self.scenario))
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.gnss_noise_std < 0.0:
            raise ValueError(f"gnss_noise_std must be non-negative, got {self.gnss_noise_std}")
        for name in ("gnss_rate", "init_s", "outage_s", "bounds_scale", "v_max", "nhc_std"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.altitude_bounds not in ALTITUDE_MODES:
            raise ValueError(f"altitude_bounds must be one of {ALTITUDE_MODES}")
        if self.weighting not in WEIGHTING_MODES:
            raise ValueError(f"weighting must be one of {WEIGHTING_MODES}")

    def validate_for(self, duration: float) -> None:
        if self.scenario is Scenario.GNSS_DENIED and duration + 1e-9 < self.init_s + self.outage_s:
            raise ValueError(
                f"gnss-denied needs {self.init_s + self.outage_s:.1f} s of log, got {duration:.1f} s")

    @property
    def denied(self) -> bool:
        return self.scenario is Scenario.GNSS_DENIED

    def to_dict(self) -> Dict[str, object]:
        out = asdict(self)
        out["scenario"] = self.scenario.value
        out["variant"] = self.variant.value
        return out


def filter_config_for(spec: ExperimentSpec, imu_rate: float) -> FilterConfig:
    sigma = max(spec.gnss_noise_std, MIN_GNSS_SIGMA)
    return FilterConfig(
        q_spec=spec.noise,
        r_gnss=np.eye(3) * sigma ** 2,
        phi_mode=spec.phi_mode,
        r_nhc=np.eye(2) * spec.nhc_std ** 2,
        gnss_time_tolerance=0.5 / imu_rate if imu_rate > 0.0 else 0.0,
    )


@dataclass(frozen=True, eq=False)
class RunResult:
    """
    Output of one run. For DUAL, ``branches`` and ``branch_metrics`` also
    hold the NHC and INQ branch estimates, which are exactly what NHCEKF and
    INQEKF produce on the same log.
    """
    spec: ExperimentSpec
    estimates: NavSeries
    metrics: MetricsReport
    window: Tuple[float, float]
    fallbacks: Dict[str, int]
    consumed_fix_times: Tuple[float, ...]
    weights: Optional[np.ndarray] = None
    log_name: str = ""
    branches: Dict[str, NavSeries] = field(default_factory=dict)
    branch_metrics: Dict[str, MetricsReport] = field(default_factory=dict)


def _series(t: List[float], states: List[NavState]) -> NavSeries:
    return NavSeries(
        t=np.asarray(t),
        p_ned=np.array([s.p_ned for s in states]),
        v_ned=np.array([s.v_ned for s in states]),
        euler=np.array([s.euler for s in states]),
    )


def run_variant(
        log: TrajectoryLog,
        spec: ExperimentSpec,
        cfg: Optional[FilterConfig] = None,
        bounds: Optional[EnvelopeBounds] = None,
    ) -> RunResult:
    """
    Runs one variant epoch by epoch from the truth state at the first epoch.

    GNSS fixes are applied at the IMU epoch they were sampled at. In the
    denied scenario fixes stop at ``init_s`` and the run stops at
    ``init_s + outage_s``; DUAL switches to the denied lambda at the outage
    onset.
    """
    if log.truth is None:
        raise ValueError(f"log {log.meta.name!r} has no truth, cannot evaluate a run")
    spec.validate_for(log.meta.duration)
    cfg = cfg or filter_config_for(spec, log.meta.imu_rate)
    bounds = bounds or derive_bounds(
        log.truth, spec.bounds_scale, spec.v_max, spec.altitude_bounds)

    truth = log.truth
    fixes = corrupt_gnss(truth, spec.gnss_noise_std, spec.gnss_rate, spec.seed)
    fix_at = {int(np.argmin(np.abs(truth.t - fix.t))): fix for fix in fixes}

    t0 = truth.t[0]
    end = t0 + spec.init_s + spec.outage_s if spec.denied else truth.t[-1]
    outage_start = t0 + spec.init_s
    n_epochs = int(np.searchsorted(truth.t, end + 1e-9, side="right"))

    start = NavState.from_euler(truth.p_ned[0], truth.v_ned[0], truth.euler[0])
    nhc_fs = inq_fs = ekf_fs = initial_state(start, t0, cfg)
    full_lam, denied_lam = LambdaVector.full_gnss(), LambdaVector.gnss_denied()

    variant = spec.variant
    times: List[float] = [t0]
    states: List[NavState] = [start]
    weights: List[np.ndarray] = []
    consumed: List[float] = []
    branch_states: Dict[str, List[NavState]] = {}
    if variant is Variant.DUAL:
        weights.append(_fuse(nhc_fs, inq_fs, full_lam, spec.weighting)[1])
        branch_states = {BranchId.NHC.value: [start], BranchId.INQ.value: [start]}

    logger.info(
        "running %s/%s on %s (%d epochs)", variant.value, spec.scenario.value, log.meta.name, n_epochs)

    for k in range(1, n_epochs):
        imu = log.imu[k]
        fix = fix_at.get(k)
        if fix is not None and spec.denied and fix.t >= outage_start - 1e-9:
            fix = None
        if fix is not None:
            consumed.append(fix.t)

        if variant is Variant.EKF:
            ekf_fs = predict(ekf_fs, imu, cfg)
            if fix is not None:
                ekf_fs = gnss_update(ekf_fs, fix, cfg)
            state = ekf_fs.nominal
        elif variant is Variant.NHCEKF:
            nhc_fs = nhc_branch_step(nhc_fs, imu, fix, cfg)
            state = nhc_fs.nominal
        elif variant is Variant.INQEKF:
            inq_fs = inequality_branch_step(inq_fs, imu, fix, bounds, cfg)
            state = inq_fs.nominal
        else:
            nhc_fs = nhc_branch_step(nhc_fs, imu, fix, cfg)
            inq_fs = inequality_branch_step(inq_fs, imu, fix, bounds, cfg)
            lam = denied_lam if spec.denied and imu.t >= outage_start - 1e-9 else full_lam
            state, w_inq = _fuse(nhc_fs, inq_fs, lam, spec.weighting)
            weights.append(w_inq)
            branch_states[BranchId.NHC.value].append(nhc_fs.nominal)
            branch_states[BranchId.INQ.value].append(inq_fs.nominal)

        times.append(imu.t)
        states.append(state)

    if spec.denied:
        # outage discipline: nothing sampled inside or after the outage may be used
        assert all(t < outage_start for t in consumed), "GNSS fix consumed during the outage"

    estimates = _series(times, states)
    truth_run = truth.slice(np.arange(len(truth)) < n_epochs)
    if spec.denied:
        window_mask = estimates.t >= outage_start - 1e-9
        window = (float(outage_start), float(estimates.t[-1]))
    else:
        window_mask = np.ones(len(estimates), dtype=bool)
        window = (float(estimates.t[0]), float(estimates.t[-1]))
    metrics = compute_metrics(estimates.slice(window_mask), truth_run.slice(window_mask))
    branches = {name: _series(times, s) for name, s in branch_states.items()}
    branch_metrics = {
        name: compute_metrics(series.slice(window_mask), truth_run.slice(window_mask))
        for name, series in branches.items()
    }

    fallbacks = {}
    if variant in (Variant.INQEKF, Variant.DUAL):
        fallbacks[BranchId.INQ.value] = inq_fs.fallbacks
    if variant in (Variant.NHCEKF, Variant.DUAL):
        fallbacks[BranchId.NHC.value] = nhc_fs.fallbacks
    if variant is Variant.EKF:
        fallbacks["EKF"] = ekf_fs.fallbacks

    logger.info(
        "%s/%s done: PRMSE %.3f m, v-PRMSE %.3f m, fallbacks %s",
        variant.value, spec.scenario.value, metrics.prmse, metrics.v_prmse, fallbacks)

    return RunResult(
        spec=spec,
        estimates=estimates,
        metrics=metrics,
        window=window,
        fallbacks=fallbacks,
        consumed_fix_times=tuple(consumed),
        weights=np.array(weights) if weights else None,
        log_name=log.meta.name,
        branches=branches,
        branch_metrics=branch_metrics,
    )


def _fuse(nhc_fs: FilterState, inq_fs: FilterState, lam: LambdaVector, weighting: str):
    fused = fuse(
        BranchEstimate.from_filter(nhc_fs, BranchId.NHC),
        BranchEstimate.from_filter(inq_fs, BranchId.INQ),
        lam,
        weighting,
    )
    return fused.state, fused.w_inq


def results_document(result: RunResult) -> Dict[str, object]:
    document = {
        "schema": RESULTS_SCHEMA,
        "log": result.log_name,
        "config": result.spec.to_dict(),
        "window": list(result.window),
        "metrics": result.metrics.summary(),
        "fallbacks": dict(result.fallbacks),
        "gnss_fixes_used": len(result.consumed_fix_times),
    }
    if result.branch_metrics:
        document["branch_metrics"] = {
            name: report.summary() for name, report in result.branch_metrics.items()}
    return document


def dumps_json(document: Dict[str, object]) -> str:
    """Deterministic JSON text: sorted keys, fixed indentation, trailing newline."""
    return json.dumps(document, sort_keys=True, indent=2) + "\n"


def epoch_frame(result: RunResult, truth: NavSeries) -> pd.DataFrame:
    """Per-epoch errors over the whole run, with fusion weights for DUAL."""
    n = len(result.estimates)
    truth_run = truth.slice(np.arange(len(truth)) < n)
    report = compute_metrics(result.estimates, truth_run)
    columns = {
        "t": result.estimates.t,
        "err_n": report.position_error[:, 0],
        "err_e": report.position_error[:, 1],
        "err_d": report.position_error[:, 2],
        "err_vn": report.velocity_error[:, 0],
        "err_ve": report.velocity_error[:, 1],
        "err_vd": report.velocity_error[:, 2],
        "err_roll": report.attitude_error[:, 0],
        "err_pitch": report.attitude_error[:, 1],
    }
    if result.weights is not None:
        for slot in WEIGHT_COLUMN_SLOTS:
            columns[f"w_inq_{slot}"] = result.weights[:, SLOT_LABELS.index(slot)]
    return pd.DataFrame(columns)


# ---------------------------------------------------------------- sweeps

@dataclass(frozen=True)
class SweepTask:
    profile: str
    seed: int
    spec: ExperimentSpec
    duration: float
    rate: float
    imu_errors: ImuErrorSpec


def default_imu_errors() -> ImuErrorSpec:
    return ImuErrorSpec(
        accel_bias=(0.0, 0.0, INIT_ACCEL_BIAS),
        gyro_bias=(INIT_GYRO_BIAS,) * 3,
        accel_density=INIT_ACCEL_DENSITY,
        gyro_density=INIT_GYRO_DENSITY,
    )


def run_sweep_task(task: SweepTask) -> Dict[str, object]:
    """Generates the log of one (profile, seed) and runs one experiment on it."""
    log = gen_synthetic(task.profile, task.duration, task.rate, task.imu_errors, task.seed)
    result = run_variant(log, task.spec)
    return {
        "profile": task.profile,
        "seed": task.seed,
        "scenario": task.spec.scenario.value,
        "variant": task.spec.variant.value,
        "metrics": result.metrics.summary(),
        "fallbacks": dict(result.fallbacks),
        "branch_metrics": {
            name: report.summary() for name, report in result.branch_metrics.items()},
    }


def sweep_tasks(
        profiles: Sequence[str],
        seeds: Sequence[int],
        base: ExperimentSpec,
        duration: float,
        rate: float,
        imu_errors: ImuErrorSpec,
        scenarios: Sequence[Scenario] = tuple(Scenario),
        variants: Sequence[Variant] = tuple(Variant),
    ) -> List[SweepTask]:
    return [
        SweepTask(profile, seed, replace(base, scenario=scenario, variant=variant, seed=seed),
                  duration, rate, imu_errors)
        for profile in profiles
        for seed in seeds
        for scenario in scenarios
        for variant in variants
    ]


def run_sweep(tasks: Sequence[SweepTask], jobs: int = 1, progress: bool = False) -> List[Dict[str, object]]:
    """
    Runs independent tasks, optionally in ``jobs`` spawned processes. The
    returned rows are sorted, so the output does not depend on completion order.
    """
    rows: List[Dict[str, object]] = []
    bar = tqdm(total=len(tasks), desc="sweep", unit="run", disable=not progress)
    if jobs <= 1:
        for task in tasks:
            rows.append(run_sweep_task(task))
            bar.update(1)
    else:
        context = mp.get_context("spawn")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=context) as pool:
            futures = [pool.submit(run_sweep_task, task) for task in tasks]
            for future in as_completed(futures):
                rows.append(future.result())
                bar.update(1)
    bar.close()

    variant_order = {v.value: i for i, v in enumerate(Variant)}
    rows.sort(key=lambda r: (r["profile"], r["scenario"], variant_order[r["variant"]], r["seed"]))
    return rows


def _metric_vector(row: Dict[str, object]) -> Dict[str, float]:
    metrics = row["metrics"]
    out = {name: float(metrics[name]) for name in METRIC_NAMES}
    for name in P95_NAMES:
        out[f"p95_{name}"] = float(metrics["p95"][name])
    return out


def aggregate_sweep(rows: Sequence[Dict[str, object]]) -> List[Dict[str, object]]:
    """
    Seed-averaged table rows per (profile, scenario, variant), plus an
    ``all`` profile averaging over profiles when more than one was swept.
    """
    groups: Dict[Tuple[str, str, str], List[Dict[str, float]]] = {}
    fallback_totals: Dict[Tuple[str, str, str], int] = {}
    for row in rows:
        key = (row["profile"], row["scenario"], row["variant"])
        groups.setdefault(key, []).append(_metric_vector(row))
        fallback_totals[key] = fallback_totals.get(key, 0) + sum(row["fallbacks"].values())

    table = []
    for key in sorted(groups, key=_table_order):
        frame = pd.DataFrame(groups[key])
        entry = {"profile": key[0], "scenario": key[1], "variant": key[2], "runs": len(frame),
                 "fallbacks": fallback_totals[key]}
        entry.update({name: float(value) for name, value in frame.mean().items()})
        table.append(entry)

    profiles = sorted({key[0] for key in groups})
    if len(profiles) > 1:
        frame = pd.DataFrame(table)
        metric_columns = [c for c in frame.columns if c not in ("profile", "scenario", "variant", "runs", "fallbacks")]
        summary = frame.groupby(["scenario", "variant"], sort=False)
        for (scenario, variant), group in summary:
            entry = {"profile": "all", "scenario": scenario, "variant": variant,
                     "runs": int(group["runs"].sum()), "fallbacks": int(group["fallbacks"].sum())}
            entry.update({name: float(group[name].mean()) for name in metric_columns})
            table.append(entry)
        table.sort(key=lambda e: _table_order((e["profile"], e["scenario"], e["variant"])))
    return table


def _table_order(key: Tuple[str, str, str]):
    profile, scenario, variant = key
    variant_order = [v.value for v in Variant]
    scenario_order = [s.value for s in Scenario]
    return (profile == "all", profile, scenario_order.index(scenario), variant_order.index(variant))


def improvement_table(table: Sequence[Dict[str, object]]) -> List[Dict[str, object]]:
    """
    Relative improvement of DUAL over each other variant,
    ``100 * (other - dual) / other`` per metric (positive = DUAL better).
    """
    by_key = {(e["profile"], e["scenario"], e["variant"]): e for e in table}
    metrics = [c for c in METRIC_NAMES] + [f"p95_{n}" for n in P95_NAMES]
    out = []
    for (profile, scenario, variant), entry in by_key.items():
        if variant == Variant.DUAL.value:
            continue
        dual = by_key.get((profile, scenario, Variant.DUAL.value))
        if dual is None:
            continue
        row = {"profile": profile, "scenario": scenario, "baseline": variant}
        for name in metrics:
            other = float(entry[name])
            row[name] = 100.0 * (other - float(dual[name])) / other if other > 0.0 else 0.0
        out.append(row)
    out.sort(key=lambda e: _table_order((e["profile"], e["scenario"], e["baseline"])))
    return out


def sweep_document(
        rows: Sequence[Dict[str, object]],
        base: ExperimentSpec,
        profiles: Sequence[str],
        seeds: Sequence[int],
        duration: float,
        rate: float,
        imu_errors: ImuErrorSpec,
    ) -> Dict[str, object]:
    table = aggregate_sweep(rows)
    config = base.to_dict()
    config.pop("scenario")
    config.pop("variant")
    config.pop("seed")
    return {
        "schema": RESULTS_SCHEMA,
        "config": config,
        "profiles": list(profiles),
        "seeds": [int(s) for s in seeds],
        "duration": duration,
        "rate": rate,
        "imu_errors": asdict(imu_errors),
        "runs": list(rows),
        "table": table,
        "improvement": improvement_table(table),
    }


def format_table(table: Sequence[Dict[str, object]], improvement: Sequence[Dict[str, object]]) -> str:
    """Plain-text comparison table for the terminal."""
    metric_cols = list(METRIC_NAMES) + ["p95_position", "p95_vertical"]
    frame = pd.DataFrame(table)[["profile", "scenario", "variant"] + metric_cols]
    text = frame.to_string(index=False, float_format=lambda v: f"{v:8.3f}")
    if improvement:
        imp = pd.DataFrame(improvement)[["profile", "scenario", "baseline"] + metric_cols]
        text += "\n\nDUAL improvement over baseline (%)\n"
        text += imp.to_string(index=False, float_format=lambda v: f"{v:7.1f}")
    return text
