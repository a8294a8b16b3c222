from .trajectory import ImuErrorSpec, NavSeries, ProfileSpec, TrajectoryLog, corrupt_gnss, derive_bounds, gen_synthetic
from .metrics import MetricsReport, compute_metrics
from .experiment import ExperimentSpec, RunResult, Scenario, Variant, run_variant
