from .nav_core import (
    GRAVITY,
    GimbalLockError,
    GnssFix,
    ImuSample,
    NavState,
    NoiseSpec,
    from_state_vector,
    process_noise,
    propagate_nominal,
    state_error,
    state_transition,
    to_state_covariance,
    to_state_vector,
)
from .eskf import FilterConfig, FilterState, correct_nominal, gnss_update, initial_state, predict
from .qp_solver import InfeasibleProjectionError, QpProblem, QpSolution, QpStatus, project_state, solve
from .constraint_branch import (
    BranchEstimate,
    BranchId,
    ConstraintSet,
    EnvelopeBounds,
    build_static_constraints,
    build_velocity_constraint_gain,
    build_velocity_constraint_qp,
    constrained_gain_update,
    inequality_branch_step,
    nhc_branch_step,
    nhc_update,
)
from .fusion import FusedEstimate, LambdaVector, fuse
