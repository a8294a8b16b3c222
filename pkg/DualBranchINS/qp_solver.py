"""
Small dense quadratic programming.

Solves

    minimize    1/2 x^T Hq x + g^T x
    subject to  A_ineq x <= b_ineq,   A_eq x = b_eq

with an active-set method sized for a few dozen variables and about ten
inequality rows: the iteration starts from the (equality constrained)
unconstrained minimizer, repeatedly adds the most violated row and resolves
the KKT system along the way, dropping rows whose multipliers would turn
negative. The same routine backs the weighted state projection used by the
inequality branch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
import logging
from typing import TYPE_CHECKING, List, Optional, Tuple

import numpy as np
from numpy.typing import NDArray

if TYPE_CHECKING:
    from .constraint_branch import ConstraintSet

logger = logging.getLogger(__name__)

INIT_TOL = 1e-8
INIT_MAX_ITER = 50
HESSIAN_REGULARIZATION = 1e-10
PROJECTION_REGULARIZATION = 1e-9
DEPENDENCY_RTOL = 1e-12


class QpStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max-iter"


class InfeasibleProjectionError(ValueError):
    """The constraint set admits no state (e.g. a lower bound above an upper bound)."""


def _as_matrix(value, rows: Optional[int], cols: int, name: str) -> NDArray[np.float64]:
    if value is None:
        return np.zeros((0, cols))
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 1 and arr.size == cols:
        arr = arr.reshape(1, cols)
    if arr.ndim != 2 or arr.shape[1] != cols or (rows is not None and arr.shape[0] != rows):
        raise ValueError(f"{name} has inconsistent shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class QpProblem:
    Hq: NDArray[np.float64]
    g: NDArray[np.float64]
    A_ineq: Optional[NDArray[np.float64]] = None
    b_ineq: Optional[NDArray[np.float64]] = None
    A_eq: Optional[NDArray[np.float64]] = None
    b_eq: Optional[NDArray[np.float64]] = None

    def __post_init__(self):
        g = np.array(self.g, dtype=np.float64).reshape(-1)
        n = g.size
        Hq = np.array(self.Hq, dtype=np.float64)
        if Hq.shape != (n, n):
            raise ValueError(f"Hq must be {n}x{n}, got shape {Hq.shape}")
        if np.max(np.abs(Hq - Hq.T), initial=0.0) > 1e-10 * max(1.0, np.max(np.abs(Hq), initial=0.0)):
            raise ValueError("Hq must be symmetric")
        A = _as_matrix(self.A_ineq, None, n, "A_ineq")
        b = np.zeros(0) if self.b_ineq is None else np.array(self.b_ineq, dtype=np.float64).reshape(-1)
        if b.size != A.shape[0]:
            raise ValueError(f"b_ineq has {b.size} entries for {A.shape[0]} rows")
        if np.any(np.isnan(b)):
            raise ValueError("b_ineq contains NaN")
        E = _as_matrix(self.A_eq, None, n, "A_eq")
        e = np.zeros(0) if self.b_eq is None else np.array(self.b_eq, dtype=np.float64).reshape(-1)
        if e.size != E.shape[0]:
            raise ValueError(f"b_eq has {e.size} entries for {E.shape[0]} rows")
        for name, value in (("Hq", Hq), ("g", g), ("A_ineq", A), ("A_eq", E), ("b_eq", e)):
            if not np.all(np.isfinite(value)):
                raise ValueError(f"{name} must be finite")
        object.__setattr__(self, "Hq", 0.5 * (Hq + Hq.T))
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "A_ineq", A)
        object.__setattr__(self, "b_ineq", b)
        object.__setattr__(self, "A_eq", E)
        object.__setattr__(self, "b_eq", e)

    @property
    def n(self) -> int:
        return self.g.size

    def objective(self, x: NDArray[np.float64]) -> float:
        return float(0.5 * x @ self.Hq @ x + self.g @ x)


@dataclass(frozen=True, eq=False)
class QpSolution:
    x: NDArray[np.float64]
    active_set: Tuple[int, ...]
    status: QpStatus
    multipliers: NDArray[np.float64] = field(default_factory=lambda: np.zeros(0))
    iterations: int = 0

    @property
    def ok(self) -> bool:
        return self.status is QpStatus.OPTIMAL


def _regularized_hessian(Hq: NDArray[np.float64]) -> NDArray[np.float64]:
    try:
        np.linalg.cholesky(Hq)
        return Hq
    except np.linalg.LinAlgError:
        logger.debug("QP Hessian is singular, adding %.0e*I", HESSIAN_REGULARIZATION)
        return Hq + HESSIAN_REGULARIZATION * np.eye(Hq.shape[0])


def _kkt_solve(
        H: NDArray[np.float64],
        N: NDArray[np.float64],
        top: NDArray[np.float64],
        bottom: NDArray[np.float64],
    ) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Solves ``[[H, N^T], [N, 0]] [x; lam] = [top; bottom]``."""
    n = H.shape[0]
    m = N.shape[0]
    if m == 0:
        return np.linalg.solve(H, top), np.zeros(0)
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = H
    kkt[:n, n:] = N.T
    kkt[n:, :n] = N
    rhs = np.concatenate((top, bottom))
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def solve(
        problem: QpProblem,
        tol: float = INIT_TOL,
        max_iter: int = INIT_MAX_ITER,
    ) -> QpSolution:
    """
    Active-set solution of a strictly convex QP.

    Ties between equally violated rows go to the lowest index. A singular
    ``Hq`` is regularized with ``1e-10 * I``.

    Returns:
        QpSolution with status ``optimal``, ``infeasible`` (no point satisfies
        the rows) or ``max-iter``.
    """
    H = _regularized_hessian(problem.Hq)
    g = problem.g
    A, b = problem.A_ineq, problem.b_ineq
    E, e = problem.A_eq, problem.b_eq
    n_eq = E.shape[0]
    n_rows = A.shape[0]

    x, _ = _kkt_solve(H, E, -g, e)
    multipliers = np.zeros(n_rows)
    active: List[int] = []
    iterations = 0
    h_scale = max(1.0, float(np.max(np.abs(np.diag(H)), initial=0.0)))

    def _solution(status: QpStatus) -> QpSolution:
        return QpSolution(
            x=x,
            active_set=tuple(sorted(active)),
            status=status,
            multipliers=multipliers.copy(),
            iterations=iterations,
        )

    while True:
        if n_rows == 0:
            return _solution(QpStatus.OPTIMAL)
        slack = A @ x - b
        slack[active] = -np.inf
        p = int(np.argmax(slack))
        if not slack[p] > tol:
            return _solution(QpStatus.OPTIMAL)

        a_p = A[p]
        u_p = 0.0
        while True:
            iterations += 1
            if iterations > max_iter:
                logger.debug("QP hit the iteration cap (%d)", max_iter)
                return _solution(QpStatus.MAX_ITER)

            N = np.vstack((E, A[active])) if active else E
            dz, dlam = _kkt_solve(H, N, -a_p, np.zeros(N.shape[0]))
            du = dlam[n_eq:]

            drop = None
            t_dual = np.inf
            for j, row in enumerate(active):
                if du[j] < 0.0:
                    ratio = -multipliers[row] / du[j]
                    if ratio < t_dual or (ratio == t_dual and row < drop):
                        t_dual, drop = ratio, row

            curvature = -float(a_p @ dz)
            if curvature <= DEPENDENCY_RTOL * float(a_p @ a_p) / h_scale:
                # a_p depends on the active rows: only a pure multiplier step is possible
                if drop is None:
                    logger.debug("QP row %d is inconsistent with active rows %s", p, active)
                    return _solution(QpStatus.INFEASIBLE)
                if active:
                    multipliers[active] += t_dual * du
                u_p += t_dual
                multipliers[drop] = 0.0
                active.remove(drop)
                continue

            t_primal = float(a_p @ x - b[p]) / curvature
            if t_primal <= t_dual:
                x = x + t_primal * dz
                if active:
                    multipliers[active] += t_primal * du
                multipliers[p] = u_p + t_primal
                active.append(p)
                break

            x = x + t_dual * dz
            multipliers[active] += t_dual * du
            u_p += t_dual
            multipliers[drop] = 0.0
            active.remove(drop)


def project_state(
        x_prior: NDArray[np.float64],
        P: NDArray[np.float64],
        cs: "ConstraintSet",
        tol: float = INIT_TOL,
        max_iter: int = INIT_MAX_ITER,
    ) -> NDArray[np.float64]:
    """
    Covariance-weighted projection of a StateVector15 onto ``C x <= d``.

    Minimizes ``(x - x_prior)^T Pt^-1 (x - x_prior)`` with
    ``Pt = P + 1e-9 * I``. The problem is solved in whitened coordinates
    ``x = x_prior + L z`` (``Pt = L L^T``) so the Hessian is the identity.

    Raises:
        InfeasibleProjectionError: if the rows cannot be satisfied together.
    """
    if not cs.is_state_space:
        raise ValueError("projection needs constraint rows over the StateVector15 layout")
    x0 = np.array(x_prior, dtype=np.float64).reshape(-1)
    C, d = cs.C, cs.d
    if x0.size != C.shape[1]:
        raise ValueError(f"x_prior has {x0.size} slots, constraints expect {C.shape[1]}")

    if np.all(C @ x0 <= d + tol):
        return x0

    P = np.asarray(P, dtype=np.float64)
    P_tilde = 0.5 * (P + P.T) + PROJECTION_REGULARIZATION * np.eye(x0.size)
    try:
        L = np.linalg.cholesky(P_tilde)
    except np.linalg.LinAlgError as exc:
        raise ValueError("projection covariance is not positive definite") from exc

    problem = QpProblem(
        Hq=np.eye(x0.size),
        g=np.zeros(x0.size),
        A_ineq=C @ L,
        b_ineq=d - C @ x0,
    )
    solution = solve(problem, tol=tol, max_iter=max_iter)
    if not solution.ok:
        raise InfeasibleProjectionError(
            f"projection failed with status {solution.status.value} "
            f"(rows {', '.join(cs.labels)})")
    return x0 + L @ solution.x
