"""Test helpers: random states and a brute-force QP reference."""

from itertools import combinations

import numpy as np

from DualBranchINS.nav_core import NavState


def enumerate_qp(Hq, g, A, b, feas_tol=1e-9):
    """
    Minimizer of ``1/2 x^T Hq x + g^T x`` s.t. ``A x <= b`` for a strictly
    convex objective: the best feasible point among the equality-constrained
    minimizers of all row subsets.
    """
    n = g.size
    best_x, best_f = None, np.inf
    rows = range(A.shape[0])
    for size in range(0, min(len(rows), n) + 1):
        for subset in combinations(rows, size):
            idx = list(subset)
            N = A[idx]
            kkt = np.zeros((n + size, n + size))
            kkt[:n, :n] = Hq
            kkt[:n, n:] = N.T
            kkt[n:, :n] = N
            rhs = np.concatenate((-g, b[idx]))
            try:
                x = np.linalg.solve(kkt, rhs)[:n]
            except np.linalg.LinAlgError:
                continue
            if np.all(A @ x <= b + feas_tol):
                f = 0.5 * x @ Hq @ x + g @ x
                if f < best_f:
                    best_x, best_f = x, f
    return best_x


def random_state(rng, max_angle=0.6):
    return NavState.from_euler(
        p_ned=rng.normal(0.0, 50.0, 3),
        v_ned=rng.normal(0.0, 5.0, 3),
        euler=rng.uniform(-max_angle, max_angle, 3),
        b_a=rng.normal(0.0, 0.05, 3),
        b_g=rng.normal(0.0, 1e-3, 3),
    )


def random_spd(rng, n=15, scale=1.0):
    A = rng.normal(size=(n, n))
    return scale * (A @ A.T / n + 0.1 * np.eye(n))
