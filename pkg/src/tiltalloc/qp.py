"""Dense convex QP solver: quadratic cost, linear equalities, box bounds.

Solves    min  0.5 z'Hz + c'z
          s.t. A z = b,   lb <= z <= ub

with a primal active-set method. Problems here are tiny (d <= ~12) and come
in long nearly-identical streams from the allocation loop, so the method is
chosen for exact termination and cheap warm starting rather than asymptotic
complexity. The working set only ever contains box constraints; a blocking
bound is always linearly independent of the current working rows, so the
reduced KKT systems stay nonsingular (H is shifted to be positive definite).

Multiplier convention: stationarity reads  Hz + c - A'lam - mu = 0, with
mu >= 0 on active lower bounds, mu <= 0 on active upper bounds, mu = 0 off
the bounds.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

__all__ = ["QpProblem", "QpSolution", "QpStatus", "solve_qp", "kkt_residuals"]

# shift added to H before factorization so PSD-but-singular costs stay solvable
H_SHIFT = 1e-10
# a phase-1 end point counts as equality-feasible below this residual
FEAS_TOL = 1e-8
STEP_TOL = 1e-11
MULT_TOL = 1e-9


class QpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max_iter"


@dataclass
class QpProblem:
    H: np.ndarray
    c: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    lb: np.ndarray
    ub: np.ndarray

    def validate(self) -> None:
        H = np.asarray(self.H, dtype=float)
        d = H.shape[0]
        if H.shape != (d, d):
            raise ValueError("H must be square")
        if np.max(np.abs(H - H.T)) > 1e-8 * (1.0 + np.max(np.abs(H))):
            raise ValueError("H must be symmetric")
        try:
            np.linalg.cholesky(H + (H_SHIFT + 1e-12 * max(1.0, np.trace(H) / d)) * np.eye(d))
        except np.linalg.LinAlgError:
            raise ValueError("H must be positive semidefinite") from None
        p = self.A_eq.shape[0] if self.A_eq.size else 0
        if p > d:
            raise ValueError("more equality rows than variables")
        if p and self.A_eq.shape != (p, d):
            raise ValueError("A_eq shape mismatch")
        if self.lb.shape != (d,) or self.ub.shape != (d,):
            raise ValueError("bounds shape mismatch")
        if np.any(self.lb > self.ub):
            raise ValueError("lb > ub")


@dataclass
class QpSolution:
    z: np.ndarray
    lambda_eq: np.ndarray
    mu_bounds: np.ndarray
    status: QpStatus
    iterations: int
    kkt_residual: float


def kkt_residuals(prob: QpProblem, sol: QpSolution) -> dict[str, float]:
    """Independent KKT check; does not reuse any solver state."""
    z, lam, mu = sol.z, sol.lambda_eq, sol.mu_bounds
    grad = prob.H @ z + prob.c
    if prob.A_eq.size:
        grad = grad - prob.A_eq.T @ lam
        eq = float(np.max(np.abs(prob.A_eq @ z - prob.b_eq)))
    else:
        eq = 0.0
    stationarity = float(np.max(np.abs(grad - mu)))
    box = float(max(np.max(prob.lb - z, initial=0.0), np.max(z - prob.ub, initial=0.0)))
    # mu sign must match the bound it rests on
    dual = 0.0
    comp = 0.0
    for i in range(len(z)):
        if mu[i] > 0.0:
            comp = max(comp, mu[i] * abs(z[i] - prob.lb[i]))
        elif mu[i] < 0.0:
            comp = max(comp, -mu[i] * abs(prob.ub[i] - z[i]))
        at_lb = z[i] - prob.lb[i] <= 1e-9 * (1.0 + abs(prob.lb[i]))
        at_ub = prob.ub[i] - z[i] <= 1e-9 * (1.0 + abs(prob.ub[i]))
        if not at_lb:
            dual = max(dual, mu[i])  # positive mu requires lower bound active
        if not at_ub:
            dual = max(dual, -mu[i])
    return {
        "stationarity": stationarity,
        "primal_eq": eq,
        "primal_box": box,
        "dual_sign": dual,
        "complementarity": comp,
    }


def _active_set(H, c, A, b, lb, ub, z, max_iter):
    """Core loop. z must be box-feasible and (if A is nonempty) satisfy A z ~= b.

    Returns (z, lam, w_state, iterations, converged).
    w_state[i]: 0 free, -1 fixed at lb, +1 fixed at ub.
    """
    d = len(z)
    p = A.shape[0] if A.size else 0
    w_state = np.zeros(d, dtype=np.int8)
    lam = np.zeros(p)
    it = 0
    while it < max_iter:
        it += 1
        free = np.flatnonzero(w_state == 0)
        nf = len(free)
        g = H @ z + c
        if nf == 0:
            p_f = np.zeros(0)
            lam = np.zeros(p)
        else:
            Hff = H[np.ix_(free, free)]
            if p:
                Af = A[:, free]
                K = np.zeros((nf + p, nf + p))
                K[:nf, :nf] = Hff
                K[:nf, nf:] = Af.T
                K[nf:, :nf] = Af
                rhs = np.empty(nf + p)
                rhs[:nf] = -g[free]
                rhs[nf:] = b - A @ z
                try:
                    sol = np.linalg.solve(K, rhs)
                except np.linalg.LinAlgError:
                    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
                p_f = sol[:nf]
                # block solve yields the negated multiplier of our convention
                lam = -sol[nf:]
            else:
                p_f = np.linalg.solve(Hff, -g[free])
                lam = np.zeros(0)

        if nf == 0 or np.max(np.abs(p_f)) <= STEP_TOL * max(1.0, np.max(np.abs(z))):
            # stationary on the working set: check bound multipliers
            mu_w = g - (A.T @ lam if p else 0.0)
            worst_i, worst_v = -1, MULT_TOL * max(1.0, np.max(np.abs(g)))
            for i in np.flatnonzero(w_state != 0):
                viol = -mu_w[i] if w_state[i] == -1 else mu_w[i]
                if viol > worst_v:
                    worst_i, worst_v = i, viol
            if worst_i < 0:
                return z, lam, w_state, it, True
            w_state[worst_i] = 0
            continue

        # step length to the nearest inactive bound (ties -> lowest index)
        alpha = 1.0
        block_i, block_side = -1, 0
        for k, i in enumerate(free):
            pi = p_f[k]
            if pi > STEP_TOL and np.isfinite(ub[i]):
                a = (ub[i] - z[i]) / pi
                side = 1
            elif pi < -STEP_TOL and np.isfinite(lb[i]):
                a = (lb[i] - z[i]) / pi
                side = -1
            else:
                continue
            a = max(a, 0.0)
            if a < alpha - 1e-15:
                alpha, block_i, block_side = a, i, side
        z = z.copy()
        if block_i >= 0:
            z[free] = z[free] + alpha * p_f
            z[block_i] = lb[block_i] if block_side == -1 else ub[block_i]
            w_state[block_i] = block_side
        else:
            # full step onto the EQP minimizer: optimality check next loop
            z[free] = z[free] + p_f
        z = np.minimum(np.maximum(z, lb), ub)
    return z, lam, w_state, it, False


def _independent_rows(A: np.ndarray) -> np.ndarray:
    """Indices of a maximal linearly independent subset of rows."""
    import scipy.linalg

    _, _, piv = scipy.linalg.qr(A.T, mode="economic", pivoting=True)
    rank = np.linalg.matrix_rank(A)
    return np.sort(piv[:rank])


def _restore_feasibility(A, b, lb, ub, z0, max_iter):
    """Find a box point with A z = b, or certify there is none.

    Tries the minimum-norm equality correction first (almost always lands
    inside the box for the allocation stream). The fallback is an elastic
    least-distance QP in (z, s+, s-): the slack split keeps the equality
    block full rank and the Hessian positive definite, so the active-set
    loop cannot stall, and the l1 slack penalty drives s to exactly zero
    whenever a feasible point exists.
    """
    d = len(z0)
    p = A.shape[0]
    r = b - A @ z0
    scale = max(1.0, float(np.max(np.abs(b))) if b.size else 1.0)
    if np.max(np.abs(r)) <= 1e-12 * scale:
        return z0, 0, True
    try:
        step = A.T @ np.linalg.solve(A @ A.T, r)
        z = z0 + step
        if np.all(z >= lb - 1e-12) and np.all(z <= ub + 1e-12):
            return np.minimum(np.maximum(z, lb), ub), 1, True
    except np.linalg.LinAlgError:
        pass

    # quadratic slack term keeps the Hessian well conditioned; the l1 part
    # still zeroes the slack exactly (bound at 0) once kappa beats the
    # equality multipliers, and the finite cap stops runaway slack steps
    H1 = np.eye(d + 2 * p)
    A1 = np.hstack([A, np.eye(p), -np.eye(p)])
    s_cap = 2.0 * float(np.max(np.abs(r))) + 1.0
    lb1 = np.concatenate([lb, np.zeros(2 * p)])
    ub1 = np.concatenate([ub, np.full(2 * p, s_cap)])
    zs = np.concatenate([z0, np.maximum(r, 0.0), np.maximum(-r, 0.0)])
    kappa = 100.0 * scale
    total = 0
    for _ in range(3):
        c1 = np.concatenate([-z0, np.full(2 * p, kappa)])
        zs, _, _, it, _ = _active_set(H1, c1, A1, b, lb1, ub1, zs, max_iter)
        total += it
        if np.max(zs[d:]) <= 0.5 * FEAS_TOL * scale:
            break
        kappa *= 100.0
    z = zs[:d]
    feasible = bool(np.max(np.abs(A @ z - b)) <= FEAS_TOL * scale)
    return z, total, feasible


def solve_qp(
    prob: QpProblem,
    warm_start: np.ndarray | None = None,
    max_iter: int = 200,
    validate: bool = True,
) -> QpSolution:
    """Solve the QP; see module docstring for conventions.

    warm_start is a primal guess only; it is clamped into the box and pushed
    onto the equality manifold before the active-set loop starts.
    """
    if validate:
        prob.validate()
    H = np.asarray(prob.H, dtype=float)
    d = H.shape[0]
    # shift scales with H so the perturbed minimizer is invariant to H,c rescaling
    Hs = H + (H_SHIFT * (np.trace(H) / d + 1e-4)) * np.eye(d)
    c = np.asarray(prob.c, dtype=float)
    lb, ub = prob.lb, prob.ub
    A = np.asarray(prob.A_eq, dtype=float).reshape(-1, d) if prob.A_eq.size else np.zeros((0, d))
    b = np.asarray(prob.b_eq, dtype=float).ravel()

    z0 = np.zeros(d) if warm_start is None else np.asarray(warm_start, dtype=float).copy()
    z0[~np.isfinite(z0)] = 0.0
    z0 = np.minimum(np.maximum(z0, lb), ub)

    total_it = 0
    row_map = None
    if A.shape[0]:
        if np.linalg.matrix_rank(A) < A.shape[0]:
            row_map = _independent_rows(A)
            A_use, b_use = A[row_map], b[row_map]
        else:
            A_use, b_use = A, b
        z0, it1, feasible = _restore_feasibility(A_use, b_use, lb, ub, z0, max_iter)
        total_it += it1
        if not feasible or np.max(np.abs(A @ z0 - b)) > FEAS_TOL * max(1.0, float(np.max(np.abs(b)))):
            sol = QpSolution(z0, np.zeros(A.shape[0]), np.zeros(d), QpStatus.INFEASIBLE, total_it, np.inf)
            return sol
    else:
        A_use, b_use = A, b

    # phase 2 gets its own iteration budget; phase 1 cost is reported, not charged
    z, lam_use, w_state, it2, converged = _active_set(Hs, c, A_use, b_use, lb, ub, z0, max_iter)
    total_it += it2

    lam = np.zeros(A.shape[0])
    if A.shape[0]:
        lam[row_map if row_map is not None else slice(None)] = lam_use
    g = H @ z + c - (A.T @ lam if A.shape[0] else 0.0)
    mu = np.where(w_state != 0, g, 0.0)
    sol = QpSolution(z, lam, mu, QpStatus.OPTIMAL if converged else QpStatus.MAX_ITER, total_it, 0.0)
    res = kkt_residuals(prob, sol)
    sol.kkt_residual = max(res.values())
    if converged and sol.kkt_residual > 1e-8 * max(1.0, float(np.max(np.abs(c))), float(np.max(np.abs(b))) if b.size else 0.0):
        sol.status = QpStatus.MAX_ITER
    return sol
