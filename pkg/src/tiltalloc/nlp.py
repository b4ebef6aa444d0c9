"""SQP solver for the nonlinear allocation problem.

Solves    min  u'Qu
          s.t. r(u) = 0,   lb <= u <= ub

where r(u) is a smooth residual (here: actuator map minus demanded
generalized input) supplied with its Jacobian. Q is specified in normalized
input coordinates (each component divided by its bound magnitude) so thrusts
and tilt angles are weighted commensurately; the identity weight there is
the default secondary objective.

Each iteration solves a box-QP subproblem on the in-repo active-set solver
(exact quadratic cost, linearized equality). When the linearized equality is
inconsistent with the box, the subproblem goes elastic: the equality gets a
slack split penalized in l1, which keeps the subproblem feasible and mirrors
the relaxation used by the allocation layer. Globalization is an l1 merit
function with backtracking.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .qp import QpProblem, QpStatus, solve_qp

__all__ = [
    "NlpProblem",
    "NlpSolution",
    "NlpStatus",
    "solve_nlp",
    "solve_nlp_relaxed",
    "solve_nlp_multistart",
]

# elastic penalty per unit slack, in normalized-objective units
ELASTIC_RHO = 1e4
STEP_STALL = 1e-10
ARMIJO_C1 = 0.1


class NlpStatus(enum.Enum):
    CONVERGED = "converged"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max_iter"


@dataclass
class NlpProblem:
    """Problem data. residual_fn(u) must return (r, J) with r in R^p, J p-by-d.

    residual_hess, when provided, returns the p stacked Hessians of r
    (shape (p, d, d)); the solver then uses the exact Lagrangian curvature,
    which roughly halves the iteration count on this problem family.
    """

    residual_fn: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]
    lb: np.ndarray
    ub: np.ndarray
    weight: np.ndarray | None = None  # in normalized coordinates; None = identity
    eq_tolerance: float = 1e-6
    residual_hess: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self) -> None:
        if np.any(self.lb > self.ub):
            raise ValueError("lb > ub")
        if not self.eq_tolerance > 0.0:
            raise ValueError("eq_tolerance must be positive")
        scale = np.maximum(np.abs(self.lb), np.abs(self.ub))
        scale[~np.isfinite(scale) | (scale == 0.0)] = 1.0
        sinv = np.diag(1.0 / scale)
        w = np.eye(len(scale)) if self.weight is None else np.asarray(self.weight, dtype=float)
        self.scale = scale
        self.Q = sinv @ w @ sinv

    def objective(self, u: np.ndarray) -> float:
        return float(u @ self.Q @ u)


@dataclass
class NlpSolution:
    u_star: np.ndarray
    objective_value: float
    eq_residual_norm: float
    status: NlpStatus
    iterations: int
    solve_time: float
    # (merit_before, merit_after, sigma) per accepted step
    merit_trace: list[tuple[float, float, float]] = field(default_factory=list)


def _lagrangian_hessian(prob: NlpProblem, u, lam):
    """Convexified 2Q + sum_i lam_i * hess(r_i); falls back to Gauss-Newton."""
    H = 2.0 * prob.Q
    if prob.residual_hess is None or lam is None or not np.any(lam):
        return H
    # stationarity convention grad J = J' lam + mu, so the curvature enters negated
    M = H - np.einsum("i,ijk->jk", lam, prob.residual_hess(u))
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    floor = 1e-8 * max(1.0, float(np.max(np.abs(w))))
    if w[0] >= floor:
        return M
    return (V * np.maximum(w, floor)) @ V.T


def _subproblem(prob: NlpProblem, u, r, J, box_lo, box_hi, slack_weights=None, lam_prev=None):
    """One SQP subproblem; elastic when requested or when the plain QP fails.

    Returns (step d, lambda, used_elastic).
    """
    d = len(u)
    p = len(r)
    H = _lagrangian_hessian(prob, u, lam_prev)
    c = 2.0 * (prob.Q @ u)
    lo = box_lo - u
    hi = box_hi - u
    if slack_weights is None:
        qp = QpProblem(H=H, c=c, A_eq=J, b_eq=-r, lb=lo, ub=hi)
        sol = solve_qp(qp, validate=False)
        if sol.status is QpStatus.OPTIMAL:
            return sol.z, sol.lambda_eq, False
        slack_weights = np.full(p, ELASTIC_RHO)
    H_el = np.zeros((d + 2 * p, d + 2 * p))
    H_el[:d, :d] = H
    # modest slack curvature keeps the KKT blocks well conditioned; slack still
    # reaches exactly zero through its bound, so the l1 exactness is intact
    np.fill_diagonal(H_el[d:, d:], 1e-2)
    c_el = np.concatenate([c, slack_weights, slack_weights])
    A_el = np.hstack([J, np.eye(p), -np.eye(p)])
    cap = 2.0 * float(np.max(np.abs(r))) + 1.0
    lb_el = np.concatenate([lo, np.zeros(2 * p)])
    ub_el = np.concatenate([hi, np.full(2 * p, cap)])
    warm = np.concatenate([np.zeros(d), np.maximum(-r, 0.0), np.maximum(r, 0.0)])
    qp = QpProblem(H=H_el, c=c_el, A_eq=A_el, b_eq=-r, lb=lb_el, ub=ub_el)
    sol = solve_qp(qp, warm_start=warm, validate=False)
    return sol.z[:d], sol.lambda_eq, True


def _solve_core(prob, initial_guess, max_iter, slack_weights):
    """Shared SQP loop. slack_weights=None: hard equality (elastic fallback only);
    otherwise every subproblem is elastic with those l1 weights (relaxed mode)."""
    t0 = time.perf_counter()
    lo, hi = prob.lb, prob.ub
    u = np.minimum(np.maximum(np.asarray(initial_guess, dtype=float), lo), hi)
    tol = prob.eq_tolerance
    sigma = 1.0
    trace: list[tuple[float, float, float]] = []
    relaxed = slack_weights is not None
    status = NlpStatus.MAX_ITER
    it = 0
    stall_count = 0
    lam_h = None  # curvature multipliers: trustworthy only from plain subproblems
    r, J = prob.residual_fn(u)
    for it in range(1, max_iter + 1):
        rn = float(np.max(np.abs(r)))
        d_step, lam, used_elastic = _subproblem(prob, u, r, J, lo, hi, slack_weights, lam_prev=lam_h)
        if not used_elastic and not relaxed:
            lam_h = lam
        step_scaled = float(np.max(np.abs(d_step / prob.scale)))
        if not relaxed and rn <= tol and step_scaled <= 1e-7:
            # feasible and the subproblem barely moves: KKT point of the QP = KKT here
            status = NlpStatus.CONVERGED
            break
        if relaxed and step_scaled <= 1e-9:
            status = NlpStatus.CONVERGED
            break

        if relaxed:
            weights = slack_weights
        else:
            if not used_elastic:
                # track the true multipliers; elastic ones reflect the penalty, not lambda*
                sigma = max(1.1 * float(np.max(np.abs(lam), initial=0.0)) + 0.1, 0.5 * sigma)
            weights = np.full(len(r), sigma)
        merit0 = prob.objective(u) + float(weights @ np.abs(r))
        lin_after = float(weights @ np.abs(r + J @ d_step))
        deriv = float(2.0 * (prob.Q @ u) @ d_step) - (float(weights @ np.abs(r)) - lin_after)
        budget = ARMIJO_C1 * min(deriv, 0.0) + 1e-12 * abs(merit0)

        def try_point(cand, frac):
            r_c, J_c = prob.residual_fn(cand)
            m_c = prob.objective(cand) + float(weights @ np.abs(r_c))
            return (m_c <= merit0 + frac * budget), cand, r_c, J_c, m_c

        accepted, u_try, r_try, J_try, merit_try = try_point(
            np.minimum(np.maximum(u + d_step, lo), hi), 1.0
        )
        alpha = 1.0
        if not accepted:
            # second-order correction: cancel the constraint curvature picked up
            # by the full step before giving up on it (Maratos guard)
            try:
                corr = -J_try.T @ np.linalg.solve(J_try @ J_try.T, r_try)
                soc = np.minimum(np.maximum(u + d_step + corr, lo), hi)
                accepted, u_try, r_try, J_try, merit_try = try_point(soc, 1.0)
            except np.linalg.LinAlgError:
                pass
        while not accepted and alpha >= 1e-10:
            alpha *= 0.5
            accepted, u_try, r_try, J_try, merit_try = try_point(
                np.minimum(np.maximum(u + alpha * d_step, lo), hi), alpha
            )
        if not accepted:
            # cannot make progress along this direction
            status = NlpStatus.CONVERGED if (not relaxed and rn <= tol) or relaxed else NlpStatus.INFEASIBLE
            break
        trace.append((merit0, merit_try, float(weights[0])))
        u, r, J = u_try, r_try, J_try
        stalled_step = float(np.max(np.abs(alpha * d_step))) <= STEP_STALL * max(1.0, float(np.max(np.abs(u))))
        stalled_merit = merit0 - merit_try <= 1e-12 * max(1.0, abs(merit0))
        if stalled_step or (stalled_merit and stall_count >= 2):
            rn = float(np.max(np.abs(r)))
            if relaxed or rn <= tol:
                status = NlpStatus.CONVERGED
            else:
                status = NlpStatus.INFEASIBLE
            break
        stall_count = stall_count + 1 if stalled_merit else 0

    rn = float(np.max(np.abs(r)))
    if status is NlpStatus.MAX_ITER and relaxed:
        status = NlpStatus.CONVERGED  # best-effort relaxed answer is still usable
    if status is NlpStatus.CONVERGED and not relaxed and rn > tol:
        status = NlpStatus.INFEASIBLE
    return NlpSolution(
        u_star=u,
        objective_value=prob.objective(u),
        eq_residual_norm=rn,
        status=status,
        iterations=it,
        solve_time=time.perf_counter() - t0,
        merit_trace=trace,
    )


def solve_nlp(prob: NlpProblem, initial_guess: np.ndarray, max_iter: int = 100) -> NlpSolution:
    """Solve with a hard equality; Converged guarantees the residual tolerance."""
    return _solve_core(prob, initial_guess, max_iter, None)


def solve_nlp_relaxed(
    prob: NlpProblem,
    initial_guess: np.ndarray,
    channel_weights: np.ndarray,
    rho: float = ELASTIC_RHO,
    max_iter: int = 100,
) -> NlpSolution:
    """Prioritized soft-equality solve: minimizes J + rho * sum_i w_i |r_i|.

    Always returns a usable point; the achieved residual is the caller's slack.
    """
    w = rho * np.asarray(channel_weights, dtype=float)
    return _solve_core(prob, initial_guess, max_iter, w)


def solve_nlp_multistart(
    prob: NlpProblem,
    n_starts: int,
    rng_seed: int,
    initial_guess: np.ndarray | None = None,
    max_iter: int = 100,
) -> NlpSolution:
    """Best converged result over Latin-hypercube starts (plus the given guess).

    Deterministic for a fixed seed. Infeasible is returned only when every
    start fails, in which case the smallest-residual attempt is reported.
    """
    if n_starts < 1:
        raise ValueError("n_starts must be >= 1")
    rng = np.random.default_rng(rng_seed)
    d = len(prob.lb)
    lo = np.where(np.isfinite(prob.lb), prob.lb, -1e3)
    hi = np.where(np.isfinite(prob.ub), prob.ub, 1e3)
    # Latin hypercube: one stratum per start per dimension
    strata = np.empty((n_starts, d))
    for j in range(d):
        strata[:, j] = rng.permutation(n_starts) + rng.uniform(size=n_starts)
    starts = lo + strata / n_starts * (hi - lo)

    candidates: list[np.ndarray] = []
    if initial_guess is not None:
        candidates.append(np.asarray(initial_guess, dtype=float))
    candidates.extend(starts)

    best: NlpSolution | None = None
    fallback: NlpSolution | None = None
    for guess in candidates:
        sol = solve_nlp(prob, guess, max_iter=max_iter)
        if sol.status is NlpStatus.CONVERGED:
            if best is None or sol.objective_value < best.objective_value - 1e-15:
                best = sol
        elif fallback is None or sol.eq_residual_norm < fallback.eq_residual_norm:
            fallback = sol
    if best is not None:
        return best
    assert fallback is not None
    fallback.status = NlpStatus.INFEASIBLE
    return fallback
