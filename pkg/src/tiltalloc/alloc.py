"""Per-sample control allocation: three interchangeable backends.

LCA  linearizes the actuator map at (theta0, u0) and solves a box-QP over
     the input increment; cheap, but the achieved generalized input misses
     the demand by the (unmodeled) linearization error, which is logged per
     sample as lin_residual.
NLP  solves the exact nonlinear allocation with the SQP solver, warm-started
     from the previous sample.
NN   evaluates a trained regressor and clamps; its residual is measured and
     reported as slack (diagnostic, nothing is corrected).

All backends return inputs strictly inside the (rate-tightened) box. When a
primary solve fails or is infeasible, the equality is relaxed with an l1
slack penalty weighted per channel; the angular-acceleration channel gets a
much larger weight so rotational authority is sacrificed last. For relaxed
results, slack holds the achieved nonlinear residual g_r(theta0, u) - mu_des,
which is exactly the feedback-linearization error the simulator will see at
that sample.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass

import numpy as np

from .mlp import MlpModel
from .nlp import NlpProblem, NlpStatus, solve_nlp, solve_nlp_relaxed
from .qp import QpProblem, QpStatus, solve_qp
from .vehicle import (
    InputBounds,
    VehicleParams,
    reduced_g,
    reduced_g_hessian,
    reduced_g_jacobian,
)

__all__ = [
    "Backend",
    "AllocationRequest",
    "AllocationResult",
    "compute_mu_des",
    "input_cost_matrix",
    "make_nca_problem",
    "allocate_lca",
    "allocate_nca_nlp",
    "allocate_nn",
    "relax",
    "LcaAllocator",
    "NlpAllocator",
    "NnAllocator",
    "make_allocator",
]

# prioritized relaxation: [a_x, a_z, theta_dd] channel weights and l1 penalty
RELAX_WEIGHTS = np.array([1.0, 1.0, 100.0])
RELAX_RHO = 1e4
# measured residual above this marks an allocation as not exactly satisfied
EXACT_TOL = 1e-6


class Backend(enum.Enum):
    LCA = "lca"
    NLP = "nlp"
    NN = "nn"


@dataclass
class AllocationRequest:
    theta0: float
    mu_des: np.ndarray
    u0: np.ndarray
    bounds: InputBounds
    dt: float

    def effective_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.bounds.effective(self.u0, self.dt)


@dataclass
class AllocationResult:
    u: np.ndarray
    slack: np.ndarray
    backend: Backend
    relaxed: bool
    solve_time: float
    solver_status: str
    lin_residual: float | None = None  # LCA only: nonlinear miss of the linear model
    iterations: int = 0


def compute_mu_des(
    nu: np.ndarray,
    xdot0_r: np.ndarray,
    theta0: float,
    u0: np.ndarray,
    params: VehicleParams,
) -> np.ndarray:
    """Demanded generalized input: nu - xdot0 + g_r(theta0, u0)."""
    return nu - xdot0_r + reduced_g(theta0, u0, params)


def input_cost_matrix(bounds: InputBounds, weight: np.ndarray | None = None) -> np.ndarray:
    """Secondary-objective matrix Q in raw input coordinates.

    Identity in normalized coordinates by default: each component is scaled
    by its absolute bound magnitude so thrusts (N) and tilts (rad) trade off
    comparably, and J(0) = 0 keeps "least effort" meaning smallest inputs.
    """
    scale = np.maximum(np.abs(bounds.lower), np.abs(bounds.upper))
    scale[scale == 0.0] = 1.0
    sinv = np.diag(1.0 / scale)
    w = np.eye(len(scale)) if weight is None else np.asarray(weight, dtype=float)
    return sinv @ w @ sinv


def make_nca_problem(
    theta0: float,
    mu_des: np.ndarray,
    params: VehicleParams,
    lb: np.ndarray,
    ub: np.ndarray,
    eq_tolerance: float = EXACT_TOL,
) -> NlpProblem:
    """Nonlinear allocation problem for the SQP solver, curvature included."""
    mu = np.asarray(mu_des, dtype=float)

    def residual(u):
        return reduced_g(theta0, u, params) - mu, reduced_g_jacobian(theta0, u, params)

    return NlpProblem(
        residual_fn=residual,
        lb=lb,
        ub=ub,
        eq_tolerance=eq_tolerance,
        residual_hess=lambda u: reduced_g_hessian(theta0, u, params),
    )


def _relaxed_lca_qp(req, params, Q, B0, b_lin, lo, hi, weights=None, rho=RELAX_RHO):
    """Slack-split QP: always feasible, channel-weighted l1 penalty."""
    d, p = 5, 3
    H = np.zeros((d + 2 * p, d + 2 * p))
    H[:d, :d] = 2.0 * Q
    np.fill_diagonal(H[d:, d:], 1e-2)
    pen = rho * (RELAX_WEIGHTS if weights is None else np.asarray(weights, dtype=float))
    c = np.concatenate([2.0 * (Q @ req.u0), pen, pen])
    A = np.hstack([B0, np.eye(p), -np.eye(p)])
    cap = 2.0 * float(np.max(np.abs(b_lin))) + 1.0
    lb = np.concatenate([lo, np.zeros(2 * p)])
    ub = np.concatenate([hi, np.full(2 * p, cap)])
    warm = np.concatenate([np.zeros(d), np.maximum(b_lin, 0.0), np.maximum(-b_lin, 0.0)])
    sol = solve_qp(QpProblem(H=H, c=c, A_eq=A, b_eq=b_lin, lb=lb, ub=ub), warm_start=warm, validate=False)
    return sol.z[:d], sol


def allocate_lca(
    req: AllocationRequest,
    params: VehicleParams,
    Q: np.ndarray | None = None,
    warm_du: np.ndarray | None = None,
) -> AllocationResult:
    """One linearized-allocation step: B0 du = mu_des - g_r(theta0, u0).

    Minimizes the quadratic form of the actual input (u0 + du)' Q (u0 + du),
    not of the increment alone.
    """
    if Q is None:
        Q = input_cost_matrix(req.bounds)
    lo_abs, hi_abs = req.effective_box()
    lo, hi = lo_abs - req.u0, hi_abs - req.u0
    g0 = reduced_g(req.theta0, req.u0, params)
    B0 = reduced_g_jacobian(req.theta0, req.u0, params)
    b_lin = np.asarray(req.mu_des, dtype=float) - g0

    prob = QpProblem(H=2.0 * Q, c=2.0 * (Q @ req.u0), A_eq=B0, b_eq=b_lin, lb=lo, ub=hi)
    t0 = time.perf_counter()
    sol = solve_qp(prob, warm_start=warm_du, validate=False)
    relaxed = sol.status is not QpStatus.OPTIMAL
    if relaxed:
        du, sol = _relaxed_lca_qp(req, params, Q, B0, b_lin, lo, hi)
    else:
        du = sol.z
    elapsed = time.perf_counter() - t0

    u = np.minimum(np.maximum(req.u0 + du, lo_abs), hi_abs)
    g_new = reduced_g(req.theta0, u, params)
    lin_residual = float(np.linalg.norm(g_new - g0 - B0 @ du))
    slack = (g_new - req.mu_des) if relaxed else np.zeros(3)
    return AllocationResult(
        u=u,
        slack=slack,
        backend=Backend.LCA,
        relaxed=relaxed,
        solve_time=elapsed,
        solver_status=sol.status.value,
        lin_residual=lin_residual,
        iterations=sol.iterations,
    )


def allocate_nca_nlp(
    req: AllocationRequest,
    params: VehicleParams,
    warm: np.ndarray,
) -> AllocationResult:
    """Exact nonlinear allocation via SQP, falling back to prioritized relaxation."""
    lo, hi = req.effective_box()
    prob = make_nca_problem(req.theta0, req.mu_des, params, lo, hi)
    t0 = time.perf_counter()
    sol = solve_nlp(prob, warm)
    relaxed = sol.status is not NlpStatus.CONVERGED
    if relaxed:
        sol = solve_nlp_relaxed(prob, warm, RELAX_WEIGHTS, RELAX_RHO)
    elapsed = time.perf_counter() - t0

    u = sol.u_star
    slack = (reduced_g(req.theta0, u, params) - req.mu_des) if relaxed else np.zeros(3)
    return AllocationResult(
        u=u,
        slack=slack,
        backend=Backend.NLP,
        relaxed=relaxed,
        solve_time=elapsed,
        solver_status=sol.status.value,
        iterations=sol.iterations,
    )


def allocate_nn(
    req: AllocationRequest,
    model: MlpModel,
    params: VehicleParams,
) -> AllocationResult:
    """Regressor inference plus clamping; total, never raises.

    solve_time covers the network kernel only (matching how inference cost
    is usually quoted); normalization is simple arithmetic either way. slack
    carries the measured residual, and the relaxed flag marks it whenever
    the demand was not met exactly, keeping the slack/relaxed contract
    uniform across backends.
    """
    ns = model.norm_stats
    x = np.array([req.theta0, req.mu_des[0], req.mu_des[1], req.mu_des[2]])
    xn = (x - ns.x_mean) / ns.x_std
    t0 = time.perf_counter()
    yn = model.forward_normalized(xn)
    elapsed = time.perf_counter() - t0
    u_raw = ns.y_mean + ns.y_std * yn
    lo, hi = req.effective_box()
    u = np.minimum(np.maximum(u_raw, lo), hi)
    slack = reduced_g(req.theta0, u, params) - req.mu_des
    return AllocationResult(
        u=u,
        slack=slack,
        backend=Backend.NN,
        relaxed=bool(np.max(np.abs(slack)) > EXACT_TOL),
        solve_time=elapsed,
        solver_status="inference",
    )


def relax(
    req: AllocationRequest,
    backend: Backend,
    params: VehicleParams,
    warm: np.ndarray | None = None,
    weights: np.ndarray | None = None,
    rho: float = RELAX_RHO,
) -> AllocationResult:
    """Explicit relaxed re-solve for a failed primary allocation."""
    if warm is None:
        warm = req.u0
    if weights is None:
        weights = RELAX_WEIGHTS
    if backend is Backend.LCA:
        Q = input_cost_matrix(req.bounds)
        lo_abs, hi_abs = req.effective_box()
        lo, hi = lo_abs - req.u0, hi_abs - req.u0
        g0 = reduced_g(req.theta0, req.u0, params)
        B0 = reduced_g_jacobian(req.theta0, req.u0, params)
        b_lin = np.asarray(req.mu_des, dtype=float) - g0
        t0 = time.perf_counter()
        du, sol = _relaxed_lca_qp(req, params, Q, B0, b_lin, lo, hi, weights=weights, rho=rho)
        elapsed = time.perf_counter() - t0
        u = np.minimum(np.maximum(req.u0 + du, lo_abs), hi_abs)
        g_new = reduced_g(req.theta0, u, params)
        return AllocationResult(
            u=u,
            slack=g_new - req.mu_des,
            backend=backend,
            relaxed=True,
            solve_time=elapsed,
            solver_status=sol.status.value,
            lin_residual=float(np.linalg.norm(g_new - g0 - B0 @ du)),
            iterations=sol.iterations,
        )
    if backend is Backend.NLP:
        lo, hi = req.effective_box()
        prob = make_nca_problem(req.theta0, req.mu_des, params, lo, hi)
        t0 = time.perf_counter()
        sol = solve_nlp_relaxed(prob, warm, weights, rho)
        elapsed = time.perf_counter() - t0
        return AllocationResult(
            u=sol.u_star,
            slack=reduced_g(req.theta0, sol.u_star, params) - req.mu_des,
            backend=backend,
            relaxed=True,
            solve_time=elapsed,
            solver_status=sol.status.value,
            iterations=sol.iterations,
        )
    raise ValueError("relaxation applies to the LCA and NLP backends only")


class LcaAllocator:
    """Stateful wrapper: keeps the previous increment as the QP warm start.

    One instance per control loop; not thread-safe across loops.
    """

    backend = Backend.LCA

    def __init__(self, params: VehicleParams, Q: np.ndarray | None = None):
        self.params = params
        self.Q = Q
        self._warm_du: np.ndarray | None = None

    def allocate(self, req: AllocationRequest) -> AllocationResult:
        Q = self.Q if self.Q is not None else input_cost_matrix(req.bounds)
        res = allocate_lca(req, self.params, Q=Q, warm_du=self._warm_du)
        self._warm_du = res.u - req.u0
        return res


class NlpAllocator:
    """Stateful wrapper: warm-starts each solve from the previous solution."""

    backend = Backend.NLP

    def __init__(self, params: VehicleParams):
        self.params = params
        self._warm: np.ndarray | None = None

    def allocate(self, req: AllocationRequest) -> AllocationResult:
        warm = self._warm if self._warm is not None else req.u0
        res = allocate_nca_nlp(req, self.params, warm)
        self._warm = res.u
        return res


class NnAllocator:
    """Stateless inference wrapper around a trained model."""

    backend = Backend.NN

    def __init__(self, params: VehicleParams, model: MlpModel):
        self.params = params
        self.model = model

    def allocate(self, req: AllocationRequest) -> AllocationResult:
        return allocate_nn(req, self.model, self.params)


def make_allocator(backend: Backend, params: VehicleParams, model: MlpModel | None = None):
    if backend is Backend.LCA:
        return LcaAllocator(params)
    if backend is Backend.NLP:
        return NlpAllocator(params)
    if backend is Backend.NN:
        if model is None:
            raise ValueError("NN backend requires a trained model")
        return NnAllocator(params, model)
    raise ValueError(f"unknown backend {backend}")
