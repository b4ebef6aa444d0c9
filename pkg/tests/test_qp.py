"""QP solver vs independent oracles: dense KKT solve and brute-force active-set enumeration."""

import itertools

import numpy as np
import pytest

from tiltalloc.qp import QpProblem, QpSolution, QpStatus, kkt_residuals, solve_qp

KKT_TOL = 1e-8


def random_problem(rng, d=5, p=3, box_halfwidth=None, loose=False):
    """Feasible by construction: b = A @ (interior box point)."""
    M = rng.normal(size=(d, d))
    H = M @ M.T * 0.5 + np.diag(rng.uniform(0.0, 1.0, size=d))
    c = rng.normal(size=d)
    A = rng.normal(size=(p, d))
    if loose:
        lb, ub = np.full(d, -10.0), np.full(d, 10.0)
    else:
        w = box_halfwidth if box_halfwidth is not None else rng.uniform(0.3, 1.5)
        center = rng.normal(scale=0.5, size=d)
        lb, ub = center - w, center + w
    z_feas = lb + rng.uniform(0.2, 0.8, size=d) * (ub - lb)
    b = A @ z_feas
    return QpProblem(H=H, c=c, A_eq=A, b_eq=b, lb=lb, ub=ub)


def objective(prob, z):
    return 0.5 * z @ prob.H @ z + prob.c @ z


def enumerate_optimum(prob):
    """Brute force over all 3^d bound-activity patterns; fully independent path.

    For each pattern, fixed coordinates sit at their bound, free ones solve the
    equality-constrained KKT system. Keeps the best feasible candidate.
    """
    d = len(prob.c)
    p = prob.A_eq.shape[0]
    best = None
    for pattern in itertools.product((0, -1, 1), repeat=d):
        z = np.empty(d)
        fixed = []
        free = []
        for i, s in enumerate(pattern):
            if s == -1:
                z[i] = prob.lb[i]
                fixed.append(i)
            elif s == 1:
                z[i] = prob.ub[i]
                fixed.append(i)
            else:
                free.append(i)
        nf = len(free)
        if nf:
            Hff = prob.H[np.ix_(free, free)] + 1e-12 * np.eye(nf)
            rhs_g = -(prob.c[free] + prob.H[np.ix_(free, fixed)] @ z[fixed] if fixed else prob.c[free])
            Af = prob.A_eq[:, free]
            K = np.block([[Hff, Af.T], [Af, np.zeros((p, p))]])
            rhs = np.concatenate([rhs_g, prob.b_eq - (prob.A_eq[:, fixed] @ z[fixed] if fixed else 0.0)])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            z[free] = sol[:nf]
        # candidate must satisfy everything
        if np.any(z < prob.lb - 1e-9) or np.any(z > prob.ub + 1e-9):
            continue
        if np.max(np.abs(prob.A_eq @ z - prob.b_eq)) > 1e-7 * max(1.0, np.max(np.abs(prob.b_eq))):
            continue
        val = objective(prob, z)
        if best is None or val < best:
            best = val
    return best


def assert_certified(prob, sol):
    res = kkt_residuals(prob, sol)
    assert max(res.values()) <= KKT_TOL, res


class TestBasics:
    def test_projection_onto_line(self):
        prob = QpProblem(
            H=2 * np.eye(2),
            c=np.zeros(2),
            A_eq=np.array([[1.0, 1.0]]),
            b_eq=np.array([2.0]),
            lb=np.full(2, -10.0),
            ub=np.full(2, 10.0),
        )
        sol = solve_qp(prob)
        assert sol.status is QpStatus.OPTIMAL
        np.testing.assert_allclose(sol.z, [1.0, 1.0], atol=1e-10)
        assert_certified(prob, sol)

    def test_equality_outside_box(self):
        prob = QpProblem(
            H=2 * np.eye(2),
            c=np.zeros(2),
            A_eq=np.array([[1.0, 0.0]]),
            b_eq=np.array([5.0]),
            lb=np.zeros(2),
            ub=np.ones(2),
        )
        assert solve_qp(prob).status is QpStatus.INFEASIBLE

    def test_loose_box_matches_dense_kkt(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            prob = random_problem(rng, loose=True)
            sol = solve_qp(prob)
            assert sol.status is QpStatus.OPTIMAL
            # direct KKT solve, no bounds active
            d, p = 5, 3
            K = np.block([[prob.H, prob.A_eq.T], [prob.A_eq, np.zeros((p, p))]])
            ref = np.linalg.solve(K, np.concatenate([-prob.c, prob.b_eq]))[:d]
            assert np.max(np.abs(sol.z - ref)) <= 1e-8

    def test_validation_errors(self):
        good = random_problem(np.random.default_rng(1))
        bad = QpProblem(H=np.array([[1.0, 2.0], [0.0, 1.0]]), c=np.zeros(2),
                        A_eq=np.zeros((0, 2)), b_eq=np.zeros(0), lb=-np.ones(2), ub=np.ones(2))
        with pytest.raises(ValueError):
            bad.validate()
        notpsd = QpProblem(H=np.diag([1.0, -1.0]), c=np.zeros(2),
                           A_eq=np.zeros((0, 2)), b_eq=np.zeros(0), lb=-np.ones(2), ub=np.ones(2))
        with pytest.raises(ValueError):
            notpsd.validate()
        flipped = QpProblem(H=good.H, c=good.c, A_eq=good.A_eq, b_eq=good.b_eq,
                            lb=good.ub, ub=good.lb)
        with pytest.raises(ValueError):
            flipped.validate()

    def test_box_only_problem(self):
        prob = QpProblem(H=2 * np.eye(3), c=np.array([-10.0, 0.5, 2.0]),
                         A_eq=np.zeros((0, 3)), b_eq=np.zeros(0),
                         lb=np.zeros(3), ub=np.ones(3))
        sol = solve_qp(prob)
        assert sol.status is QpStatus.OPTIMAL
        np.testing.assert_allclose(sol.z, [1.0, 0.0, 0.0], atol=1e-10)
        assert_certified(prob, sol)


class TestEnumerationOracle:
    def test_tight_boxes_match_enumeration(self):
        rng = np.random.default_rng(42)
        for k in range(200):
            prob = random_problem(rng, box_halfwidth=rng.uniform(0.1, 0.8))
            sol = solve_qp(prob)
            assert sol.status is QpStatus.OPTIMAL, f"instance {k}: {sol.status}"
            assert_certified(prob, sol)
            ref = enumerate_optimum(prob)
            assert ref is not None
            assert objective(prob, sol.z) <= ref + 1e-7, f"instance {k}"


class TestProperties:
    def test_warm_start_equivalence(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            prob = random_problem(rng)
            cold = solve_qp(prob)
            warm = solve_qp(prob, warm_start=rng.normal(size=5))
            assert cold.status is QpStatus.OPTIMAL and warm.status is QpStatus.OPTIMAL
            assert abs(objective(prob, cold.z) - objective(prob, warm.z)) <= 1e-9 * max(
                1.0, abs(objective(prob, cold.z))
            )

    def test_scaling_covariance(self):
        rng = np.random.default_rng(6)
        for alpha in (0.01, 1.0, 37.5):
            prob = random_problem(rng)
            base = solve_qp(prob)
            scaled = QpProblem(H=alpha * prob.H, c=alpha * prob.c, A_eq=prob.A_eq,
                               b_eq=prob.b_eq, lb=prob.lb, ub=prob.ub)
            sol = solve_qp(scaled)
            assert np.max(np.abs(sol.z - base.z)) <= 1e-9 * max(1.0, np.max(np.abs(base.z)))

    def test_degenerate_h_psd_not_pd(self):
        # rank-1 H: regularization keeps the KKT systems solvable
        v = np.array([1.0, 2.0, -1.0, 0.5, 0.0])
        prob = QpProblem(H=np.outer(v, v), c=np.array([1.0, -1.0, 0.0, 0.0, 0.2]),
                         A_eq=np.array([[1.0, 1.0, 1.0, 1.0, 1.0]]), b_eq=np.array([1.0]),
                         lb=np.full(5, -2.0), ub=np.full(5, 2.0))
        sol = solve_qp(prob)
        assert sol.status is QpStatus.OPTIMAL
        assert_certified(prob, sol)

    def test_infinite_upper_bounds(self):
        # elastic-style variables with one-sided bounds
        prob = QpProblem(H=np.diag([2.0, 2.0, 1e-10, 1e-10]),
                         c=np.array([0.0, 0.0, 10.0, 10.0]),
                         A_eq=np.array([[1.0, 1.0, 1.0, -1.0]]), b_eq=np.array([4.0]),
                         lb=np.array([-1.0, -1.0, 0.0, 0.0]),
                         ub=np.array([1.0, 1.0, np.inf, np.inf]))
        sol = solve_qp(prob)
        assert sol.status is QpStatus.OPTIMAL
        # the cheap route is the bounded variables first, slack covers the rest
        np.testing.assert_allclose(sol.z[:2], [1.0, 1.0], atol=1e-7)
        np.testing.assert_allclose(sol.z[2], 2.0, atol=1e-6)

    def test_iterates_reported(self):
        prob = random_problem(np.random.default_rng(9))
        sol = solve_qp(prob)
        assert sol.iterations >= 1
        assert sol.kkt_residual <= KKT_TOL
