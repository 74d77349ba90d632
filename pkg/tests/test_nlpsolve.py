import numpy as np
import pytest
import scipy.sparse as sp
from scipy.linalg import null_space
from hypothesis import given, settings
from hypothesis import strategies as st

from williams_otto import nlpsolve as ns


def equality_qp():
    return ns.dense_problem(lambda x: (x[0] - 1) ** 2 + (x[1] - 2) ** 2, 2, c=lambda x: [x[0] + x[1] - 1], m=1)


def projection():
    return ns.dense_problem(lambda x: (x[0] - 3) ** 2, 1, upper=2.0)


def rosenbrock(exact=True):
    return ns.dense_problem(lambda x: (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2, 2, lower=-5.0, upper=5.0,
                            exact_hessian=exact)


class TestAnalytic:
    def test_equality_qp(self):
        r = ns.solve(equality_qp(), np.zeros(2))
        assert r.status is ns.Status.OPTIMAL
        np.testing.assert_allclose(r.x, [0.0, 1.0], atol=1e-8)
        # stationarity: 2(x - (1, 2)) + lam = 0 gives lam = 2
        assert r.lam[0] == pytest.approx(2.0, abs=1e-7)
        assert r.kkt_residual <= 1e-8

    def test_bound_projection(self):
        r = ns.solve(projection(), np.array([0.0]))
        assert r.status is ns.Status.OPTIMAL
        assert r.x[0] == pytest.approx(2.0, abs=1e-8)
        assert r.z_upper[0] == pytest.approx(2.0, abs=1e-6)

    @pytest.mark.parametrize("exact", [True, False])
    def test_rosenbrock(self, exact):
        r = ns.solve(rosenbrock(exact), np.array([-1.2, 1.0]))
        assert r.status is ns.Status.OPTIMAL
        np.testing.assert_allclose(r.x, [1.0, 1.0], atol=1e-6)
        assert r.kkt_residual <= 1e-8

    def test_sparse_path_matches_dense(self):
        n = 40
        target = np.linspace(-1, 1, n)

        def f(x):
            return sum((x[i] - target[i]) ** 2 for i in range(n))

        def c(x):
            return [x[i] + x[i + 1] for i in range(0, n, 2)]

        p = ns.dense_problem(f, n, c=c, m=n // 2, lower=-0.5, upper=2.0)
        dense = ns.solve(p, np.zeros(n), ns.SolveOptions(dense_threshold=10 ** 6))
        sparse = ns.solve(p, np.zeros(n), ns.SolveOptions(dense_threshold=0))
        assert dense.success and sparse.success
        np.testing.assert_allclose(sparse.x, dense.x, atol=1e-7)


class TestKktFactorization:
    @staticmethod
    def system(seed, shift):
        rng = np.random.default_rng(seed)
        n, m = 30, 12
        A = rng.normal(size=(n, n))
        H = sp.csr_matrix(A @ A.T / n + shift * np.eye(n))
        J = sp.csr_matrix(rng.normal(size=(m, n)))
        return n, m, H, J, rng.normal(size=n + m)

    @pytest.mark.parametrize("seed", range(5))
    def test_sparse_and_dense_agree(self, seed):
        n, m, H, J, rhs = self.system(seed, 0.1)
        out = [ns._KKTSolver(n, m, dense).solve(H, J, rhs, 1e-2) for dense in (True, False)]
        assert out[0][2] == out[1][2] == 0.0
        K = sp.bmat([[H, J.T], [J, None]]).toarray()
        for dx, dlam, _ in out:
            np.testing.assert_allclose(K @ np.concatenate((dx, dlam)), rhs, atol=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_indefinite_hessian_is_regularized(self, seed):
        n, m, H, J, rhs = self.system(seed, -3.0)
        for dense in (True, False):
            _, _, dw = ns._KKTSolver(n, m, dense).solve(H, J, rhs, 1e-2)
            # the shifted reduced Hessian is positive definite after the correction
            Z = null_space(J.toarray())
            red = Z.T @ (H.toarray() + dw * np.eye(n)) @ Z
            assert dw > 0 and np.linalg.eigvalsh(red).min() > 0


class TestKktResidual:
    def test_at_solution(self):
        p = equality_qp()
        assert ns.kkt_residual(p, np.array([0.0, 1.0]), ns.Multipliers(np.array([2.0]))) <= 1e-12

    def test_perturbed(self):
        p = equality_qp()
        assert ns.kkt_residual(p, np.array([1e-3, 1.0]), ns.Multipliers(np.array([2.0]))) >= 1e-4

    def test_unconstrained_vertex(self):
        p = ns.dense_problem(lambda x: (x[0] - 1) ** 2 + x[1] ** 2, 2)
        assert ns.kkt_residual(p, np.array([1.0, 0.0]), ns.Multipliers(np.zeros(0))) == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            ns.kkt_residual(equality_qp(), np.zeros(3), ns.Multipliers(np.zeros(1)))


class TestBehaviour:
    def test_iterates_strictly_interior(self):
        seen = []
        p = rosenbrock()
        obj = p.objective

        def spy(x):
            seen.append(x.copy())
            return obj(x)

        p.objective = spy
        p.lower, p.upper = np.array([-5.0, -5.0]), np.array([0.9, 5.0])
        r = ns.solve(p, np.array([-1.2, 1.0]))
        assert r.success
        pts = np.array(seen)
        assert np.all(pts > p.lower) and np.all(pts < p.upper)

    def test_merit_non_increasing_at_fixed_mu(self):
        r = ns.solve(rosenbrock(), np.array([-1.2, 1.0]))
        for h in r.history:
            assert h["merit_after"] <= h["merit_before"] + 1e-12 * max(1.0, abs(h["merit_before"]))

    def test_deterministic(self):
        a = ns.solve(rosenbrock(), np.array([-1.2, 1.0]))
        b = ns.solve(rosenbrock(), np.array([-1.2, 1.0]))
        np.testing.assert_array_equal(a.x, b.x)
        assert a.iterations == b.iterations

    def test_feasibility_on_success(self):
        r = ns.solve(equality_qp(), np.array([5.0, -3.0]))
        assert r.success and r.constraint_violation <= 1e-8

    def test_iteration_limit(self):
        r = ns.solve(rosenbrock(), np.array([-1.2, 1.0]), ns.SolveOptions(max_iter=3))
        assert r.status is ns.Status.ITER_LIMIT and r.iterations == 3

    def test_infeasible_constraints(self):
        p = ns.dense_problem(lambda x: x[0] ** 2, 1, c=lambda x: [x[0] * x[0] + 1.0], m=1)
        r = ns.solve(p, np.array([1.0]), ns.SolveOptions(max_iter=200))
        assert not r.success

    def test_log_stream(self):
        lines = []
        ns.solve(equality_qp(), np.zeros(2), ns.SolveOptions(log=lines.append))
        assert lines[0].split()[:3] == ["iter", "objective", "inf_pr"]
        assert len(lines) > 1

    def test_callback_failure_at_start(self):
        p = ns.dense_problem(lambda x: x[0], 1)
        p.constraints = lambda x: np.array([np.nan])
        p.m = 1
        p.jacobian = lambda x: sp.csr_matrix(np.ones((1, 1)))
        with pytest.raises(ns.SolverError):
            ns.solve(p, np.array([1.0]))

    @pytest.mark.parametrize("kw", [{"tol": 0.0}, {"mu_factor": 1.0}, {"bound_push": 0.0}, {"max_iter": -1}])
    def test_options_validated(self, kw):
        with pytest.raises(ValueError):
            ns.SolveOptions(**kw)

    def test_bounds_validated(self):
        with pytest.raises(ValueError):
            ns.dense_problem(lambda x: x[0], 1, lower=1.0, upper=0.0)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.5, 4.0))
def test_box_projection_property(a, b, w):
    # min |x - (a, b)|^2 on the box [-1, 1]^2 with weight w on the second coordinate
    p = ns.dense_problem(lambda x: (x[0] - a) ** 2 + w * (x[1] - b) ** 2, 2, lower=-1.0, upper=1.0)
    r = ns.solve(p, np.zeros(2))
    assert r.success
    # complementarity s*z <= tol only pins an active coordinate to tol / z; with z ~ 0 it is ~sqrt(tol)
    target = np.array([a, b])
    z = 2.0 * np.array([1.0, w]) * np.abs(target - np.clip(target, -1, 1))
    with np.errstate(divide="ignore"):
        atol = np.minimum(np.maximum(1e-7, 2e-8 / z), 1e-4)
    assert np.all(np.abs(r.x - np.clip(target, -1, 1)) <= atol)
