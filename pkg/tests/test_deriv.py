import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from williams_otto import deriv


def _poly(z):
    return [z[0] * z[1] + deriv.exp(z[2]), z[0] / z[1] - deriv.sqrt(z[2] * z[2] + 1.0), deriv.log(z[1]) * z[0] ** 3]


class TestDual:
    def test_product_rule(self):
        x = deriv.Dual(np.array(3.0), np.array([1.0]))
        y = x * x * 2.0
        assert float(y.value) == 18.0
        assert float(y.tangent[0]) == 12.0

    @pytest.mark.parametrize("fn, d", [
        (deriv.exp, lambda v: np.exp(v)),
        (deriv.log, lambda v: 1.0 / v),
        (deriv.sqrt, lambda v: 0.5 / np.sqrt(v)),
    ])
    def test_primitives(self, fn, d):
        v = 1.7
        y = fn(deriv.Dual(np.array(v), np.array([1.0])))
        assert float(y.tangent[0]) == pytest.approx(d(v), rel=1e-14)

    def test_log_domain(self):
        with pytest.raises(deriv.DomainError):
            deriv.log(deriv.Dual(np.array(-1.0), np.array([1.0])))

    def test_plain_numbers_pass_through(self):
        assert deriv.exp(0.0) == 1.0
        assert float(deriv.value_of(2.5)) == 2.5

    def test_vectorized_seeding(self):
        X = np.arange(12.0).reshape(4, 3) + 1.0
        a, b, c = deriv.seed_dual(X)
        y = a * b + c
        # d/da = b, d/db = a, d/dc = 1, for every row
        np.testing.assert_array_equal(y.tangent, np.column_stack([X[:, 1], X[:, 0], np.ones(4)]))


class TestJacobian:
    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(0.5, 3.0), min_size=3, max_size=3))
    def test_matches_finite_differences(self, x):
        x = np.array(x)
        J = deriv.jacobian(_poly, x).to_dense()
        F = deriv.fd_jacobian(lambda z: np.array(_poly(z)), x)
        np.testing.assert_allclose(J, F, rtol=1e-6, atol=1e-8)

    def test_directional_derivative(self):
        x = np.array([1.0, 2.0, 0.5])
        v = np.array([0.3, -1.0, 2.0])
        y, jv = deriv.directional_derivative(_poly, x, v)
        np.testing.assert_allclose(jv, deriv.jacobian(_poly, x).to_dense() @ v, rtol=1e-14)
        np.testing.assert_allclose(y, [float(deriv.value_of(t)) for t in _poly(x)])

    def test_pattern_coloring_block_diagonal(self):
        def f(z):
            return [z[0] * z[1], z[1] ** 2, z[2] * z[3], deriv.exp(z[3])]

        mask = np.array([[1, 1, 0, 0], [0, 1, 0, 0], [0, 0, 1, 1], [0, 0, 0, 1]], dtype=bool)
        pat = deriv.SparsityPattern.from_dense(mask)
        x = np.array([1.0, 2.0, 3.0, 0.5])
        J = deriv.jacobian(f, x, pat, debug=True)
        assert J.n_passes == 2
        np.testing.assert_allclose(J.to_dense(), deriv.jacobian(f, x).to_dense(), rtol=1e-15)

    def test_pattern_violation_detected(self):
        pat = deriv.SparsityPattern.from_dense(np.eye(2, dtype=bool))
        with pytest.raises(deriv.PatternError):
            deriv.jacobian(lambda z: [z[0] * z[1], z[1]], np.array([1.0, 2.0]), pat, debug=True)


class TestHessian:
    def test_quadratic_form(self):
        A = np.array([[2.0, 1.0], [1.0, 4.0]])
        H = deriv.hessian(lambda z: 0.5 * (A[0, 0] * z[0] * z[0] + 2 * A[0, 1] * z[0] * z[1] + A[1, 1] * z[1] * z[1]),
                          np.array([0.3, -0.7]))
        np.testing.assert_allclose(H, A, rtol=1e-14)

    def test_rosenbrock(self):
        x, y = 0.8, 1.3
        H = deriv.hessian(lambda z: (1 - z[0]) ** 2 + 100 * (z[1] - z[0] ** 2) ** 2, np.array([x, y]))
        ref = np.array([[2 - 400 * (y - 3 * x * x), -400 * x], [-400 * x, 200]])
        np.testing.assert_allclose(H, ref, rtol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.lists(st.floats(0.5, 2.0), min_size=3, max_size=3))
    def test_symmetric_and_matches_fd_of_gradient(self, x):
        x = np.array(x)

        def f(z):
            return z[0] * deriv.exp(z[1] / z[2]) + deriv.log(z[0] * z[2])

        H = deriv.hessian(f, x)
        np.testing.assert_allclose(H, H.T, rtol=1e-14)
        grad = lambda z: deriv.jacobian(f, z).to_dense().ravel()
        np.testing.assert_allclose(H, deriv.fd_jacobian(grad, x), rtol=1e-5, atol=1e-7)
