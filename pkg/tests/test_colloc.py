import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from williams_otto import colloc, model


def decay(x, U, t):
    return [-x[0]]


def forced(x, U, t):
    # x' = u(t), integrates a piecewise-constant control exactly
    return [U[:, 0] + 0.0 * x[0]]


class TestBasis:
    @pytest.mark.parametrize("K", [1, 2, 3, 4, 5])
    def test_quadrature_exactness(self, K):
        b = colloc.radau_basis(K)
        # Radau quadrature integrates polynomials up to degree 2K - 2 exactly
        for p in range(2 * K - 1):
            assert b.quad_weights @ b.nodes ** p == pytest.approx(1.0 / (p + 1), rel=1e-12)
        assert b.nodes[-1] == 1.0

    def test_known_nodes(self):
        b = colloc.radau_basis(3)
        s6 = np.sqrt(6.0)
        np.testing.assert_allclose(b.nodes, [(4 - s6) / 10, (4 + s6) / 10, 1.0], rtol=1e-14)

    @pytest.mark.parametrize("K", [1, 2, 3, 4, 5])
    def test_differentiation_exact_on_polynomials(self, K):
        b = colloc.radau_basis(K)
        for p in range(K + 1):
            np.testing.assert_allclose(b.diff_matrix @ b.points ** p, p * b.nodes ** max(p - 1, 0) if p else 0.0,
                                       atol=1e-12)

    @pytest.mark.parametrize("K", [0, 6, 2.5])
    def test_rejects_unsupported(self, K):
        with pytest.raises(ValueError):
            colloc.radau_basis(K)


class TestMesh:
    def test_uniform(self):
        m = colloc.Mesh.uniform(0.0, 2.0, 4)
        np.testing.assert_allclose(m.element_lengths, 0.5)
        assert m.element_of(0.75) == 1
        assert m.element_of(2.0) == 3

    def test_with_breaks(self):
        m = colloc.Mesh.uniform(0.0, 10.0, 3).with_breaks([5.0])
        assert 5.0 in m.breakpoints
        assert m.n_elements == 3

    @pytest.mark.parametrize("b", [[0.0], [0.0, 1.0, 1.0], [1.0, 0.0]])
    def test_invalid(self, b):
        with pytest.raises(ValueError):
            colloc.Mesh(np.array(b))


class TestSimulate:
    def test_order_of_convergence(self):
        basis = colloc.radau_basis(3)
        errs = []
        for N in (5, 10, 20, 40):
            tr = colloc.simulate(decay, [1.0], None, colloc.Mesh.uniform(0.0, 1.0, N), basis)
            errs.append(abs(tr.final_state[0] - np.exp(-1.0)))
        ratios = np.array(errs[:-1]) / np.array(errs[1:])
        assert np.all(ratios >= 2 ** 4)

    def test_piecewise_controls_exact(self):
        prof = colloc.step_profile([1.0], [3.0], 2.0)
        mesh = colloc.Mesh.uniform(0.0, 5.0, 7).with_breaks([2.0])
        tr = colloc.simulate(forced, [0.0], prof, mesh, colloc.radau_basis(2))
        assert tr.final_state[0] == pytest.approx(2.0 + 3.0 * 3.0, rel=1e-12)

    def test_steady_start_stays_flat(self):
        x = model.find_steady_state(model.U_STAR).as_array()

        def ode(xs, U, t):
            return model.rhs_components(xs, [U[:, i] for i in range(5)])

        tr = colloc.simulate(ode, x, colloc.ConstantProfile(model.U_STAR.as_array()),
                             colloc.Mesh.uniform(0.0, 50.0, 50), colloc.radau_basis(3))
        assert np.abs(tr.sample_states() - x).max() < 1e-9

    def test_newton_failure_reported(self):
        def blowup(x, U, t):
            return [x[0] * x[0] * 1e6]

        with pytest.raises(colloc.CollocationError):
            colloc.simulate(blowup, [1.0], None, colloc.Mesh.uniform(0.0, 1.0, 1), colloc.radau_basis(3), max_iter=5)


class TestTrajectory:
    @pytest.fixture
    def traj(self):
        return colloc.simulate(decay, [2.0], None, colloc.Mesh.uniform(0.0, 1.0, 8), colloc.radau_basis(3),
                               state_names=("x",))

    def test_sample_times_increasing(self, traj):
        t = traj.sample_times()
        assert t[0] == 0.0 and t[-1] == 1.0
        assert np.all(np.diff(t) > 0)
        assert traj.sample_states().shape == (t.size, 1)

    def test_eval_at_nodes_and_between(self, traj):
        for t in (0.0, 0.3, 0.5, 1.0):
            assert colloc.eval(traj, t)[0] == pytest.approx(2.0 * np.exp(-t), rel=1e-6)
        np.testing.assert_allclose(colloc.eval(traj, traj.node_times[2, 1]), traj.states[2, 2])

    def test_integrate(self, traj):
        assert traj.integrate(np.ones(traj.node_times.shape)) == pytest.approx(1.0, rel=1e-14)
        assert traj.integrate(traj.node_states[:, :, 0]) == pytest.approx(2.0 * (1 - np.exp(-1.0)), rel=1e-7)

    def test_concat(self, traj):
        tail = colloc.simulate(decay, traj.final_state, None, colloc.Mesh.uniform(1.0, 2.0, 8), colloc.radau_basis(3))
        joined = colloc.concat(traj, tail)
        assert joined.mesh.n_elements == 16
        assert joined.final_state[0] == pytest.approx(2.0 * np.exp(-2.0), rel=1e-7)
        with pytest.raises(ValueError):
            colloc.concat(tail, traj)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 5.0), st.integers(1, 5))
def test_linear_decay_interpolant_is_continuous(rate, K):
    def ode(x, U, t):
        return [-rate * x[0]]

    tr = colloc.simulate(ode, [1.0], None, colloc.Mesh.uniform(0.0, 1.0, 6), colloc.radau_basis(K))
    # each element starts where the previous one ended
    np.testing.assert_array_equal(tr.states[1:, 0], tr.states[:-1, -1])
    assert 0.0 < tr.final_state[0] < 1.0
