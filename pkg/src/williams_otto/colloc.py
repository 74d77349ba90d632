"""Radau IIA orthogonal collocation on finite elements.

Each element ``[t_j, t_j + h_j]`` carries its initial state plus ``K`` node
states at ``t_j + c_k h_j`` with ``c_K = 1``. Within an element the state is
the degree-``K`` polynomial through these ``K + 1`` points, and the ODE is
enforced at the ``K`` nodes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial import legendre

from . import deriv

MAX_POINTS = 5


class CollocationError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class CollocationBasis:
    K: int
    nodes: np.ndarray
    quad_weights: np.ndarray
    diff_matrix: np.ndarray

    @property
    def points(self):
        """Interpolation points of an element: 0 followed by the nodes."""
        return np.concatenate(([0.0], self.nodes))

    def lagrange(self, tau):
        """Values of the ``K + 1`` Lagrange polynomials on :attr:`points` at ``tau``."""
        return _lagrange_values(self.points, np.atleast_1d(np.asarray(tau, dtype=float)))

    def node_lagrange(self, tau):
        """Lagrange polynomials through the ``K`` nodes only (control splines)."""
        return _lagrange_values(self.nodes, np.atleast_1d(np.asarray(tau, dtype=float)))


def _lagrange_values(points, tau):
    n = points.size
    out = np.ones((tau.size, n))
    for l in range(n):
        for m in range(n):
            if m != l:
                out[:, l] *= (tau - points[m]) / (points[l] - points[m])
    return out


def _lagrange_derivative_at(points, x):
    """d/dt of each Lagrange polynomial on ``points`` evaluated at ``x``."""
    n = points.size
    out = np.zeros(n)
    for l in range(n):
        total = 0.0
        for i in range(n):
            if i == l:
                continue
            prod = 1.0 / (points[l] - points[i])
            for m in range(n):
                if m != l and m != i:
                    prod *= (x - points[m]) / (points[l] - points[m])
            total += prod
        out[l] = total
    return out


@lru_cache(maxsize=None)
def radau_basis(K):
    """Radau IIA collocation data for ``K`` points per element."""
    if not isinstance(K, (int, np.integer)) or not 1 <= K <= MAX_POINTS:
        raise ValueError(f"unsupported number of collocation points {K!r}; need 1..{MAX_POINTS}")
    K = int(K)
    # right Radau points: zeros of P_K - P_{K-1} on [-1, 1], mapped to (0, 1]
    coef = np.zeros(K + 1)
    coef[K] = 1.0
    coef[K - 1] = -1.0
    s = np.sort(legendre.legroots(coef).real)
    nodes = (s + 1.0) / 2.0
    nodes[-1] = 1.0

    # quadrature weights: integrals of the node Lagrange polynomials over [0, 1]
    weights = np.empty(K)
    for k in range(K):
        others = np.delete(nodes, k)
        poly = np.poly1d(np.poly(others)) / np.prod(nodes[k] - others) if K > 1 else np.poly1d([1.0])
        integ = poly.integ()
        weights[k] = integ(1.0) - integ(0.0)

    pts = np.concatenate(([0.0], nodes))
    D = np.array([_lagrange_derivative_at(pts, nodes[k]) for k in range(K)])
    for a in (nodes, weights, D):
        a.setflags(write=False)
    return CollocationBasis(K=K, nodes=nodes, quad_weights=weights, diff_matrix=D)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Finite-element partition of ``[t0, tf]``."""

    breakpoints: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.breakpoints, dtype=float)
        if b.ndim != 1 or b.size < 2:
            raise ValueError("a mesh needs at least one element")
        if not np.all(np.diff(b) > 0):
            raise ValueError("element lengths must be positive")
        b.setflags(write=False)
        object.__setattr__(self, "breakpoints", b)

    @classmethod
    def uniform(cls, t0, tf, n_elements):
        if int(n_elements) < 1:
            raise ValueError("n_elements must be >= 1")
        if not tf > t0:
            raise ValueError("tf must exceed t0")
        return cls(np.linspace(t0, tf, int(n_elements) + 1))

    @classmethod
    def from_lengths(cls, t0, lengths):
        lengths = np.asarray(lengths, dtype=float)
        if np.any(lengths <= 0):
            raise ValueError("element lengths must be positive")
        return cls(np.concatenate(([t0], t0 + np.cumsum(lengths))))

    @property
    def t0(self):
        return float(self.breakpoints[0])

    @property
    def tf(self):
        return float(self.breakpoints[-1])

    @property
    def element_lengths(self):
        return np.diff(self.breakpoints)

    @property
    def n_elements(self):
        return self.breakpoints.size - 1

    def snap(self, t):
        """Nearest element boundary to ``t``."""
        return float(self.breakpoints[np.argmin(np.abs(self.breakpoints - t))])

    def with_breaks(self, times):
        """Copy of this mesh with the boundary nearest to each time moved onto it."""
        b = self.breakpoints.copy()
        for t in times:
            if not self.t0 < t < self.tf:
                continue
            i = int(np.argmin(np.abs(b - t)))
            if 0 < i < b.size - 1:
                b[i] = t
        return Mesh(b)

    def node_times(self, basis):
        """``(N, K)`` array of node times; last node of each element is its right boundary."""
        h = self.element_lengths
        t = self.breakpoints[:-1, None] + h[:, None] * basis.nodes[None, :]
        t[:, -1] = self.breakpoints[1:]
        return t

    def element_of(self, t):
        if t < self.t0 or t > self.tf:
            raise ValueError(f"t={t} outside horizon [{self.t0}, {self.tf}]")
        j = int(np.searchsorted(self.breakpoints, t, side="left")) - 1
        return min(max(j, 0), self.n_elements - 1)


@dataclass(eq=False)
class DiscreteTrajectory:
    """Piecewise-polynomial state record on a collocation mesh.

    ``states`` has shape ``(N, K + 1, n)``: index 0 along the second axis is
    the element's initial state, indices 1..K the node states. ``controls``
    has shape ``(N, K, n_controls)`` holding control values at the nodes.
    """

    mesh: Mesh
    basis: CollocationBasis
    states: np.ndarray
    controls: np.ndarray | None = None
    state_names: tuple = ()
    control_names: tuple = ()

    @property
    def n_states(self):
        return self.states.shape[-1]

    @property
    def node_times(self):
        return self.mesh.node_times(self.basis)

    @property
    def final_state(self):
        return self.states[-1, -1].copy()

    @property
    def node_states(self):
        return self.states[:, 1:, :]

    def sample_times(self):
        """Start time followed by every collocation node time."""
        return np.concatenate(([self.mesh.t0], self.node_times.ravel()))

    def sample_states(self):
        return np.concatenate((self.states[0, :1], self.states[:, 1:].reshape(-1, self.n_states)))

    def sample_controls(self):
        """Controls aligned with :meth:`sample_times` (the start row repeats the first node)."""
        if self.controls is None:
            return None
        c = self.controls.reshape(-1, self.controls.shape[-1])
        return np.concatenate((c[:1], c))

    def integrate(self, node_values):
        """Radau quadrature of per-node values shaped ``(N, K)``."""
        node_values = np.asarray(node_values, dtype=float)
        h = self.mesh.element_lengths
        return float(np.sum(h[:, None] * self.basis.quad_weights[None, :] * node_values))


def eval(traj, t):
    """State at time ``t`` by Lagrange interpolation inside its element."""
    mesh = traj.mesh
    j = mesh.element_of(t)
    b0 = mesh.breakpoints[j]
    h = mesh.element_lengths[j]
    pts = traj.basis.points
    if t == mesh.breakpoints[j + 1]:
        return traj.states[j, -1].copy()
    if t == b0:
        return traj.states[j, 0].copy()
    tau = (t - b0) / h
    hit = np.nonzero(np.abs(pts - tau) <= 1e-13)[0]
    if hit.size:
        return traj.states[j, hit[0]].copy()
    L = traj.basis.lagrange(tau)[0]
    return L @ traj.states[j]


def eval_many(traj, times):
    return np.array([eval(traj, float(t)) for t in np.atleast_1d(times)])


def differentiate_element(basis, element_values, element_length):
    """Derivative estimates at the ``K`` nodes from ``K + 1`` element values."""
    if not element_length > 0:
        raise ValueError("element length must be positive")
    v = np.asarray(element_values, dtype=float)
    if v.shape[0] != basis.K + 1:
        raise ValueError(f"need {basis.K + 1} element values, got {v.shape[0]}")
    return np.tensordot(basis.diff_matrix, v, axes=(1, 0)) / element_length


class ConstantProfile:
    """Control profile holding one value for all times."""

    def __init__(self, u):
        self.u = np.atleast_1d(np.asarray(u, dtype=float))

    def __call__(self, t):
        t = np.atleast_1d(t)
        return np.broadcast_to(self.u, (t.size, self.u.size)).copy()

    @property
    def switch_times(self):
        return ()


class PiecewiseProfile:
    """Piecewise-constant profile: ``values[i]`` applies on ``(times[i-1], times[i]]``.

    ``times`` lists the switch instants; ``values`` has one more row than
    ``times``. A switch at ``t*`` keeps the old value at ``t*`` itself.
    """

    def __init__(self, times, values):
        self.times = np.atleast_1d(np.asarray(times, dtype=float))
        self.values = np.atleast_2d(np.asarray(values, dtype=float))
        if self.values.shape[0] != self.times.size + 1:
            raise ValueError("need len(times) + 1 value rows")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("switch times must increase")

    def __call__(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        scale = 1e-10 * max(1.0, float(np.abs(self.times).max(initial=0.0)))
        idx = np.searchsorted(self.times + scale, t, side="left")
        return self.values[idx].copy()

    @property
    def switch_times(self):
        return tuple(self.times)


def step_profile(u_before, u_after, t_step):
    return PiecewiseProfile([t_step], [u_before, u_after])


def _solve_element(ode, x_start, U, tn, h, basis, tol, max_iter, j):
    K = basis.K
    n = x_start.size
    D0 = basis.diff_matrix[:, 0]
    D1 = basis.diff_matrix[:, 1:]
    A = np.kron(D1, np.eye(n))
    Z = np.tile(x_start, (K, 1))
    res = np.inf
    for _ in range(max_iter + 1):
        comps = ode(deriv.seed_dual(Z), U, tn)
        F = np.stack([np.broadcast_to(c.value, (K,)) if isinstance(c, deriv.Dual) else np.broadcast_to(c, (K,))
                      for c in comps], axis=1)
        R = (D0[:, None] * x_start[None, :] + D1 @ Z) / h - F
        res = float(np.abs(R).max())
        if not np.isfinite(res):
            break
        if res <= tol:
            return Z, res
        dF = np.zeros((K, n, n))
        for i, c in enumerate(comps):
            if isinstance(c, deriv.Dual):
                dF[:, i, :] = np.broadcast_to(c.tangent, (K, n))
        J = A / h
        for k in range(K):
            J[k * n:(k + 1) * n, k * n:(k + 1) * n] -= dF[k]
        try:
            dz = np.linalg.solve(J, -R.ravel())
        except np.linalg.LinAlgError:
            break
        Z = Z + dz.reshape(K, n)
    raise CollocationError(f"Newton failed in element {j} (residual {res:.3e})")


def simulate(ode, x0, controls, mesh, basis, tol=1e-10, max_iter=50, state_names=(), control_names=()):
    """Integrate ``x' = ode(x, u, t)`` element by element.

    ``ode`` receives the state as a list of per-component arrays (or AD
    numbers) over the ``K`` nodes of an element, the control rows ``(K, nu)``
    and the node times; it returns a list of derivative components.
    ``controls`` is a callable mapping times to control rows, or ``None``.
    """
    x_start = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    n = x_start.size
    N, K = mesh.n_elements, basis.K
    tn_all = mesh.node_times(basis)
    U_all = None
    if controls is not None:
        U_all = np.asarray(controls(tn_all.ravel()), dtype=float).reshape(N, K, -1)
    states = np.empty((N, K + 1, n))
    h_all = mesh.element_lengths
    for j in range(N):
        U = U_all[j] if U_all is not None else np.zeros((K, 0))
        Z, _ = _solve_element(ode, x_start, U, tn_all[j], h_all[j], basis, tol, max_iter, j)
        states[j, 0] = x_start
        states[j, 1:] = Z
        x_start = Z[-1].copy()
    return DiscreteTrajectory(mesh, basis, states, U_all, tuple(state_names), tuple(control_names))


def concat(first, second):
    """Join two trajectories where ``second`` starts at ``first``'s final time."""
    if abs(first.mesh.tf - second.mesh.t0) > 1e-9 * max(1.0, abs(first.mesh.tf)):
        raise ValueError("trajectories are not adjacent in time")
    if first.basis.K != second.basis.K:
        raise ValueError("trajectories use different collocation bases")
    b = np.concatenate((first.mesh.breakpoints, second.mesh.breakpoints[1:]))
    ctrl = None
    if first.controls is not None and second.controls is not None:
        ctrl = np.concatenate((first.controls, second.controls))
    return DiscreteTrajectory(Mesh(b), first.basis, np.concatenate((first.states, second.states)), ctrl,
                              first.state_names, first.control_names)
