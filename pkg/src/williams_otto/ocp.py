"""Optimal control problems over the Williams-Otto model.

Problems are transcribed by Radau collocation (simultaneous approach) into an
:class:`~williams_otto.nlpsolve.NlpProblem`. The variable vector is laid out
as::

    [x_init (6) | element initial states (N x 6) | node states (N x K x 6)
     | control decisions | path-constraint slacks | integral-bound slack]

and the equality constraints as::

    [x_init - x0 (6) | linking (N x 6) | collocation (N x K x 6)
     | path rows | integral-bound row]

Collocation rows read ``sum_l D[k, l] X_{j,l} - h_j f(X_{j,k}, U_{j,k})``.
Objective integrals use the Radau quadrature of the mesh.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp

from . import colloc, deriv, model, nlpsolve
from .model import CONTROL_NAMES, N_CONTROLS, N_STATES

MASS_LOWER = 1e-6
N_LOCAL = N_STATES + N_CONTROLS


class OcpError(ValueError):
    pass


# --- control profile shapes -------------------------------------------------

@dataclass(frozen=True)
class Fixed:
    value: float


@dataclass(frozen=True)
class Constant:
    lower: float
    upper: float
    initial: Optional[float] = None


@dataclass(frozen=True)
class PiecewiseConstant:
    lower: float
    upper: float
    initial: Optional[float] = None


@dataclass(frozen=True)
class Spline:
    """Free value at every collocation node, interpolated by the node polynomial."""

    lower: float
    upper: float
    initial: Optional[float] = None


ControlProfileShape = Union[Fixed, Constant, PiecewiseConstant, Spline]


def _guess_value(shape):
    if isinstance(shape, Fixed):
        return shape.value
    if shape.initial is not None:
        return shape.initial
    return 0.5 * (shape.lower + shape.upper)


# --- objectives ------------------------------------------------------------

@dataclass(frozen=True)
class IntegralOfStream:
    """``sign * integral(stream)``; use ``sign=-1`` to maximize."""

    stream: str
    sign: float = 1.0


@dataclass(frozen=True)
class WeightedSum:
    terms: tuple  # of (weight, IntegralOfStream)


@dataclass(frozen=True)
class Tracking:
    """Squared tracking error from ``t_start`` on plus ``alpha * |x'(tf)|^2``."""

    targets: tuple  # of (quantity, setpoint)
    t_start: float = 0.0
    alpha: float = 1.0


Objective = Union[IntegralOfStream, WeightedSum, Tracking]


@dataclass(frozen=True)
class OcProblem:
    tf: float
    x0: tuple
    controls: dict
    objective: Objective
    path_constraints: tuple = ()
    n_elements: int = 200
    n_points: int = 3
    t0: float = 0.0
    ffb_integral_max: Optional[float] = None
    ffb_penalty: float = 0.0
    constants: model.ModelConstants = model.DEFAULT_CONSTANTS

    def __post_init__(self):
        object.__setattr__(self, "x0", tuple(float(v) for v in np.asarray(self.x0, dtype=float).ravel()))
        object.__setattr__(self, "path_constraints", tuple((str(q), float(b)) for q, b in self.path_constraints))
        if len(self.x0) != N_STATES or min(self.x0) < 0 or sum(self.x0) <= 0:
            raise OcpError("x0 must hold six non-negative masses with positive total")
        missing = set(CONTROL_NAMES) - set(self.controls)
        extra = set(self.controls) - set(CONTROL_NAMES)
        if missing or extra:
            raise OcpError(f"controls must cover exactly {CONTROL_NAMES}; missing {sorted(missing)}, unknown {sorted(extra)}")
        for name, shape in self.controls.items():
            if not isinstance(shape, Fixed) and not shape.lower <= shape.upper:
                raise OcpError(f"bounds for {name} are inconsistent")
        if not self.tf > self.t0:
            raise OcpError("tf must exceed t0")
        if int(self.n_elements) < 1:
            raise OcpError("need at least one finite element")
        for q, _ in self.path_constraints:
            if q not in model.QUANTITIES:
                raise OcpError(f"unknown path-constraint quantity {q!r}")
        if self.ffb_integral_max is not None and isinstance(self.controls["F_fB"], Fixed):
            raise OcpError("an integral bound on F_fB needs F_fB to be free")
        _check_objective(self.objective)

    def mesh(self):
        return colloc.Mesh.uniform(self.t0, self.tf, self.n_elements)

    def basis(self):
        return colloc.radau_basis(self.n_points)


def _check_objective(obj):
    if isinstance(obj, IntegralOfStream):
        if obj.stream not in model.QUANTITIES:
            raise OcpError(f"unknown stream {obj.stream!r}")
        if not np.isfinite(obj.sign):
            raise OcpError("objective sign must be finite")
    elif isinstance(obj, WeightedSum):
        if not obj.terms:
            raise OcpError("weighted sum needs at least one term")
        for w, term in obj.terms:
            if not np.isfinite(w):
                raise OcpError("weights must be finite")
            _check_objective(term)
    elif isinstance(obj, Tracking):
        if not obj.targets:
            raise OcpError("tracking needs at least one target")
        for q, _ in obj.targets:
            if q not in model.QUANTITIES:
                raise OcpError(f"unknown tracked quantity {q!r}")
        if not obj.alpha >= 0:
            raise OcpError("alpha must be non-negative")
    else:
        raise OcpError(f"unsupported objective {obj!r}")


def _linear_terms(obj):
    """Flatten an objective into ``[(coefficient, stream), ...]`` (minimization)."""
    if isinstance(obj, IntegralOfStream):
        return [(float(obj.sign), obj.stream)]
    if isinstance(obj, WeightedSum):
        out = []
        for w, term in obj.terms:
            out += [(w * c, s) for c, s in _linear_terms(term)]
        return out
    return []


# --- layout -----------------------------------------------------------------

@dataclass
class Layout:
    """Index bookkeeping between the NLP vector and the trajectory."""

    N: int
    K: int
    n: int
    m: int
    idx_xinit: np.ndarray
    idx_X0: np.ndarray
    idx_X: np.ndarray
    ctrl_idx: np.ndarray          # (N, K, 5), -1 where fixed
    ctrl_fixed: np.ndarray        # (5,) values for fixed controls (nan if free)
    ctrl_vars: dict               # name -> array of variable indices
    idx_slack: np.ndarray         # (n_path, N, K)
    idx_int_slack: int
    row_init: np.ndarray
    row_link: np.ndarray
    row_colloc: np.ndarray
    row_path: np.ndarray
    row_int: int
    lower: np.ndarray
    upper: np.ndarray

    @property
    def n_state_vars(self):
        return N_STATES * (self.N * self.K + self.N + 1)

    @property
    def n_control_vars(self):
        return sum(v.size for v in self.ctrl_vars.values())

    def node_states(self, z):
        return z[self.idx_X]

    def node_controls(self, z):
        U = np.where(self.ctrl_idx >= 0, z[np.maximum(self.ctrl_idx, 0)], self.ctrl_fixed[None, None, :])
        return U


def _build_layout(ocp):
    N, K = int(ocp.n_elements), int(ocp.n_points)
    pos = 0

    def take(count):
        nonlocal pos
        out = np.arange(pos, pos + count)
        pos += count
        return out

    idx_xinit = take(N_STATES)
    idx_X0 = take(N * N_STATES).reshape(N, N_STATES)
    idx_X = take(N * K * N_STATES).reshape(N, K, N_STATES)
    ctrl_idx = np.full((N, K, N_CONTROLS), -1, dtype=np.int64)
    ctrl_fixed = np.full(N_CONTROLS, np.nan)
    ctrl_vars = {}
    lo, hi = [], []
    for c, name in enumerate(CONTROL_NAMES):
        shape = ocp.controls[name]
        if isinstance(shape, Fixed):
            ctrl_fixed[c] = shape.value
            continue
        if isinstance(shape, Constant):
            v = take(1)
            ctrl_idx[:, :, c] = v[0]
        elif isinstance(shape, PiecewiseConstant):
            v = take(N)
            ctrl_idx[:, :, c] = v[:, None]
        elif isinstance(shape, Spline):
            v = take(N * K)
            ctrl_idx[:, :, c] = v.reshape(N, K)
        else:
            raise OcpError(f"unsupported control shape for {name}: {shape!r}")
        ctrl_vars[name] = v
    idx_slack = take(len(ocp.path_constraints) * N * K).reshape(len(ocp.path_constraints), N, K)
    idx_int_slack = int(take(1)[0]) if ocp.ffb_integral_max is not None else -1
    n = pos

    lower = np.full(n, -np.inf)
    upper = np.full(n, np.inf)
    # element start states are pinned by equalities; only nodes enter the rates
    lower[idx_X.ravel()] = MASS_LOWER
    for c, name in enumerate(CONTROL_NAMES):
        if name in ctrl_vars:
            lower[ctrl_vars[name]] = ocp.controls[name].lower
            upper[ctrl_vars[name]] = ocp.controls[name].upper
    lower[idx_slack.ravel()] = 0.0
    if idx_int_slack >= 0:
        lower[idx_int_slack] = 0.0

    rpos = 0

    def rows(count):
        nonlocal rpos
        out = np.arange(rpos, rpos + count)
        rpos += count
        return out

    row_init = rows(N_STATES)
    row_link = rows(N * N_STATES).reshape(N, N_STATES)
    row_colloc = rows(N * K * N_STATES).reshape(N, K, N_STATES)
    row_path = rows(len(ocp.path_constraints) * N * K).reshape(len(ocp.path_constraints), N, K)
    row_int = int(rows(1)[0]) if ocp.ffb_integral_max is not None else -1
    return Layout(N, K, n, rpos, idx_xinit, idx_X0, idx_X, ctrl_idx, ctrl_fixed, ctrl_vars, idx_slack,
                  idx_int_slack, row_init, row_link, row_colloc, row_path, row_int, lower, upper)


# --- transcription ----------------------------------------------------------

class _Transcription:
    def __init__(self, ocp):
        self.ocp = ocp
        self.c = ocp.constants
        self.mesh = ocp.mesh()
        self.basis = ocp.basis()
        self.L = _build_layout(ocp)
        L = self.L
        N, K = L.N, L.K
        h = self.mesh.element_lengths
        self.h = h
        self.h_nodes = np.repeat(h, K)
        self.node_t = self.mesh.node_times(self.basis).ravel()
        w = (h[:, None] * self.basis.quad_weights[None, :]).ravel()
        self.quad = w
        obj = ocp.objective
        self.lin_terms = _linear_terms(obj)
        self.track = obj if isinstance(obj, Tracking) else None
        self.track_w = np.zeros_like(w)
        self.term_w = np.zeros_like(w)
        if self.track is not None:
            self.track_w = np.where(self.node_t > self.track.t_start + 1e-9 * max(1.0, abs(self.track.t_start)), w, 0.0)
            self.term_w[-1] = self.track.alpha
        self.ffb_w = ocp.ffb_penalty * w
        self.x0 = np.asarray(ocp.x0)

        # local variable -> global variable map for each node, -1 if fixed
        P = N * K
        self.local_idx = np.concatenate(
            (L.idx_X.reshape(P, N_STATES), L.ctrl_idx.reshape(P, N_CONTROLS)), axis=1)
        self._build_constant_jacobian()
        self._cache_key = None
        self._cache = None

    # -- node functions --
    def _node_terms(self, xs, us):
        """Collocation rhs, path quantities and objective integrand at the nodes."""
        c = self.c
        f = model.rhs_components(xs, us, c)
        path = [model.quantity(q, xs, us, c) - ub for q, ub in self.ocp.path_constraints]
        g = 0.0
        for coef, stream in self.lin_terms:
            g = g + coef * model.quantity(stream, xs, us, c)
        return f, path, g

    def _track_terms(self, xs, us):
        err = 0.0
        for q, sp_val in self.track.targets:
            e = model.quantity(q, xs, us, self.c) - sp_val
            err = err + e * e
        return err

    def _split(self, z):
        L = self.L
        Xn = z[L.idx_X].reshape(-1, N_STATES)
        Un = L.node_controls(z).reshape(-1, N_CONTROLS)
        return Xn, Un

    def _eval_first(self, z):
        key = z.tobytes()
        if key == self._cache_key:
            return self._cache
        Xn, Un = self._split(z)
        V = deriv.seed_dual(np.concatenate((Xn, Un), axis=1))
        xs, us = V[:N_STATES], V[N_STATES:]
        f, path, g = self._node_terms(xs, us)
        P = Xn.shape[0]

        def val(a):
            return np.broadcast_to(a.value if isinstance(a, deriv.Dual) else a, (P,))

        def tan(a):
            return np.broadcast_to(a.tangent, (P, N_LOCAL)) if isinstance(a, deriv.Dual) else np.zeros((P, N_LOCAL))

        F = np.stack([val(a) for a in f], axis=1)
        dF = np.stack([tan(a) for a in f], axis=1)
        Q = np.stack([val(a) for a in path], axis=0) if path else np.zeros((0, P))
        dQ = np.stack([tan(a) for a in path], axis=0) if path else np.zeros((0, P, N_LOCAL))
        G = val(g) if not np.isscalar(g) else np.zeros(P)
        dG = tan(g) if isinstance(g, deriv.Dual) else np.zeros((P, N_LOCAL))
        T = dT = None
        if self.track is not None:
            t = self._track_terms(xs, us)
            T, dT = val(t), tan(t)
        fb = Un[:, CONTROL_NAMES.index("F_fB")]
        self._cache_key = key
        self._cache = (Xn, Un, F, dF, Q, dQ, G, dG, T, dT, fb)
        return self._cache

    # -- NLP callbacks --
    def objective(self, z):
        Xn, Un = self._split(z)
        f, path, g = self._node_terms(list(Xn.T), list(Un.T))
        total = float(np.sum(self.quad * np.broadcast_to(g, self.quad.shape)))
        if self.track is not None:
            total += float(np.sum(self.track_w * self._track_terms(list(Xn.T), list(Un.T))))
            F_last = np.array([float(np.asarray(a)[-1]) for a in f])
            total += self.track.alpha * float(F_last @ F_last)
        if self.ocp.ffb_penalty:
            total += float(np.sum(self.ffb_w * Un[:, CONTROL_NAMES.index("F_fB")]))
        return total

    def gradient(self, z):
        Xn, Un, F, dF, Q, dQ, G, dG, T, dT, fb = self._eval_first(z)
        local = self.quad[:, None] * dG
        if self.track is not None:
            local = local + self.track_w[:, None] * dT
            local[-1] += self.track.alpha * 2.0 * (F[-1] @ dF[-1])
        if self.ocp.ffb_penalty:
            local[:, N_STATES + CONTROL_NAMES.index("F_fB")] += self.ffb_w
        grad = np.zeros(self.L.n)
        mask = self.local_idx >= 0
        np.add.at(grad, self.local_idx[mask], local[mask])
        return grad

    def constraints(self, z):
        L = self.L
        Xn, Un = self._split(z)
        f, path, g = self._node_terms(list(Xn.T), list(Un.T))
        F = np.stack([np.broadcast_to(a, (Xn.shape[0],)) for a in f], axis=1)
        return self._assemble_constraints(z, F, path)

    def _assemble_constraints(self, z, F, path):
        L, N, K = self.L, self.L.N, self.L.K
        out = np.empty(L.m)
        out[L.row_init] = z[L.idx_xinit] - self.x0
        prev = np.concatenate((z[L.idx_xinit][None, :], z[L.idx_X[:-1, -1, :]]), axis=0)
        out[L.row_link] = z[L.idx_X0] - prev
        D = self.basis.diff_matrix
        Xall = np.concatenate((z[L.idx_X0][:, None, :], z[L.idx_X]), axis=1)  # (N, K+1, 6)
        DX = np.einsum("kl,jli->jki", D, Xall)
        out[L.row_colloc] = DX - self.h[:, None, None] * F.reshape(N, K, N_STATES)
        for p in range(len(self.ocp.path_constraints)):
            out[L.row_path[p]] = np.asarray(path[p]).reshape(N, K) + z[L.idx_slack[p]]
        if L.row_int >= 0:
            fb = L.node_controls(z)[:, :, CONTROL_NAMES.index("F_fB")].ravel()
            out[L.row_int] = float(np.sum(self.quad * fb)) + z[L.idx_int_slack] - self.ocp.ffb_integral_max
        return out

    def _build_constant_jacobian(self):
        L, N, K = self.L, self.L.N, self.L.K
        D = self.basis.diff_matrix
        r, c, v = [], [], []
        r.append(L.row_init)
        c.append(L.idx_xinit)
        v.append(np.ones(N_STATES))
        r.append(L.row_link.ravel())
        c.append(L.idx_X0.ravel())
        v.append(np.ones(N * N_STATES))
        prev = np.concatenate((L.idx_xinit[None, :], L.idx_X[:-1, -1, :]), axis=0)
        r.append(L.row_link.ravel())
        c.append(prev.ravel())
        v.append(-np.ones(N * N_STATES))
        Xall = np.concatenate((L.idx_X0[:, None, :], L.idx_X), axis=1)  # (N, K+1, 6)
        for k in range(K):
            for l in range(K + 1):
                r.append(L.row_colloc[:, k, :].ravel())
                c.append(Xall[:, l, :].ravel())
                v.append(np.full(N * N_STATES, D[k, l]))
        for p in range(len(self.ocp.path_constraints)):
            r.append(L.row_path[p].ravel())
            c.append(L.idx_slack[p].ravel())
            v.append(np.ones(N * K))
        if L.row_int >= 0:
            r.append(np.array([L.row_int]))
            c.append(np.array([L.idx_int_slack]))
            v.append(np.ones(1))
            fb_idx = L.ctrl_idx[:, :, CONTROL_NAMES.index("F_fB")].ravel()
            r.append(np.full(fb_idx.size, L.row_int))
            c.append(fb_idx)
            v.append(self.quad.copy())
        self.jc_rows = np.concatenate(r)
        self.jc_cols = np.concatenate(c)
        self.jc_vals = np.concatenate(v)

        # nonlinear part: collocation rows (P, 6 outputs, 11 locals) then path rows
        P = N * K
        rows_f = np.broadcast_to(L.row_colloc.reshape(P, N_STATES)[:, :, None], (P, N_STATES, N_LOCAL))
        cols_f = np.broadcast_to(self.local_idx[:, None, :], (P, N_STATES, N_LOCAL))
        mask_f = cols_f >= 0
        self.jf_rows, self.jf_cols, self.jf_mask = rows_f[mask_f], cols_f[mask_f], mask_f
        npath = len(self.ocp.path_constraints)
        rows_q = np.broadcast_to(L.row_path.reshape(npath, P)[:, :, None], (npath, P, N_LOCAL))
        cols_q = np.broadcast_to(self.local_idx[None, :, :], (npath, P, N_LOCAL))
        mask_q = cols_q >= 0
        self.jq_rows, self.jq_cols, self.jq_mask = rows_q[mask_q], cols_q[mask_q], mask_q

        # Hessian pattern: dense 11 x 11 block per node
        rr = np.broadcast_to(self.local_idx[:, :, None], (P, N_LOCAL, N_LOCAL))
        cc = np.broadcast_to(self.local_idx[:, None, :], (P, N_LOCAL, N_LOCAL))
        self.h_mask = (rr >= 0) & (cc >= 0)
        self.h_rows, self.h_cols = rr[self.h_mask], cc[self.h_mask]

    def jacobian(self, z):
        Xn, Un, F, dF, Q, dQ, G, dG, T, dT, fb = self._eval_first(z)
        vf = (-self.h_nodes[:, None, None] * dF)[self.jf_mask]
        vq = dQ[self.jq_mask]
        rows = np.concatenate((self.jc_rows, self.jf_rows, self.jq_rows))
        cols = np.concatenate((self.jc_cols, self.jf_cols, self.jq_cols))
        vals = np.concatenate((self.jc_vals, vf, vq))
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.L.m, self.L.n))

    def hessian(self, z, lam, obj_factor):
        L = self.L
        Xn, Un = self._split(z)
        P = Xn.shape[0]
        V = deriv.seed_taylor2(np.concatenate((Xn, Un), axis=1))
        xs, us = V[:N_STATES], V[N_STATES:]
        f, path, g = self._node_terms(xs, us)
        lam_f = lam[L.row_colloc.reshape(P, N_STATES)] * (-self.h_nodes[:, None])
        S = 0.0
        for i in range(N_STATES):
            S = S + f[i] * lam_f[:, i]
        for p in range(len(path)):
            S = S + path[p] * lam[L.row_path[p].ravel()]
        if isinstance(g, deriv.Taylor2):
            S = S + g * (obj_factor * self.quad)
        if self.track is not None:
            S = S + self._track_terms(xs, us) * (obj_factor * self.track_w)
            if self.track.alpha:
                last = [fi[P - 1] for fi in f]
                sq = last[0] * last[0]
                for fi in last[1:]:
                    sq = sq + fi * fi
                Hl = obj_factor * self.track.alpha * sq.hess
        if not isinstance(S, deriv.Taylor2):
            return sp.csr_matrix((L.n, L.n))
        Hn = np.broadcast_to(S.hess, (P, N_LOCAL, N_LOCAL)).copy()
        if self.track is not None and self.track.alpha:
            Hn[P - 1] += Hl
        return sp.csr_matrix((Hn[self.h_mask], (self.h_rows, self.h_cols)), shape=(L.n, L.n))

    def problem(self):
        return nlpsolve.NlpProblem(
            n=self.L.n, m=self.L.m, objective=self.objective, gradient=self.gradient,
            constraints=self.constraints, jacobian=self.jacobian, lower=self.L.lower, upper=self.L.upper,
            hessian=self.hessian, name="ocp",
        )


def transcribe_ocp(ocp):
    """Return ``(NlpProblem, Layout)`` for an :class:`OcProblem`."""
    tr = _Transcription(ocp)
    prob = tr.problem()
    prob.transcription = tr
    return prob, tr.L


def _ode_for(c):
    def ode(x, u, t):
        return model.rhs_components(x, [u[:, i] for i in range(N_CONTROLS)], c)
    return ode


def guess_controls(ocp):
    return np.array([_guess_value(ocp.controls[name]) for name in CONTROL_NAMES])


def initial_guess(ocp, layout=None):
    """Start vector: controls at their guesses, states simulated under them."""
    layout = layout or _build_layout(ocp)
    u = guess_controls(ocp)
    mesh, basis = ocp.mesh(), ocp.basis()
    traj = colloc.simulate(_ode_for(ocp.constants), np.asarray(ocp.x0), colloc.ConstantProfile(u), mesh, basis)
    return pack(ocp, layout, traj.states, np.broadcast_to(u, (layout.N, layout.K, N_CONTROLS)))


def pack(ocp, layout, states, node_controls):
    """Build an NLP vector from ``(N, K+1, 6)`` states and ``(N, K, 5)`` controls."""
    L = layout
    z = np.zeros(L.n)
    z[L.idx_xinit] = states[0, 0]
    z[L.idx_X0] = states[:, 0]
    z[L.idx_X] = states[:, 1:]
    for c, name in enumerate(CONTROL_NAMES):
        if name not in L.ctrl_vars:
            continue
        vals = node_controls[:, :, c]
        shape = ocp.controls[name]
        if isinstance(shape, Constant):
            z[L.ctrl_vars[name]] = vals.mean()
        elif isinstance(shape, PiecewiseConstant):
            z[L.ctrl_vars[name]] = vals.mean(axis=1)
        else:
            z[L.ctrl_vars[name]] = vals.ravel()
    Xn = states[:, 1:].reshape(-1, N_STATES)
    Un = node_controls.reshape(-1, N_CONTROLS)
    for p, (q, ub) in enumerate(ocp.path_constraints):
        val = model.quantity(q, list(Xn.T), list(Un.T), ocp.constants)
        z[L.idx_slack[p].ravel()] = np.maximum(ub - np.asarray(val), 1e-3)
    if L.idx_int_slack >= 0:
        w = (ocp.mesh().element_lengths[:, None] * ocp.basis().quad_weights[None, :]).ravel()
        fb = Un[:, CONTROL_NAMES.index("F_fB")]
        z[L.idx_int_slack] = max(ocp.ffb_integral_max - float(w @ fb), 1e-3)
    return z


# --- solutions --------------------------------------------------------------

@dataclass
class OcSolution:
    trajectory: colloc.DiscreteTrajectory
    objective: float
    integrals: dict
    result: nlpsolve.SolveResult
    max_path_violation: float = 0.0
    pre_trajectory: Optional[colloc.DiscreteTrajectory] = None
    extras: dict = field(default_factory=dict)

    @property
    def success(self):
        return self.result.success

    def full_trajectory(self):
        if self.pre_trajectory is None:
            return self.trajectory
        return colloc.concat(self.pre_trajectory, self.trajectory)

    def control_profile(self, name):
        c = CONTROL_NAMES.index(name)
        return self.trajectory.node_times.ravel(), self.trajectory.controls[:, :, c].ravel()


def node_quantity(traj, name, c=model.DEFAULT_CONSTANTS):
    """Quantity values at the nodes, shaped ``(N, K)``."""
    Xn = traj.node_states.reshape(-1, N_STATES)
    Un = traj.controls.reshape(-1, N_CONTROLS)
    v = model.quantity(name, list(Xn.T), list(Un.T), c)
    return np.broadcast_to(np.asarray(v, dtype=float), (Xn.shape[0],)).reshape(traj.controls.shape[:2])


def trajectory_integrals(traj, c=model.DEFAULT_CONSTANTS):
    return {f"int_{q}": traj.integrate(node_quantity(traj, q, c)) for q in ("F_pP", "F_wG", "F_fB")}


def recover(ocp, layout, z):
    L = layout
    states = np.empty((L.N, L.K + 1, N_STATES))
    states[:, 0] = z[L.idx_X0]
    states[:, 1:] = z[L.idx_X]
    controls = L.node_controls(z)
    return colloc.DiscreteTrajectory(ocp.mesh(), ocp.basis(), states, controls,
                                     model.STATE_NAMES, CONTROL_NAMES)


def solve_ocp(ocp, opts=None, x_start=None):
    """Transcribe, solve and recover an optimal control problem."""
    t0 = time.perf_counter()
    prob, layout = transcribe_ocp(ocp)
    z0 = initial_guess(ocp, layout) if x_start is None else x_start
    res = nlpsolve.solve(prob, z0, opts or nlpsolve.SolveOptions())
    traj = recover(ocp, layout, res.x)
    integ = trajectory_integrals(traj, ocp.constants)
    viol = 0.0
    for q, ub in ocp.path_constraints:
        viol = max(viol, float((node_quantity(traj, q, ocp.constants) - ub).max()))
    sol = OcSolution(traj, res.objective, integ, res, max_path_violation=viol)
    sol.extras["total_time"] = time.perf_counter() - t0
    return sol


# --- scenario builders ------------------------------------------------------

BOX_F_FB = (0.0, 56.0)
BOX_T = (200.0, 800.0)


def _base_controls(ffb, temp):
    u = model.U_STAR
    return {"F_fA": Fixed(u.F_fA), "F_fB": ffb, "T": temp, "mu": Fixed(u.mu), "eta": Fixed(u.eta)}


def waste_min_problem(n_elements=200, n_points=3, tf=100.0):
    return OcProblem(
        tf=tf, x0=model.X_STAR.as_array(),
        controls=_base_controls(PiecewiseConstant(*BOX_F_FB, initial=model.U_STAR.F_fB),
                                Spline(*BOX_T, initial=model.U_STAR.T)),
        objective=IntegralOfStream("F_wG", 1.0), n_elements=n_elements, n_points=n_points,
    )


def yield_max_problem(n_elements=200, n_points=3, tf=100.0, waste_limit=1.0):
    return OcProblem(
        tf=tf, x0=model.X_STAR.as_array(),
        controls=_base_controls(Spline(*BOX_F_FB, initial=model.U_STAR.F_fB), Spline(*BOX_T, initial=model.U_STAR.T)),
        objective=IntegralOfStream("F_pP", -1.0), path_constraints=(("F_wG", waste_limit),),
        n_elements=n_elements, n_points=n_points,
    )


def combined_problem(n_elements=200, n_points=3, tf=100.0, alpha=1.0, beta=1.0):
    """Weighted yield-minus-waste objective with the waste-minimization setup."""
    return OcProblem(
        tf=tf, x0=model.X_STAR.as_array(),
        controls=_base_controls(PiecewiseConstant(*BOX_F_FB, initial=model.U_STAR.F_fB),
                                Spline(*BOX_T, initial=model.U_STAR.T)),
        objective=WeightedSum(((alpha, IntegralOfStream("F_pP", -1.0)), (beta, IntegralOfStream("F_wG", 1.0)))),
        n_elements=n_elements, n_points=n_points,
    )


CONTROL_BOXES = {"F_fB": BOX_F_FB, "T": BOX_T, "F_fA": (0.0, 20.0), "mu": (0.0, 259.0)}


def track_optimal(setpoints, free_controls=("F_fB",), t_star=100.0, tf=200.0, alpha=1.0, opts=None,
                  x0=model.X0_SIM, u_star=model.U_STAR, n_elements=200, n_points=3, bounds=None,
                  c=model.DEFAULT_CONSTANTS, pre_elements=None):
    """Setpoint tracking by optimal control.

    The controls are frozen at ``u_star`` on ``[0, t_star]``; that phase is
    fully determined and is simulated, and the optimal control problem is
    posed on ``[t_star, tf]`` from the simulated state.
    """
    setpoints = tuple((str(q), float(v)) for q, v in (setpoints.items() if isinstance(setpoints, dict) else setpoints))
    bounds = dict(CONTROL_BOXES, **(bounds or {}))
    u_vec = u_star.as_array() if isinstance(u_star, model.ControlInput) else np.asarray(u_star, dtype=float)
    x0v = x0.as_array() if isinstance(x0, model.ProcessState) else np.asarray(x0, dtype=float)
    basis = colloc.radau_basis(n_points)
    pre = None
    x_start = x0v
    if t_star > 0:
        h = (tf - t_star) / n_elements
        n_pre = pre_elements or max(1, int(round(t_star / h)))
        pre = colloc.simulate(_ode_for(c), x0v, colloc.ConstantProfile(u_vec), colloc.Mesh.uniform(0.0, t_star, n_pre),
                              basis, state_names=model.STATE_NAMES, control_names=CONTROL_NAMES)
        x_start = pre.final_state
    controls = {}
    for i, name in enumerate(CONTROL_NAMES):
        if name in free_controls:
            lo, hi = bounds[name]
            controls[name] = Spline(lo, hi, initial=float(u_vec[i]))
        else:
            controls[name] = Fixed(float(u_vec[i]))
    ocp = OcProblem(tf=tf, t0=t_star, x0=np.maximum(x_start, 0.0), controls=controls,
                    objective=Tracking(setpoints, t_start=t_star, alpha=alpha),
                    n_elements=n_elements, n_points=n_points, constants=c)
    sol = solve_ocp(ocp, opts)
    sol.pre_trajectory = pre
    sol.extras["ocp"] = ocp
    xf = sol.trajectory.final_state
    uf = sol.trajectory.controls[-1, -1]
    sol.extras["terminal_derivative"] = model.rhs(xf, uf, c)
    sol.extras["terminal_values"] = {q: float(model.quantity(q, xf, uf, c)) for q, _ in setpoints}
    return sol
