"""Primal-dual interior-point method for equality- and bound-constrained NLPs.

Solves::

    min f(x)  subject to  c(x) = 0,  l <= x <= u

with a logarithmic barrier on the bounds. Each iteration takes a Newton step
on the perturbed KKT conditions (condensed to the ``[x, lambda]`` block),
limits it by the fraction-to-the-boundary rule and globalizes with a
backtracking line search on the l1 merit function
``phi_mu(x) + nu * ||c(x)||_1``. The barrier parameter decreases monotonically.

The Lagrangian is ``f + lambda^T c - z_L^T (x - l) - z_U^T (u - x)``, so an
active upper bound carries a positive ``z_U``.
"""

from __future__ import annotations

import enum
import sys
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import qdldl

from . import deriv


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    ITER_LIMIT = "IterLimit"
    INFEASIBLE = "Infeasible"
    ERROR = "Error"


class SolverError(RuntimeError):
    """Unrecoverable failure inside the solver (bad callback, singular KKT)."""


@dataclass
class NlpProblem:
    """Callbacks describing ``min f(x) s.t. c(x) = 0, lower <= x <= upper``.

    ``jacobian`` returns an ``m x n`` matrix (scipy sparse or dense).
    ``hessian(x, lam, obj_factor)``, when given, returns the Lagrangian
    Hessian ``obj_factor * H_f + sum_i lam_i * H_ci``; otherwise a damped
    BFGS approximation is used.
    """

    n: int
    m: int
    objective: Callable
    gradient: Callable
    constraints: Callable
    jacobian: Callable
    lower: np.ndarray
    upper: np.ndarray
    hessian: Optional[Callable] = None
    name: str = ""

    def __post_init__(self):
        self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (self.n,)).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (self.n,)).copy()
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")


@dataclass
class SolveOptions:
    tol: float = 1e-8
    max_iter: int = 3000
    mu_init: float = 0.1
    mu_factor: float = 0.2
    bound_push: float = 1e-2
    dense_threshold: int = 500
    log: Optional[object] = None

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not 0 < self.mu_factor < 1 or not 0 < self.bound_push < 1:
            raise ValueError("mu_factor and bound_push must lie in (0, 1)")
        if not self.mu_init > 0 or int(self.max_iter) < 0:
            raise ValueError("mu_init must be positive and max_iter non-negative")


@dataclass
class SolveResult:
    x: np.ndarray
    lam: np.ndarray
    z_lower: np.ndarray
    z_upper: np.ndarray
    status: Status
    iterations: int
    kkt_residual: float
    objective: float
    wall_time: float
    constraint_violation: float = 0.0
    message: str = ""
    history: list = field(default_factory=list, repr=False)

    @property
    def success(self):
        return self.status is Status.OPTIMAL


@dataclass
class Multipliers:
    eq: np.ndarray
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None


def _to_csr(A, shape):
    if sp.issparse(A):
        return A.tocsr()
    return sp.csr_matrix(np.asarray(A, dtype=float).reshape(shape))


def kkt_residual(p, point, multipliers):
    """Infinity norm of stationarity, primal feasibility and complementarity."""
    x = np.asarray(point, dtype=float)
    if not isinstance(multipliers, Multipliers):
        multipliers = Multipliers(*multipliers) if isinstance(multipliers, tuple) else Multipliers(multipliers)
    lam = np.zeros(p.m) if multipliers.eq is None else np.asarray(multipliers.eq, dtype=float)
    zl = np.zeros(p.n) if multipliers.lower is None else np.asarray(multipliers.lower, dtype=float)
    zu = np.zeros(p.n) if multipliers.upper is None else np.asarray(multipliers.upper, dtype=float)
    if lam.shape != (p.m,) or zl.shape != (p.n,) or zu.shape != (p.n,) or x.shape != (p.n,):
        raise ValueError("dimension mismatch between problem, point and multipliers")
    g = np.asarray(p.gradient(x), dtype=float)
    J = _to_csr(p.jacobian(x), (p.m, p.n))
    c = np.asarray(p.constraints(x), dtype=float)
    return _kkt_parts(p, x, g, J, c, lam, zl, zu, 0.0)[3]


def _kkt_parts(p, x, g, J, c, lam, zl, zu, mu):
    has_l = np.isfinite(p.lower)
    has_u = np.isfinite(p.upper)
    stat = g + (J.T @ lam if p.m else 0.0) - zl + zu
    sl = np.where(has_l, x - p.lower, 0.0)
    su = np.where(has_u, p.upper - x, 0.0)
    comp_l = np.where(has_l, sl * zl - mu, 0.0)
    comp_u = np.where(has_u, su * zu - mu, 0.0)
    e_stat = float(np.abs(stat).max(initial=0.0))
    e_feas = float(np.abs(c).max(initial=0.0))
    e_comp = float(max(np.abs(comp_l).max(initial=0.0), np.abs(comp_u).max(initial=0.0)))
    return e_stat, e_feas, e_comp, max(e_stat, e_feas, e_comp)


class _Logger:
    def __init__(self, sink):
        self.sink = sink

    def __call__(self, line):
        if self.sink is None:
            return
        if callable(self.sink):
            self.sink(line)
        else:
            self.sink.write(line + "\n")


def _fraction_to_boundary(s, ds, tau):
    neg = ds < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-tau * s[neg] / ds[neg])))


class _Evaluator:
    """Evaluates callbacks and turns domain failures into ``None``."""

    def __init__(self, p):
        self.p = p
        self.n_f = 0

    def fc(self, x):
        self.n_f += 1
        try:
            with np.errstate(all="ignore"):
                f = float(self.p.objective(x))
                c = np.asarray(self.p.constraints(x), dtype=float).reshape(self.p.m)
        except (ArithmeticError, ValueError):
            return None
        if not np.isfinite(f) or not np.all(np.isfinite(c)):
            return None
        return f, c


def _least_squares_multipliers(J, rhs, n, m):
    if m == 0:
        return np.zeros(0)
    K = sp.bmat([[sp.identity(n), J.T], [J, -1e-12 * sp.identity(m)]], format="csc")
    try:
        sol = spla.splu(K).solve(np.concatenate((rhs, np.zeros(m))))
    except RuntimeError:
        return np.zeros(m)
    lam = sol[n:]
    if not np.all(np.isfinite(lam)) or np.abs(lam).max(initial=0.0) > 1e3:
        return np.zeros(m)
    return lam


_DELTA_C_FACTOR = 1e-8


def _refine(K, solve, r, max_steps=10):
    """Iterative refinement of ``K x = r`` using an approximate factorization."""
    x = solve(r)
    scale = max(1.0, float(np.abs(r).max()))
    for _ in range(max_steps):
        res = r - K @ x
        if float(np.abs(res).max()) <= 1e-14 * scale:
            break
        x = x + solve(res)
    return x


class _KKTSolver:
    """Factorizes the condensed KKT matrix with inertia correction."""

    def __init__(self, n, m, dense):
        self.n, self.m, self.dense = n, m, dense
        self.last_delta_w = 0.0
        self.last_solve = None

    def _factor(self, H, J, delta_w, delta_c):
        n, m = self.n, self.m
        top = H + delta_w * sp.identity(n, format="csr")
        if m:
            K = sp.bmat([[top, J.T], [J, -delta_c * sp.identity(m)]], format="csc")
        else:
            K = top.tocsc()
        if self.dense:
            Kd = K.toarray()
            try:
                lu, d, perm = sla.ldl(Kd, lower=True)
            except (ValueError, np.linalg.LinAlgError):
                return None, None
            ev = np.linalg.eigvalsh(d)
            n_pos = int(np.sum(ev > 0))
            n_neg = int(np.sum(ev < 0))
            if n_pos + n_neg < n + m:
                return "singular", None
            if n_pos != n or n_neg != m:
                return "inertia", None
            try:
                fac = sla.lu_factor(Kd)
            except (ValueError, np.linalg.LinAlgError):
                return "singular", None
            return "ok", lambda r: sla.lu_solve(fac, r)
        # the factorization does not pivot: a stronger negative block keeps its pivots (and signs) reliable,
        # and iterative refinement against the intended matrix removes the extra perturbation from the step
        K_fac = K
        if m and delta_c < _DELTA_C_FACTOR:
            K_fac = K - (_DELTA_C_FACTOR - delta_c) * sp.diags(np.r_[np.zeros(n), np.ones(m)], format="csc")
        try:
            fac = qdldl.Solver(K_fac.tocsc())
        except (ValueError, RuntimeError):
            return "singular", None
        d = fac.factors()[1]
        if not np.all(np.isfinite(d)):
            return "singular", None
        n_pos = int(np.sum(d > 0))
        n_neg = int(np.sum(d < 0))
        if n_pos + n_neg < n + m:
            return "singular", None
        if n_pos != n or n_neg != m:
            return "inertia", None
        if K_fac is K:
            return "ok", fac.solve
        return "ok", lambda r: _refine(K, fac.solve, r)

    def solve(self, H, J, rhs, mu, delta_min=0.0):
        """Return ``(dx, dlam, delta_w)``; raises SolverError if hopeless."""
        n, m = self.n, self.m
        delta_w = delta_min
        # the sparse LDL^T does not pivot, so keep the constraint block strictly negative
        delta_c = 0.0
        for attempt in range(60):
            state, solve = self._factor(H, J, delta_w, delta_c)
            if state == "singular":
                if delta_c < 1e-8 * mu ** 0.25 and m:
                    delta_c = 1e-8 * mu ** 0.25
                    continue
                state = "inertia"
            if state == "ok":
                sol = solve(rhs)
                if np.all(np.isfinite(sol)):
                    self.last_delta_w = delta_w
                    self.last_solve = solve
                    return sol[:n], sol[n:], delta_w
            if delta_w == 0.0:
                delta_w = 1e-8 if self.last_delta_w == 0.0 else max(1e-8, self.last_delta_w / 3.0)
            elif delta_w == delta_min and self.last_delta_w > delta_w:
                delta_w = max(10.0 * delta_w, self.last_delta_w / 3.0)
            else:
                delta_w *= 10.0
            if delta_w > 1e40:
                break
        raise SolverError("KKT system could not be regularized")


def _bfgs_update(B, s, y):
    """Powell-damped BFGS update of a dense Hessian approximation."""
    sBs = float(s @ B @ s)
    if sBs <= 1e-16 * max(1.0, float(s @ s)):
        return B
    sy = float(s @ y)
    if sy < 0.2 * sBs:
        theta = 0.8 * sBs / (sBs - sy)
        y = theta * y + (1 - theta) * (B @ s)
        sy = float(s @ y)
    Bs = B @ s
    return B - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy


def solve(p, x0, opts=None):
    """Run the interior-point iteration from ``x0``. Returns a :class:`SolveResult`."""
    opts = opts or SolveOptions()
    log = _Logger(opts.log)
    t_start = time.perf_counter()
    n, m = p.n, p.m
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape != (n,):
        raise ValueError(f"start point has {x0.size} entries, problem has {n} variables")
    if not np.all(np.isfinite(x0)):
        raise ValueError("start point must be finite")

    lower, upper = p.lower.copy(), p.upper.copy()
    fixed = lower == upper
    lower[fixed] -= 1e-8 * np.maximum(1.0, np.abs(lower[fixed]))
    upper[fixed] += 1e-8 * np.maximum(1.0, np.abs(upper[fixed]))
    has_l, has_u = np.isfinite(lower), np.isfinite(upper)

    # push start point strictly inside
    k1 = opts.bound_push
    x = x0.copy()
    width = np.where(has_l & has_u, upper - lower, np.inf)
    pl = np.where(has_l, np.minimum(k1 * np.maximum(1.0, np.abs(lower)), k1 * width), 0.0)
    pu = np.where(has_u, np.minimum(k1 * np.maximum(1.0, np.abs(upper)), k1 * width), 0.0)
    x = np.where(has_l, np.maximum(x, lower + pl), x)
    x = np.where(has_u, np.minimum(x, upper - pu), x)
    both = has_l & has_u & (lower + pl > upper - pu)
    x[both] = 0.5 * (lower[both] + upper[both])

    ev = _Evaluator(p)
    fc = ev.fc(x)
    if fc is None:
        raise SolverError(f"callbacks failed at the start point {x}")
    f, c = fc
    g = np.asarray(p.gradient(x), dtype=float)
    J = _to_csr(p.jacobian(x), (m, n))

    mu = opts.mu_init
    mu_min = opts.tol / 10.0
    zl = np.where(has_l, 1.0, 0.0)
    zu = np.where(has_u, 1.0, 0.0)
    lam = _least_squares_multipliers(J, -(g - zl + zu), n, m)

    dense = (n + m) < opts.dense_threshold
    kkt = _KKTSolver(n, m, dense)
    B = np.eye(n) if p.hessian is None else None
    nu = 1.0
    kappa_sigma = 1e10
    history = []
    best = None
    status = Status.ITER_LIMIT
    message = "iteration limit reached"
    consecutive_fail = 0
    # proximal term raised after heavily truncated steps, relaxed after full ones
    prox = 0.0
    it = 0

    log(f"{'iter':>5} {'objective':>16} {'inf_pr':>10} {'mu':>9} {'alpha':>9} {'kkt':>10}")

    def slacks(xv):
        return np.where(has_l, xv - lower, 1.0), np.where(has_u, upper - xv, 1.0)

    # violations below this do not count in the merit; they sit at the rounding floor of c
    tau_c = 0.1 * opts.tol

    def theta(cv):
        return float(np.maximum(np.abs(cv) - tau_c, 0.0).sum())

    def barrier(fv, xv, muv):
        sl, su = slacks(xv)
        return fv - muv * (np.sum(np.log(sl[has_l])) + np.sum(np.log(su[has_u])))

    for it in range(int(opts.max_iter) + 1):
        sl, su = slacks(x)
        pl_ = _ProblemView(lower, upper, m)
        e_stat, e_feas, e_comp, err = _kkt_parts(pl_, x, g, J, c, lam, zl, zu, 0.0)
        if best is None or err < best[0]:
            best = (err, x.copy(), lam.copy(), zl.copy(), zu.copy(), f, e_feas)
        if err <= opts.tol:
            status, message = Status.OPTIMAL, "converged"
            break
        if it == opts.max_iter:
            break

        # barrier update (monotone)
        s_d = max(100.0, (np.abs(lam).sum() + zl.sum() + zu.sum()) / max(1, n + m)) / 100.0
        while True:
            es, ef, ec, _ = _kkt_parts(pl_, x, g, J, c, lam, zl, zu, mu)
            e_mu = max(es / s_d, ef, ec / s_d)
            if e_mu <= 10.0 * mu and mu > mu_min:
                mu = max(mu_min, min(opts.mu_factor * mu, mu ** 1.5))
                nu = max(nu, 1.0)
                continue
            break
        tau = max(0.99, 1.0 - mu)

        if p.hessian is not None:
            W = _to_csr(p.hessian(x, lam, 1.0), (n, n))
        else:
            W = sp.csr_matrix(B)
        sig = np.where(has_l, zl / sl, 0.0) + np.where(has_u, zu / su, 0.0)
        H = (W + sp.diags(sig)).tocsr()
        grad_phi = g - np.where(has_l, mu / sl, 0.0) + np.where(has_u, mu / su, 0.0)
        r_x = -(grad_phi + (J.T @ lam if m else 0.0))
        rhs = np.concatenate((r_x, -c))
        try:
            dx, dlam, delta_w = kkt.solve(H, J, rhs, mu, prox)
        except SolverError as exc:
            status, message = Status.ERROR, str(exc)
            break

        prox_used = prox
        dzl = np.where(has_l, mu / sl - zl - (zl / sl) * dx, 0.0)
        dzu = np.where(has_u, mu / su - zu + (zu / su) * dx, 0.0)
        alpha_max = min(
            _fraction_to_boundary(sl[has_l], dx[has_l], tau),
            _fraction_to_boundary(su[has_u], -dx[has_u], tau),
        )
        alpha_z = min(
            _fraction_to_boundary(zl[has_l], dzl[has_l], tau),
            _fraction_to_boundary(zu[has_u], dzu[has_u], tau),
        )

        # penalty parameter for the l1 merit function
        c1 = theta(c)
        dphi = float(grad_phi @ dx)
        curv = float(dx @ (H @ dx))
        if c1 > 0:
            nu_trial = (dphi + 0.5 * max(curv, 0.0)) / (0.9 * c1)
            if nu < nu_trial:
                nu = nu_trial + 1.0
        phi0 = barrier(f, x, mu) + nu * c1
        D = dphi - nu * c1
        # allowance for rounding in merit evaluations near convergence
        slack = 10.0 * np.finfo(float).eps * max(1.0, abs(phi0))

        alpha = alpha_max
        accepted = None
        soc_tried = False
        for ls in range(60):
            xt = x + alpha * dx
            slt, sut = slacks(xt)
            if np.any(slt[has_l] <= 0) or np.any(sut[has_u] <= 0):
                alpha *= 0.5
                continue
            fct = ev.fc(xt)
            if fct is not None:
                ft, ct = fct
                phit = barrier(ft, xt, mu) + nu * theta(ct)
                if phit <= phi0 + 1e-4 * alpha * D + slack:
                    accepted = (xt, ft, ct, alpha, phit)
                    break
                if ls == 0 and not soc_tried and m and theta(ct) > 0 and theta(ct) >= c1 * 0.99:
                    soc_tried = True
                    acc = _soc_sequence(ev, kkt, r_x, x, c, ct, alpha, sl, su, has_l, has_u, tau,
                                        lambda fv, xv, cv: barrier(fv, xv, mu) + nu * theta(cv),
                                        phi0 + 1e-4 * alpha * D + slack)
                    if acc is not None:
                        accepted = acc
                        break
            alpha *= 0.5
            if alpha < 1e-14:
                break

        if accepted is None:
            consecutive_fail += 1
            if consecutive_fail > 8:
                status = Status.INFEASIBLE if e_feas > np.sqrt(opts.tol) else Status.ERROR
                message = "line search failed repeatedly"
                break
            # take a short feasible step anyway to escape the stall
            alpha = min(alpha_max, 1e-3)
            xt = x + alpha * dx
            slt, sut = slacks(xt)
            if np.any(slt[has_l] <= 0) or np.any(sut[has_u] <= 0):
                status, message = Status.ERROR, f"iterate {it} cannot move without leaving the bounds"
                break
            fct = ev.fc(xt)
            if fct is None:
                status, message = Status.ERROR, f"callback failure near iterate {it}"
                break
            accepted = (xt, fct[0], fct[1], alpha, barrier(fct[0], xt, mu) + nu * theta(fct[1]))
            kkt.last_delta_w = max(kkt.last_delta_w * 10, 1e-4)
        else:
            consecutive_fail = 0

        a_acc = accepted[3]
        if a_acc < 0.1 * alpha_max:
            prox = min(1e6, max(1e-5, 3.0 * prox))
        elif prox > 0.0:
            prox = 0.0 if prox <= 1e-8 else prox / (3.0 if a_acc >= 0.5 * alpha_max else 1.5)

        x_new, f_new, c_new, alpha, phi_new = accepted
        lam_new = lam + alpha * dlam
        zl = zl + alpha_z * dzl
        zu = zu + alpha_z * dzu
        sl_new, su_new = slacks(x_new)
        zl = np.where(has_l, np.clip(zl, mu / (kappa_sigma * sl_new), kappa_sigma * mu / sl_new), 0.0)
        zu = np.where(has_u, np.clip(zu, mu / (kappa_sigma * su_new), kappa_sigma * mu / su_new), 0.0)

        g_new = np.asarray(p.gradient(x_new), dtype=float)
        J_new = _to_csr(p.jacobian(x_new), (m, n))
        if B is not None:
            y = (g_new + (J_new.T @ lam_new if m else 0.0)) - (g + (J.T @ lam_new if m else 0.0))
            B = _bfgs_update(B, x_new - x, y)

        history.append({
            "iter": it, "objective": f_new, "inf_pr": float(np.abs(c_new).max(initial=0.0)), "mu": mu,
            "alpha": alpha, "kkt": err, "merit_before": phi0, "merit_after": phi_new, "nu": nu,
            "delta_w": delta_w, "prox": prox_used, "alpha_z": alpha_z, "alpha_max": alpha_max, "s_d": s_d,
            "kkt_scaled": max(e_stat / s_d, e_feas, e_comp / s_d),
        })
        log(f"{it:5d} {f_new:16.8e} {history[-1]['inf_pr']:10.3e} {mu:9.2e} {alpha:9.2e} {err:10.3e}")
        x, f, c, g, J, lam = x_new, f_new, c_new, g_new, J_new, lam_new

    if status is not Status.OPTIMAL and best is not None and best[0] < err:
        err, x, lam, zl, zu, f, _ = best
    e_feas = float(np.abs(np.asarray(p.constraints(x), dtype=float)).max(initial=0.0)) if m else 0.0
    return SolveResult(
        x=x, lam=lam, z_lower=zl, z_upper=zu, status=status, iterations=it,
        kkt_residual=float(err), objective=float(f), wall_time=time.perf_counter() - t_start,
        constraint_violation=e_feas, message=message, history=history,
    )


def _second_order_correction(kkt, r_x, c_soc):
    if kkt.last_solve is None:
        return None
    sol = kkt.last_solve(np.concatenate((r_x, -c_soc)))
    if not np.all(np.isfinite(sol)):
        return None
    return sol[:kkt.n]


def _soc_sequence(ev, kkt, r_x, x, c, ct, alpha, sl, su, has_l, has_u, tau, merit, target, max_soc=4):
    """Up to ``max_soc`` accumulated second-order corrections for a rejected full step."""
    c_soc = alpha * c + ct
    c_prev = float(np.abs(ct).sum())
    for _ in range(max_soc):
        soc = _second_order_correction(kkt, r_x, c_soc)
        if soc is None:
            return None
        a_soc = min(
            _fraction_to_boundary(sl[has_l], soc[has_l], tau),
            _fraction_to_boundary(su[has_u], -soc[has_u], tau),
        )
        xs = x + a_soc * soc
        fcs = ev.fc(xs)
        if fcs is None:
            return None
        fs, cs = fcs
        phis = merit(fs, xs, cs)
        if phis <= target:
            return xs, fs, cs, a_soc, phis
        c_new = float(np.abs(cs).sum())
        if c_new > 0.99 * c_prev:
            return None
        c_soc = a_soc * c_soc + cs
        c_prev = c_new
    return None


@dataclass
class _ProblemView:
    lower: np.ndarray
    upper: np.ndarray
    m: int


def dense_problem(f, n, c=None, m=0, lower=-np.inf, upper=np.inf, exact_hessian=True, name=""):
    """Build an :class:`NlpProblem` from plain functions using forward-mode AD.

    ``f(x)`` and ``c(x)`` receive an indexable vector and must use the
    primitives supported by :mod:`williams_otto.deriv`.
    """
    def grad(x):
        return deriv.jacobian(lambda z: f(z), x).to_dense().ravel()

    def cons(x):
        return np.asarray(c(x), dtype=float).reshape(m) if m else np.zeros(0)

    def jac(x):
        if not m:
            return sp.csr_matrix((0, n))
        return sp.csr_matrix(deriv.jacobian(lambda z: c(z), x).to_dense().reshape(m, n))

    hess = None
    if exact_hessian:
        def hess(x, lam, obj_factor):
            def lag(z):
                val = obj_factor * f(z)
                if m:
                    cz = c(z)
                    for i in range(m):
                        val = val + lam[i] * cz[i]
                return val
            return sp.csr_matrix(deriv.hessian(lag, x))

    return NlpProblem(n=n, m=m, objective=lambda x: float(deriv.value_of(f(x))), gradient=grad,
                      constraints=cons, jacobian=jac, lower=lower, upper=upper, hessian=hess, name=name)


def format_summary(res):
    return (f"status={res.status.value} iterations={res.iterations} objective={res.objective:.10g} "
            f"kkt={res.kkt_residual:.3e} time={res.wall_time:.2f}s")


def stderr_log(line):
    sys.stderr.write(line + "\n")
