"""Williams-Otto reactor/recycle model.

State ordering is ``(m_A, m_B, m_C, m_E, m_P, m_G)`` in klb and control
ordering is ``(F_fA, F_fB, T, mu, eta)``. Flows are klb/h, time is h.

Temperatures follow the usual Williams-Otto convention (degrees Rankine).
Some texts label the unit "degrees Reaumur"; only the ratio ``b_i / T``
enters the model, so the label has no numerical consequence.

The rate law and the six component balances are written so that they accept
plain floats, numpy arrays (vectorized over collocation nodes) or the
forward-mode numbers from :mod:`williams_otto.deriv`.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import deriv

SPECIES = ("A", "B", "C", "E", "P", "G")
STATE_NAMES = tuple(f"m_{s}" for s in SPECIES)
CONTROL_NAMES = ("F_fA", "F_fB", "T", "mu", "eta")
N_STATES = len(STATE_NAMES)
N_CONTROLS = len(CONTROL_NAMES)

IDX_E = SPECIES.index("E")
IDX_P = SPECIES.index("P")
IDX_G = SPECIES.index("G")


class ModelError(ValueError):
    """Base class for model evaluation failures."""


class DegenerateStateError(ModelError):
    """Total mass (or volume) is not strictly positive."""


class ModelDomainError(ModelError):
    """An input lies outside the physical domain (e.g. T <= 0)."""


class SteadyStateError(ModelError):
    """Newton iteration for a steady state failed."""


@dataclass(frozen=True)
class ModelConstants:
    a1: float = 5.9755e9
    a2: float = 2.5962e12
    a3: float = 9.6283e15
    b1: float = 12000.0
    b2: float = 15000.0
    b3: float = 20000.0
    rho: float = 50.0
    rho0: tuple = (50.0,) * 6
    column_retention: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "rho0", tuple(float(r) for r in self.rho0))
        if len(self.rho0) != N_STATES:
            raise ValueError("rho0 needs one density per species")
        for f in fields(self):
            v = getattr(self, f.name)
            vals = v if isinstance(v, tuple) else (v,)
            if not all(np.isfinite(x) and x > 0 for x in vals):
                raise ValueError(f"model constant {f.name} must be strictly positive, got {v}")
        if not 0 < self.column_retention < 1:
            raise ValueError("column_retention must lie in (0, 1)")


DEFAULT_CONSTANTS = ModelConstants()


@dataclass(frozen=True)
class ProcessState:
    m_A: float
    m_B: float
    m_C: float
    m_E: float
    m_P: float
    m_G: float

    def __post_init__(self):
        for name in STATE_NAMES:
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")

    def as_array(self):
        return np.array([getattr(self, n) for n in STATE_NAMES])

    @classmethod
    def from_array(cls, x):
        return cls(*(float(v) for v in np.asarray(x, dtype=float).ravel()))


@dataclass(frozen=True)
class ControlInput:
    F_fA: float
    F_fB: float
    T: float
    mu: float
    eta: float

    def __post_init__(self):
        if min(self.F_fA, self.F_fB, self.mu) < 0:
            raise ValueError("feed streams and mu must be >= 0")
        if not self.T > 0:
            raise ValueError("T must be > 0")
        if not 0 <= self.eta <= 1:
            raise ValueError("eta must lie in [0, 1]")

    def as_array(self):
        return np.array([getattr(self, n) for n in CONTROL_NAMES])

    @classmethod
    def from_array(cls, u):
        return cls(*(float(v) for v in np.asarray(u, dtype=float).ravel()))

    def replace(self, **kw):
        d = {n: getattr(self, n) for n in CONTROL_NAMES}
        d.update(kw)
        return ControlInput(**d)


# design level of operation and the simulation start state
U_STAR = ControlInput(F_fA=10.0, F_fB=20.0, T=580.0, mu=129.5, eta=0.2)
X_STAR = ProcessState(3.27, 7.47, 1.12, 9.81, 1.69, 0.22)
X0_SIM = ProcessState(10.0, 1.0, 0.0, 0.0, 0.0, 0.0)


def _components(x, n, what):
    if isinstance(x, (ProcessState, ControlInput)):
        return list(x.as_array())
    if isinstance(x, (deriv.Dual, deriv.Taylor2)) or isinstance(x, (list, tuple)):
        comps = list(x)
    else:
        arr = np.asarray(x, dtype=float)
        comps = [arr[..., i] for i in range(arr.shape[-1])] if arr.ndim else []
    if len(comps) != n:
        raise ValueError(f"{what} needs {n} components, got {len(comps)}")
    return comps


def _is_numeric(comps):
    return not any(isinstance(c, (deriv.Dual, deriv.Taylor2)) for c in comps)


def reaction_rates(T, c=DEFAULT_CONSTANTS):
    """Arrhenius-type rate constants ``k_i = a_i / rho * exp(-b_i / T)``."""
    if np.any(deriv.value_of(T) <= 0):
        raise ModelDomainError(f"temperature must be positive, got {deriv.value_of(T)}")
    inv = 1.0 / T
    return (
        c.a1 / c.rho * deriv.exp(-c.b1 * inv),
        c.a2 / c.rho * deriv.exp(-c.b2 * inv),
        c.a3 / c.rho * deriv.exp(-c.b3 * inv),
    )


def aggregates(x, c=DEFAULT_CONSTANTS):
    """Total mass ``m`` and total volume ``V`` of the reactor contents."""
    xs = _components(x, N_STATES, "state")
    m = xs[0]
    V = xs[0] / c.rho0[0]
    for i in range(1, N_STATES):
        m = m + xs[i]
        V = V + xs[i] / c.rho0[i]
    return m, V


def _check_mass(m):
    if np.any(deriv.value_of(m) <= 0):
        raise DegenerateStateError("total reactor mass must be positive")


def rhs_components(x, u, c=DEFAULT_CONSTANTS):
    """Component balances as a list of six entries (AD-friendly)."""
    mA, mB, mC, mE, mP, mG = _components(x, N_STATES, "state")
    FfA, FfB, T, mu, eta = _components(u, N_CONTROLS, "control")
    m, V = aggregates((mA, mB, mC, mE, mP, mG), c)
    _check_mass(m)
    k1, k2, k3 = reaction_rates(T, c)
    inv_m = 1.0 / m
    inv_V = 1.0 / V
    r1 = k1 * mA * mB * inv_V
    r2 = k2 * mB * mC * inv_V
    r3 = k3 * mC * mP * inv_V
    # ((1 - eta) mu - mu) = -eta mu : net loss of species that leave via purge
    purge = -(eta * mu) * inv_m
    out = mu * inv_m
    ret = c.column_retention
    return [
        FfA + purge * mA - r1,
        FfB + purge * mB - r1 - r2,
        purge * mC + 2.0 * r1 - 2.0 * r2 - r3,
        purge * mE + 2.0 * r2,
        ret * (1.0 - eta) * mE * out - mP * out + r2 - 0.5 * r3,
        -mG * out + 1.5 * r3,
    ]


def rhs(x, u, c=DEFAULT_CONSTANTS):
    """Time derivative of the six species masses.

    Numeric inputs return an array whose first axis indexes the species;
    AD inputs return a list of AD numbers.
    """
    comps = rhs_components(x, u, c)
    if _is_numeric(comps):
        return np.stack([np.asarray(v, dtype=float) for v in comps])
    return comps


@dataclass(frozen=True)
class StreamMap:
    """Streams derived from the reactor state.

    ``F_t``, ``F_wG`` and ``F_pP`` follow directly from the flowsheet
    relations. ``bottoms``, ``recycle`` and ``purge`` are informational: the
    column bottoms are taken as the decanter effluent minus the distillate.
    """

    F_t: np.ndarray
    F_wG: float
    F_pP: float
    bottoms: np.ndarray
    recycle: np.ndarray
    purge: np.ndarray

    @property
    def F_tP(self):
        return float(self.F_t[IDX_P])


def streams(x, u, c=DEFAULT_CONSTANTS):
    xs = np.array(_components(x, N_STATES, "state"), dtype=float)
    us = np.array(_components(u, N_CONTROLS, "control"), dtype=float)
    m = xs.sum()
    if not m > 0:
        raise DegenerateStateError("total reactor mass must be positive")
    mu, eta = us[3], us[4]
    F_t = mu * xs / m
    F_wG = F_t[IDX_G]
    F_pP = F_t[IDX_P] - c.column_retention * F_t[IDX_E]
    bottoms = F_t.copy()
    bottoms[IDX_G] = 0.0
    bottoms[IDX_P] = F_t[IDX_P] - F_pP
    return StreamMap(
        F_t=F_t,
        F_wG=float(F_wG),
        F_pP=float(F_pP),
        bottoms=bottoms,
        recycle=(1.0 - eta) * bottoms,
        purge=eta * bottoms,
    )


QUANTITIES = ("m", "V", "F_tA", "F_tB", "F_tC", "F_tE", "F_tP", "F_tG", "F_wG", "F_pP") + CONTROL_NAMES


def quantity(name, x, u, c=DEFAULT_CONSTANTS):
    """Evaluate a named process quantity (stream, aggregate or control).

    Works on numeric arrays (vectorized) and on AD numbers.
    """
    xs = _components(x, N_STATES, "state")
    us = _components(u, N_CONTROLS, "control")
    if name in CONTROL_NAMES:
        return us[CONTROL_NAMES.index(name)]
    m, V = aggregates(xs, c)
    if name == "m":
        return m
    if name == "V":
        return V
    _check_mass(m)
    mu = us[3]
    if name.startswith("F_t") and name[3:] in SPECIES:
        return mu * xs[SPECIES.index(name[3:])] / m
    if name == "F_wG":
        return mu * xs[IDX_G] / m
    if name == "F_pP":
        return mu * (xs[IDX_P] - c.column_retention * xs[IDX_E]) / m
    raise KeyError(f"unknown quantity {name!r}; expected one of {QUANTITIES}")


def state_jacobian(x, u, c=DEFAULT_CONSTANTS):
    """6x6 Jacobian of :func:`rhs` with respect to the state."""
    xv = np.asarray(_components(x, N_STATES, "state"), dtype=float)
    uv = np.asarray(_components(u, N_CONTROLS, "control"), dtype=float)
    return deriv.jacobian(lambda z: rhs_components(list(z), list(uv), c), xv).to_dense()


def find_steady_state(u, guess=X0_SIM, tol=1e-10, max_iter=100, c=DEFAULT_CONSTANTS):
    """Steady state of the model under constant controls ``u``.

    A damped Newton iteration on ``rhs(x, u) = 0`` is tried first; each step
    is halved (at most 30 times) until the residual norm decreases and all
    masses stay non-negative. If it stalls far from the solution, the search
    restarts from ``guess`` with pseudo-transient continuation (implicit
    Euler steps whose length grows as the residual falls), which follows the
    stable dynamics. Returns a :class:`ProcessState`.
    """
    uv = np.asarray(_components(u, N_CONTROLS, "control"), dtype=float)
    x0 = np.asarray(_components(guess, N_STATES, "state"), dtype=float)
    if not x0.sum() > 0:
        raise DegenerateStateError("steady-state guess has zero total mass")
    try:
        return _newton(x0, uv, tol, max_iter, c)
    except SteadyStateError as first:
        try:
            return _pseudo_transient(x0, uv, tol, max_iter, c)
        except SteadyStateError:
            raise first from None


def _newton(x, uv, tol, max_iter, c):
    f = rhs(x, uv, c)
    res = np.abs(f).max()
    for it in range(max_iter + 1):
        if res <= tol:
            return ProcessState.from_array(np.maximum(x, 0.0))
        if it == max_iter:
            break
        J = state_jacobian(x, uv, c)
        try:
            dx = np.linalg.solve(J, -f)
        except np.linalg.LinAlgError as exc:
            raise SteadyStateError(f"singular Jacobian at iteration {it}: x={x}") from exc
        step = 1.0
        for _ in range(31):
            xt = x + step * dx
            if np.all(xt >= 0) and xt.sum() > 0:
                ft = rhs(xt, uv, c)
                rt = np.abs(ft).max()
                if rt < res:
                    break
            step *= 0.5
        else:
            raise SteadyStateError(f"no decrease after 30 step halvings at iteration {it} (residual {res:.3e})")
        x, f, res = xt, ft, rt
    raise SteadyStateError(f"no convergence in {max_iter} iterations (residual {res:.3e})")


def _pseudo_transient(x, uv, tol, max_iter, c):
    f = rhs(x, uv, c)
    res = np.abs(f).max()
    dt = 1.0
    eye = np.eye(N_STATES)
    for _ in range(5 * max_iter):
        if res <= tol:
            return ProcessState.from_array(np.maximum(x, 0.0))
        J = state_jacobian(x, uv, c)
        try:
            dx = np.linalg.solve(eye / dt - J, f)
        except np.linalg.LinAlgError:
            dt *= 0.5
            continue
        xt = x + dx
        if np.any(xt < 0) or not xt.sum() > 0:
            dt *= 0.25
            continue
        ft = rhs(xt, uv, c)
        rt = np.abs(ft).max()
        dt = min(dt * min(10.0, max(0.5, res / max(rt, 1e-300))), 1e12)
        x, f, res = xt, ft, rt
    raise SteadyStateError(f"pseudo-transient continuation did not converge (residual {res:.3e})")
