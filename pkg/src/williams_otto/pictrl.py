"""PI feedback control of the Williams-Otto process.

Each control channel pairs a manipulated control with a setpoint quantity::

    u(t) = u_bias + K_prop * (y_sp - y(t)) + K_int * eps(t),   eps' = y_sp - y

for ``t > t_star``. The integral ``eps`` is carried as an extra ODE state so
the closed loop is an ordinary ODE that :func:`colloc.simulate` handles
unchanged. Gains for first-order-like channels follow the Skogestad IMC
rules (moderate tuning) from step tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import colloc, deriv, model
from .model import CONTROL_NAMES, N_CONTROLS, N_STATES


class TuningError(ValueError):
    """Step response unsuitable for rule-based tuning."""


class SettlingError(RuntimeError):
    """Process did not resettle within the simulated horizon."""


class InstabilityError(RuntimeError):
    """Closed-loop state grew beyond the divergence threshold."""


# assumed "typical" control ranges used for relative step sizes
CONTROL_BOUNDS = {"F_fA": (0.0, 20.0), "F_fB": (0.0, 56.0), "T": (200.0, 800.0), "mu": (0.0, 259.0)}

# the four standard channels: control -> setpoint quantity
STANDARD_CHANNELS = {"mu": "m", "F_fA": "F_tP", "F_fB": "F_pP", "T": "F_wG"}

# published gains, kept as reference points
REFERENCE_GAINS = {
    "mu": (-0.002, -40.659),
    "F_fA": (0.053, 1.504),
    "F_fB": (0.069, 1.282),
    "T": (0.143, 0.1),
}


@dataclass(frozen=True)
class PiChannel:
    control: str
    quantity: str
    setpoint: float
    k_prop: float
    k_int: float
    bias: Optional[float] = None
    t_star: float = 100.0
    bounds: Optional[tuple] = None

    def __post_init__(self):
        if self.control not in ("mu", "F_fA", "F_fB", "T"):
            raise ValueError(f"unsupported control channel {self.control!r}")
        if self.quantity not in model.QUANTITIES or self.quantity in CONTROL_NAMES:
            raise ValueError(f"unsupported setpoint quantity {self.quantity!r}")
        if self.k_prop * self.k_int < 0:
            raise ValueError("K_prop and K_int must have the same sign")
        if not self.t_star >= 0:
            raise ValueError("t_star must be non-negative")
        lo, hi = self.bounds if self.bounds is not None else CONTROL_BOUNDS[self.control]
        if not lo < hi:
            raise ValueError("control bounds must satisfy lower < upper")
        if not all(np.isfinite(v) for v in (self.setpoint, self.k_prop, self.k_int)):
            raise ValueError("setpoint and gains must be finite")

    @property
    def index(self):
        return CONTROL_NAMES.index(self.control)

    def with_bias(self, u):
        return PiChannel(self.control, self.quantity, self.setpoint, self.k_prop, self.k_int,
                         float(u[self.index]), self.t_star, self.bounds)


@dataclass(frozen=True)
class StepResponse:
    control: str
    quantity: str
    u_before: float
    u_after: float
    t_star: float
    y_before: float
    y_after: float
    delta_rel_u: float
    t_proc: float
    first_order: Optional[bool]
    overshoot: float = 0.0
    undershoot: float = 0.0
    times: np.ndarray = field(default=None, repr=False, compare=False)
    values: np.ndarray = field(default=None, repr=False, compare=False)
    trajectory: Optional[colloc.DiscreteTrajectory] = field(default=None, repr=False, compare=False)

    @property
    def delta_y(self):
        return self.y_after - self.y_before

    @property
    def k_proc(self):
        if self.delta_rel_u == 0:
            return 0.0
        return self.delta_y / self.delta_rel_u

    @property
    def degenerate(self):
        return self.delta_y == 0.0 or self.delta_rel_u == 0.0


def skogestad_gains(sr):
    """Moderate-tuning IMC gains ``(K_prop, K_int) = (1/K_proc, t_proc/K_proc)``."""
    if sr.degenerate or sr.k_proc == 0:
        raise TuningError("degenerate step response (no change in y or u); pick the gains by hand")
    if not sr.first_order:
        raise TuningError(
            f"step response of {sr.quantity} to {sr.control} is not first-order-like "
            f"(overshoot {sr.overshoot:.1%}, undershoot {sr.undershoot:.1%}); tune this channel by hand")
    k_proc = sr.k_proc
    return 1.0 / k_proc, sr.t_proc / k_proc


# --- closed-loop model ------------------------------------------------------

@dataclass
class ClosedLoopModel:
    """Williams-Otto model augmented with one integral state per channel."""

    channels: tuple
    constants: model.ModelConstants = model.DEFAULT_CONSTANTS

    @property
    def n_states(self):
        return N_STATES + len(self.channels)

    def controls(self, xs, eps, u_open, t):
        """Realized controls at given states; ``u_open`` are the open-loop rows.

        The mass channel (``mu``) is evaluated first because every stream
        depends on ``mu``; the remaining channels then see the updated value.
        """
        u = [u_open[..., i] for i in range(N_CONTROLS)]
        order = sorted(range(len(self.channels)), key=lambda i: self.channels[i].control != "mu")
        errors = [None] * len(self.channels)
        for i in order:
            ch = self.channels[i]
            y = model.quantity(ch.quantity, xs, u, self.constants)
            e = ch.setpoint - y
            gate = (np.asarray(t) > ch.t_star + 1e-12).astype(float)
            bias = ch.bias if ch.bias is not None else u_open[..., ch.index]
            u[ch.index] = bias + gate * (ch.k_prop * e + ch.k_int * eps[i])
            errors[i] = gate * e
        return u, errors

    def ode(self, x, U, t):
        xs, eps = list(x[:N_STATES]), list(x[N_STATES:])
        u, errors = self.controls(xs, eps, U, t)
        f = model.rhs_components(xs, u, self.constants)
        return list(f) + errors


def augment(channels, constants=model.DEFAULT_CONSTANTS):
    channels = tuple(channels)
    ctrl = [c.control for c in channels]
    if len(set(ctrl)) != len(ctrl):
        raise ValueError("at most one channel per control")
    qty = [c.quantity for c in channels]
    if len(set(qty)) != len(qty):
        raise ValueError("setpoint quantities must be distinct")
    return ClosedLoopModel(channels, constants)


# --- dense sampling ---------------------------------------------------------

def dense_sample(traj, per_node=10):
    """Times and states at ``per_node * K`` uniform points per element (plus t0)."""
    K = traj.basis.K
    m = per_node * K
    taus = np.arange(1, m + 1) / m
    L = traj.basis.lagrange(taus)  # (m, K+1)
    h = traj.mesh.element_lengths
    t = traj.mesh.breakpoints[:-1, None] + h[:, None] * taus[None, :]
    X = np.einsum("ql,jln->jqn", L, traj.states)
    X[:, -1] = traj.states[:, -1]
    t[:, -1] = traj.mesh.breakpoints[1:]
    times = np.concatenate(([traj.mesh.t0], t.ravel()))
    states = np.concatenate((traj.states[:1, 0], X.reshape(-1, traj.n_states)))
    return times, states


def crossing_time(times, values, level, t_from):
    """First time ``>= t_from`` at which ``values`` reaches ``level`` (linear interpolation)."""
    mask = times >= t_from
    t, v = times[mask], values[mask] - level
    s = np.sign(v)
    if s[0] == 0:
        return float(t[0])
    hit = np.nonzero(s[1:] != s[0])[0]
    if hit.size == 0:
        return None
    i = hit[0]
    if v[i + 1] == 0:
        return float(t[i + 1])
    return float(t[i] + (t[i + 1] - t[i]) * v[i] / (v[i] - v[i + 1]))


# --- step tests -------------------------------------------------------------

def _ode(c):
    def ode(x, U, t):
        return model.rhs_components(x, [U[:, i] for i in range(N_CONTROLS)], c)
    return ode


def run_step_test(control, quantity, u_star=model.U_STAR, u_after=None, t_star=100.0, horizon=500.0,
                  n_elements=None, n_points=3, bounds=None, settle_tol=1e-3, x_guess=model.X0_SIM,
                  c=model.DEFAULT_CONSTANTS):
    """Step ``control`` from its ``u_star`` value to ``u_after`` at ``t_star``.

    The process is pre-settled at the steady state for ``u_star``. The
    response is sampled at ten times the node density; ``t_proc`` is the
    interpolated time to 63 % of the total change. ``settle_tol`` bounds the
    extrapolated remaining drift ``|dy/dt| * (horizon - t_star)`` relative to
    ``|delta y|``.
    """
    i = CONTROL_NAMES.index(control)
    u0 = u_star.as_array() if isinstance(u_star, model.ControlInput) else np.asarray(u_star, dtype=float)
    u1 = u0.copy()
    u1[i] = u0[i] if u_after is None else float(u_after)
    lo, hi = bounds if bounds is not None else CONTROL_BOUNDS[control]
    d_rel = (u1[i] - u0[i]) / (hi - lo)

    x_star = model.find_steady_state(u0, x_guess, c=c).as_array()
    y0 = float(model.quantity(quantity, x_star, u0, c))
    if u1[i] == u0[i]:
        return StepResponse(control, quantity, u0[i], u1[i], t_star, y0, y0, 0.0, 0.0, None)

    n_el = n_elements or int(round(3 * horizon))
    mesh = colloc.Mesh.uniform(0.0, horizon, n_el).with_breaks([t_star])
    traj = colloc.simulate(_ode(c), x_star, colloc.step_profile(u0, u1, t_star), mesh, colloc.radau_basis(n_points),
                           state_names=model.STATE_NAMES, control_names=CONTROL_NAMES)
    times, X = dense_sample(traj)
    U = np.where((times > t_star)[:, None], u1, u0)
    y = np.asarray(model.quantity(quantity, list(X.T), list(U.T), c), dtype=float)
    y1 = float(y[-1])
    dy = y1 - y0

    # remaining drift at the horizon end
    xe = X[-1]
    ydot = deriv.directional_derivative(lambda v: model.quantity(quantity, list(v), list(u1), c), xe,
                                        model.rhs(xe, u1, c))[1]
    if abs(float(np.ravel(ydot)[0])) * (horizon - t_star) > settle_tol * max(abs(dy), 1e-12):
        raise SettlingError(f"{quantity} still drifting at t={horizon} (dy/dt={float(np.ravel(ydot)[0]):.3e})")

    if dy == 0.0:
        return StepResponse(control, quantity, u0[i], u1[i], t_star, y0, y1, d_rel, 0.0, None, times=times, values=y,
                            trajectory=traj)
    tc = crossing_time(times, y, y0 + 0.63 * dy, t_star)
    r = (y[times >= t_star] - y0) / dy
    over = max(0.0, float(r.max()) - 1.0)
    under = max(0.0, -float(r.min()))
    first = tc is not None and over <= 0.05 and under <= 0.05 and _max_slope_early(times, y, t_star, tc)
    return StepResponse(control, quantity, u0[i], u1[i], t_star, y0, y1, d_rel,
                        float(tc - t_star) if tc is not None else float("nan"), bool(first),
                        overshoot=over, undershoot=under, times=times, values=y, trajectory=traj)


def _max_slope_early(times, y, t_star, t_cross):
    """True when the steepest rise happens before half the 63 % time (no late inflection)."""
    m = times > t_star
    t, v = times[m], y[m]
    slope = np.abs(np.diff(v) / np.diff(t))
    t_max = t[int(np.argmax(slope))]
    return t_max - t_star <= 0.5 * (t_cross - t_star)


def tune_channel(control, quantity=None, step=1.0, **kw):
    """Step test plus Skogestad gains; returns ``(StepResponse, (K_prop, K_int))``."""
    quantity = quantity or STANDARD_CHANNELS[control]
    u0 = kw.get("u_star", model.U_STAR)
    u0 = u0.as_array() if isinstance(u0, model.ControlInput) else np.asarray(u0, dtype=float)
    sr = run_step_test(control, quantity, u_after=u0[CONTROL_NAMES.index(control)] + step, **kw)
    return sr, skogestad_gains(sr)


# --- closed loop ------------------------------------------------------------

@dataclass
class ClosedLoopRun:
    trajectory: colloc.DiscreteTrajectory   # plant states; controls hold realized values
    integral_states: np.ndarray             # (N, K+1, n_channels)
    channels: tuple
    setpoint_traces: dict
    settled: bool
    terminal_errors: dict


def run_closed_loop(channels, x0=model.X0_SIM, u_star=model.U_STAR, horizon=500.0, n_elements=None, n_points=3,
                    settle_tol=0.01, c=model.DEFAULT_CONSTANTS, divergence=1e3):
    """Simulate the plant under ``u_star`` with PI channels switched on at their ``t_star``.

    Channel biases default to the ``u_star`` components (bumpless switch-on).
    A run is reported settled when each terminal error is within
    ``settle_tol`` of the channel's initial setpoint distance.
    """
    u0 = u_star.as_array() if isinstance(u_star, model.ControlInput) else np.asarray(u_star, dtype=float)
    channels = tuple(ch if ch.bias is not None else ch.with_bias(u0) for ch in channels)
    clm = augment(channels, c)
    x0v = x0.as_array() if isinstance(x0, model.ProcessState) else np.asarray(x0, dtype=float)
    z0 = np.concatenate((x0v, np.zeros(len(channels))))
    n_el = n_elements or int(round(3 * horizon))
    mesh = colloc.Mesh.uniform(0.0, horizon, n_el).with_breaks(sorted({ch.t_star for ch in channels if 0 < ch.t_star < horizon}))
    basis = colloc.radau_basis(n_points)
    scale = max(1.0, float(np.abs(x0v).max()))

    def ode(x, U, t):
        v = np.abs(deriv.value_of(x[0]))
        for comp in x[1:N_STATES]:
            v = np.maximum(v, np.abs(deriv.value_of(comp)))
        if np.any(v > divergence * scale):
            raise InstabilityError(f"closed-loop state exceeded {divergence:g} x its initial size near t={float(np.max(t)):.3f}")
        return clm.ode(x, U, t)

    traj = colloc.simulate(ode, z0, colloc.ConstantProfile(u0), mesh, basis,
                           state_names=model.STATE_NAMES + tuple(f"eps_{ch.control}" for ch in channels),
                           control_names=CONTROL_NAMES)
    plant = traj.states[:, :, :N_STATES]
    eps = traj.states[:, :, N_STATES:]
    tn = mesh.node_times(basis).ravel()
    Xn = plant[:, 1:].reshape(-1, N_STATES)
    En = eps[:, 1:].reshape(-1, len(channels))
    Uo = np.broadcast_to(u0, (Xn.shape[0], N_CONTROLS))
    u, _ = clm.controls(list(Xn.T), list(En.T), Uo, tn)
    U = np.stack([np.broadcast_to(np.asarray(v, dtype=float), tn.shape) for v in u], axis=1)
    realized = U.reshape(mesh.n_elements, basis.K, N_CONTROLS)
    plant_traj = colloc.DiscreteTrajectory(mesh, basis, plant, realized, model.STATE_NAMES, CONTROL_NAMES)

    traces, errors = {}, {}
    settled = True
    for ch in channels:
        y = np.asarray(model.quantity(ch.quantity, list(Xn.T), list(U.T), c), dtype=float)
        traces[ch.quantity] = y
        i0 = np.searchsorted(tn, ch.t_star, side="right")
        y_on = y[i0 - 1] if i0 > 0 else float(model.quantity(ch.quantity, x0v, u0, c))
        err = float(y[-1] - ch.setpoint)
        errors[ch.quantity] = err
        ref = abs(ch.setpoint - y_on)
        if abs(err) > settle_tol * ref and abs(err) > 1e-9 * max(1.0, abs(ch.setpoint)):
            settled = False
    return ClosedLoopRun(plant_traj, eps, channels, traces, settled, errors)


def band_entry_time(times, values, setpoint, rel_band, t_from):
    """Time after which ``values`` stay within ``rel_band * |setpoint|`` of the setpoint."""
    m = times >= t_from
    t, v = times[m], values[m]
    outside = np.abs(v - setpoint) > rel_band * abs(setpoint)
    if outside[-1]:
        return None
    idx = np.nonzero(outside)[0]
    return float(t[0]) if idx.size == 0 else float(t[idx[-1] + 1])
