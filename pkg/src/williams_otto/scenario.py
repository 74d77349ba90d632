"""Scenario files: a strict INI dialect plus an equivalent JSON form.

A scenario is a set of sections::

    [scenario]        name, kind (simulate | step-test | tune | pi-run | optimize | track)
    [model]           optional overrides of the model constants
    [initial_state]   preset = x_star | x0_sim | steady, or m_A ... m_G
    [mesh]            tf, t0, elements, points
    [control.<name>]  shape = fixed | constant | piecewise | spline; value, lower, upper,
                      initial, step_time, step_value
    [objective]       type = integral | weighted | tracking; stream, sign, terms,
                      targets, t_start, alpha, ffb_penalty
    [constraints]     path (e.g. ``F_wG <= 1``), ffb_integral_max
    [channel.<name>]  quantity, setpoint, k_prop, k_int, t_star, lower, upper
    [step]            control, quantity, after, t_star, horizon, lower, upper
    [solver]          tol, max_iter, mu_init, mu_factor, bound_push
    [output]          format, emit_plotdata, render_figures

Unknown sections or keys, duplicate keys and malformed values are errors.
"""

from __future__ import annotations

import configparser
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import model

KINDS = ("simulate", "step-test", "tune", "pi-run", "optimize", "track")
SHAPES = ("fixed", "constant", "piecewise", "spline")
OBJECTIVE_TYPES = ("integral", "weighted", "tracking")
STATE_PRESETS = ("x_star", "x0_sim", "steady")


class ScenarioError(ValueError):
    """Malformed or inconsistent scenario description."""


@dataclass
class ControlSpec:
    shape: str = "fixed"
    value: Optional[float] = None
    lower: Optional[float] = None
    upper: Optional[float] = None
    initial: Optional[float] = None
    step_time: Optional[float] = None
    step_value: Optional[float] = None


@dataclass
class MeshSpec:
    tf: float = 100.0
    t0: float = 0.0
    elements: int = 200
    points: int = 3


@dataclass
class ObjectiveSpec:
    type: str = "integral"
    stream: Optional[str] = None
    sign: float = 1.0
    terms: list = field(default_factory=list)      # [(weight, stream, sign)]
    targets: list = field(default_factory=list)    # [(quantity, setpoint)]
    t_start: float = 0.0
    alpha: float = 1.0
    ffb_penalty: float = 0.0


@dataclass
class ConstraintSpec:
    path: list = field(default_factory=list)       # [(quantity, upper bound)]
    ffb_integral_max: Optional[float] = None


@dataclass
class ChannelSpec:
    control: str
    quantity: str
    setpoint: float
    k_prop: Optional[float] = None
    k_int: Optional[float] = None
    t_star: float = 100.0
    lower: Optional[float] = None
    upper: Optional[float] = None


@dataclass
class StepSpec:
    control: str
    quantity: str
    after: float
    t_star: float = 100.0
    horizon: float = 500.0
    lower: Optional[float] = None
    upper: Optional[float] = None


@dataclass
class SolverSpec:
    tol: float = 1e-8
    max_iter: int = 3000
    mu_init: float = 0.1
    mu_factor: float = 0.2
    bound_push: float = 1e-2


@dataclass
class OutputSpec:
    format: str = "csv"
    emit_plotdata: bool = False
    render_figures: bool = False


@dataclass
class Scenario:
    name: str
    kind: str
    constants: dict = field(default_factory=dict)
    initial_state: object = "x0_sim"
    mesh: MeshSpec = field(default_factory=MeshSpec)
    controls: dict = field(default_factory=dict)
    objective: Optional[ObjectiveSpec] = None
    constraints: ConstraintSpec = field(default_factory=ConstraintSpec)
    channels: list = field(default_factory=list)
    step: Optional[StepSpec] = None
    solver: SolverSpec = field(default_factory=SolverSpec)
    output: OutputSpec = field(default_factory=OutputSpec)

    def model_constants(self):
        return model.ModelConstants(**self.constants)

    def control_spec(self, name):
        return self.controls.get(name) or ControlSpec("fixed", getattr(model.U_STAR, name))

    def u_star(self):
        """Controls before any step, as a :class:`~williams_otto.model.ControlInput`."""
        vals = {}
        for name in model.CONTROL_NAMES:
            spec = self.control_spec(name)
            v = spec.value if spec.value is not None else spec.initial
            vals[name] = getattr(model.U_STAR, name) if v is None else v
        return model.ControlInput(**vals)

    def x0(self):
        s = self.initial_state
        if isinstance(s, str):
            if s == "x_star":
                return model.X_STAR.as_array()
            if s == "x0_sim":
                return model.X0_SIM.as_array()
            return model.find_steady_state(self.u_star(), c=self.model_constants()).as_array()
        return np.asarray(s, dtype=float)


# --- value parsing ----------------------------------------------------------

def _float(sec, key, raw):
    try:
        v = float(raw)
    except ValueError:
        raise ScenarioError(f"[{sec}] {key}: expected a number, got {raw!r}") from None
    if not np.isfinite(v):
        raise ScenarioError(f"[{sec}] {key}: value must be finite")
    return v


def _int(sec, key, raw):
    try:
        return int(raw)
    except ValueError:
        raise ScenarioError(f"[{sec}] {key}: expected an integer, got {raw!r}") from None


def _bool(sec, key, raw):
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ScenarioError(f"[{sec}] {key}: expected true/false, got {raw!r}")


def _choice(sec, key, raw, options):
    if raw not in options:
        raise ScenarioError(f"[{sec}] {key}: expected one of {', '.join(options)}, got {raw!r}")
    return raw


def _quantity(sec, key, raw):
    if raw not in model.QUANTITIES:
        raise ScenarioError(f"[{sec}] {key}: unknown quantity {raw!r}")
    return raw


def _pairs(sec, key, raw):
    """Parse ``a:1, b:2`` into ``[(a, 1.0), (b, 2.0)]``."""
    out = []
    for item in raw.split(","):
        item = item.strip()
        if not item:
            continue
        if ":" not in item:
            raise ScenarioError(f"[{sec}] {key}: expected name:value items, got {item!r}")
        name, val = (p.strip() for p in item.split(":", 1))
        out.append((_quantity(sec, key, name), _float(sec, key, val)))
    if not out:
        raise ScenarioError(f"[{sec}] {key}: empty list")
    return out


def _terms(sec, key, raw):
    """``1.0*F_pP:-1, 1.0*F_wG:1`` or ``F_pP:-1`` -> [(weight, stream, sign)]."""
    out = []
    for item in raw.split(","):
        item = item.strip()
        if not item:
            continue
        weight = 1.0
        if "*" in item:
            w, item = item.split("*", 1)
            weight = _float(sec, key, w.strip())
        (stream, sign), = _pairs(sec, key, item)
        out.append((weight, stream, sign))
    if not out:
        raise ScenarioError(f"[{sec}] {key}: empty list")
    return out


def _path(sec, key, raw):
    out = []
    for item in raw.split(","):
        item = item.strip()
        if not item:
            continue
        if "<=" not in item:
            raise ScenarioError(f"[{sec}] {key}: expected 'quantity <= bound', got {item!r}")
        q, b = (p.strip() for p in item.split("<=", 1))
        out.append((_quantity(sec, key, q), _float(sec, key, b)))
    return out


def _take(sec, data, spec):
    """Validate keys of one section against ``{key: parser}``."""
    unknown = set(data) - set(spec)
    if unknown:
        raise ScenarioError(f"[{sec}] unknown key(s): {', '.join(sorted(unknown))}")
    return {k: spec[k](sec, k, v) for k, v in data.items()}


_F, _I, _B = _float, _int, _bool


def _opt_f(sec, key, raw):
    return None if raw.strip() == "" else _float(sec, key, raw)


# --- building from section dictionaries --------------------------------------

def from_sections(sections):
    """Build a :class:`Scenario` from ``{section: {key: str}}``."""
    sections = {k: dict(v) for k, v in sections.items()}
    known = {"scenario", "model", "initial_state", "mesh", "objective", "constraints", "step", "solver", "output"}
    for sec in sections:
        head = sec.split(".", 1)[0]
        if sec not in known and head not in ("control", "channel"):
            raise ScenarioError(f"unknown section [{sec}]")
    if "scenario" not in sections:
        raise ScenarioError("missing [scenario] section")
    head = _take("scenario", sections["scenario"], {"name": lambda s, k, v: v.strip(),
                                                    "kind": lambda s, k, v: _choice(s, k, v, KINDS)})
    if "name" not in head or not head["name"]:
        raise ScenarioError("[scenario] name is required")
    if "kind" not in head:
        raise ScenarioError("[scenario] kind is required")
    sc = Scenario(name=head["name"], kind=head["kind"])

    if "model" in sections:
        names = [f.name for f in fields(model.ModelConstants) if f.name != "rho0"]
        spec = {n: _F for n in names}
        spec["rho0"] = lambda s, k, v: [_float(s, k, p) for p in v.split(",")]
        sc.constants = _take("model", sections["model"], spec)
        try:
            sc.model_constants()
        except ValueError as exc:
            raise ScenarioError(f"[model] {exc}") from None

    if "initial_state" in sections:
        data = sections["initial_state"]
        if "preset" in data:
            if len(data) > 1:
                raise ScenarioError("[initial_state] give either preset or all six masses")
            sc.initial_state = _choice("initial_state", "preset", data["preset"], STATE_PRESETS)
        else:
            vals = _take("initial_state", data, {n: _F for n in model.STATE_NAMES})
            missing = [n for n in model.STATE_NAMES if n not in vals]
            if missing:
                raise ScenarioError(f"[initial_state] missing {', '.join(missing)}")
            try:
                model.ProcessState(**vals)
            except ValueError as exc:
                raise ScenarioError(f"[initial_state] {exc}") from None
            sc.initial_state = [vals[n] for n in model.STATE_NAMES]

    if "mesh" in sections:
        sc.mesh = MeshSpec(**_take("mesh", sections["mesh"], {"tf": _F, "t0": _F, "elements": _I, "points": _I}))
    _check_mesh(sc.mesh)

    for sec, data in sections.items():
        if sec.startswith("control."):
            name = sec.split(".", 1)[1]
            if name not in model.CONTROL_NAMES:
                raise ScenarioError(f"[{sec}] unknown control {name!r}")
            vals = _take(sec, data, {"shape": lambda s, k, v: _choice(s, k, v, SHAPES), "value": _F, "lower": _F,
                                     "upper": _F, "initial": _F, "step_time": _F, "step_value": _F})
            spec = ControlSpec(**vals)
            _check_control(sec, name, spec)
            sc.controls[name] = spec
    if sc.controls:
        try:
            sc.u_star()
        except ValueError as exc:
            raise ScenarioError(f"[control] {exc}") from None

    if "objective" in sections:
        vals = _take("objective", sections["objective"], {
            "type": lambda s, k, v: _choice(s, k, v, OBJECTIVE_TYPES), "stream": _quantity, "sign": _F,
            "terms": _terms, "targets": _pairs, "t_start": _F, "alpha": _F, "ffb_penalty": _F})
        sc.objective = ObjectiveSpec(**vals)
        _check_objective(sc.objective)

    if "constraints" in sections:
        sc.constraints = ConstraintSpec(**_take("constraints", sections["constraints"],
                                                {"path": _path, "ffb_integral_max": _opt_f}))

    for sec, data in sections.items():
        if sec.startswith("channel."):
            name = sec.split(".", 1)[1]
            if name not in ("mu", "F_fA", "F_fB", "T"):
                raise ScenarioError(f"[{sec}] unsupported channel control {name!r}")
            vals = _take(sec, data, {"quantity": _quantity, "setpoint": _F, "k_prop": _F, "k_int": _F,
                                     "t_star": _F, "lower": _F, "upper": _F})
            for req in ("quantity", "setpoint"):
                if req not in vals:
                    raise ScenarioError(f"[{sec}] {req} is required")
            if ("k_prop" in vals) != ("k_int" in vals):
                raise ScenarioError(f"[{sec}] give both k_prop and k_int, or neither to tune automatically")
            sc.channels.append(ChannelSpec(control=name, **vals))

    if "step" in sections:
        vals = _take("step", sections["step"], {
            "control": lambda s, k, v: _choice(s, k, v, ("mu", "F_fA", "F_fB", "T")), "quantity": _quantity,
            "after": _F, "t_star": _F, "horizon": _F, "lower": _F, "upper": _F})
        for req in ("control", "quantity", "after"):
            if req not in vals:
                raise ScenarioError(f"[step] {req} is required")
        sc.step = StepSpec(**vals)
        if not 0 <= sc.step.t_star < sc.step.horizon:
            raise ScenarioError("[step] need 0 <= t_star < horizon")

    if "solver" in sections:
        sc.solver = SolverSpec(**_take("solver", sections["solver"], {
            "tol": _F, "max_iter": _I, "mu_init": _F, "mu_factor": _F, "bound_push": _F}))
    _check_solver(sc.solver)

    if "output" in sections:
        sc.output = OutputSpec(**_take("output", sections["output"], {
            "format": lambda s, k, v: _choice(s, k, v, ("csv", "json")), "emit_plotdata": _B,
            "render_figures": _B}))

    _check_kind(sc)
    return sc


def _check_mesh(m):
    if m.elements < 1:
        raise ScenarioError("[mesh] elements must be positive")
    if not 1 <= m.points <= 5:
        raise ScenarioError("[mesh] points must lie in 1..5")
    if not m.tf > m.t0:
        raise ScenarioError("[mesh] tf must exceed t0")


def _check_control(sec, name, spec):
    if spec.shape == "fixed":
        if spec.value is None:
            raise ScenarioError(f"[{sec}] fixed controls need a value")
        if (spec.step_time is None) != (spec.step_value is None):
            raise ScenarioError(f"[{sec}] step_time and step_value go together")
        for key, v in (("value", spec.value), ("step_value", spec.step_value)):
            if v is None:
                continue
            try:
                model.U_STAR.replace(**{name: v})
            except ValueError:
                raise ScenarioError(f"[{sec}] {key}={v} is out of range for {name}") from None
    else:
        if spec.lower is None or spec.upper is None:
            raise ScenarioError(f"[{sec}] free controls need lower and upper bounds")
        if not spec.lower <= spec.upper:
            raise ScenarioError(f"[{sec}] lower exceeds upper")
        if spec.step_time is not None or spec.step_value is not None or spec.value is not None:
            raise ScenarioError(f"[{sec}] value/step keys only apply to fixed controls")
        if spec.initial is not None and not spec.lower <= spec.initial <= spec.upper:
            raise ScenarioError(f"[{sec}] initial lies outside the bounds")


def _check_objective(o):
    if o.type == "integral" and o.stream is None:
        raise ScenarioError("[objective] integral objectives need a stream")
    if o.type == "weighted" and not o.terms:
        raise ScenarioError("[objective] weighted objectives need terms")
    if o.type == "tracking" and not o.targets:
        raise ScenarioError("[objective] tracking objectives need targets")
    if o.alpha < 0 or o.ffb_penalty < 0:
        raise ScenarioError("[objective] alpha and ffb_penalty must be non-negative")


def _check_solver(s):
    if not s.tol > 0:
        raise ScenarioError("[solver] tol must be positive")
    if s.max_iter < 0:
        raise ScenarioError("[solver] max_iter must be non-negative")
    if not 0 < s.mu_factor < 1 or not 0 < s.bound_push < 1 or not s.mu_init > 0:
        raise ScenarioError("[solver] mu_factor and bound_push must lie in (0, 1), mu_init > 0")


def _check_kind(sc):
    free = [n for n, c in sc.controls.items() if c.shape != "fixed"]
    if sc.kind in ("step-test", "tune") and sc.step is None:
        raise ScenarioError(f"kind {sc.kind} needs a [step] section")
    if sc.kind == "pi-run" and not sc.channels:
        raise ScenarioError("kind pi-run needs at least one [channel.<control>] section")
    if sc.kind == "optimize":
        if sc.objective is None or sc.objective.type == "tracking":
            raise ScenarioError("kind optimize needs an integral or weighted [objective]")
        if not free:
            raise ScenarioError("kind optimize needs at least one free control")
    if sc.kind == "track":
        if sc.objective is None or sc.objective.type != "tracking":
            raise ScenarioError("kind track needs a tracking [objective]")
        if not free:
            raise ScenarioError("kind track needs at least one free control")
    if sc.kind != "simulate" and any(c.step_time is not None for c in sc.controls.values()):
        raise ScenarioError("control steps (step_time/step_value) only apply to kind simulate")
    if sc.kind in ("simulate", "pi-run", "step-test", "tune") and free:
        raise ScenarioError(f"kind {sc.kind} takes fixed controls only")


# --- INI / JSON I/O ------------------------------------------------------------

def _parser():
    cp = configparser.ConfigParser(interpolation=None, strict=True, empty_lines_in_values=False,
                                   inline_comment_prefixes=(";", "#"), default_section="__none__")
    cp.optionxform = str
    return cp


def parse_text(text, source="<string>"):
    cp = _parser()
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ScenarioError(f"{source}: {exc}") from None
    return from_sections({s: dict(cp.items(s)) for s in cp.sections()})


def bundled_names():
    root = resources.files("williams_otto") / "scenarios"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".ini"))


def resolve(path_or_name):
    """A file path, or the name of a bundled scenario."""
    p = Path(path_or_name)
    if p.exists():
        return p
    root = resources.files("williams_otto") / "scenarios"
    cand = root / f"{path_or_name}.ini"
    if cand.is_file():
        return Path(str(cand))
    raise FileNotFoundError(f"no scenario file or bundled scenario named {path_or_name!r}")


def parse_scenario(path):
    """Read an INI (``.ini``) or JSON (``.json``) scenario file."""
    p = resolve(path)
    text = p.read_text()
    if p.suffix == ".json":
        return from_json(text, source=str(p))
    return parse_text(text, source=str(p))


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_sections(sc):
    """Inverse of :func:`from_sections` (values as strings)."""
    out = {"scenario": {"name": sc.name, "kind": sc.kind}}
    if sc.constants:
        out["model"] = {k: (",".join(_fmt(float(x)) for x in v) if k == "rho0" else _fmt(float(v)))
                        for k, v in sc.constants.items()}
    if isinstance(sc.initial_state, str):
        out["initial_state"] = {"preset": sc.initial_state}
    else:
        out["initial_state"] = {n: _fmt(float(v)) for n, v in zip(model.STATE_NAMES, sc.initial_state)}
    out["mesh"] = {k: _fmt(v) for k, v in asdict(sc.mesh).items()}
    for name, spec in sc.controls.items():
        out[f"control.{name}"] = {k: _fmt(v) for k, v in asdict(spec).items() if v is not None}
    if sc.objective is not None:
        o = sc.objective
        d = {"type": o.type, "sign": _fmt(o.sign), "t_start": _fmt(o.t_start), "alpha": _fmt(o.alpha),
             "ffb_penalty": _fmt(o.ffb_penalty)}
        if o.stream is not None:
            d["stream"] = o.stream
        if o.terms:
            d["terms"] = ", ".join(f"{_fmt(w)}*{s}:{_fmt(g)}" for w, s, g in o.terms)
        if o.targets:
            d["targets"] = ", ".join(f"{q}:{_fmt(v)}" for q, v in o.targets)
        out["objective"] = d
    c = sc.constraints
    if c.path or c.ffb_integral_max is not None:
        d = {}
        if c.path:
            d["path"] = ", ".join(f"{q} <= {_fmt(b)}" for q, b in c.path)
        if c.ffb_integral_max is not None:
            d["ffb_integral_max"] = _fmt(c.ffb_integral_max)
        out["constraints"] = d
    for ch in sc.channels:
        out[f"channel.{ch.control}"] = {k: _fmt(v) for k, v in asdict(ch).items() if v is not None and k != "control"}
    if sc.step is not None:
        out["step"] = {k: _fmt(v) for k, v in asdict(sc.step).items() if v is not None}
    out["solver"] = {k: _fmt(v) for k, v in asdict(sc.solver).items()}
    out["output"] = {k: _fmt(v) for k, v in asdict(sc.output).items()}
    return out


def to_ini(sc):
    lines = []
    for sec, data in to_sections(sc).items():
        lines.append(f"[{sec}]")
        lines += [f"{k} = {v}" for k, v in data.items()]
        lines.append("")
    return "\n".join(lines)


def to_json(sc):
    return json.dumps(to_sections(sc), indent=2)


def from_json(text, source="<json>"):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{source}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict) or not all(isinstance(v, dict) for v in data.values()):
        raise ScenarioError(f"{source}: expected an object of sections")
    return from_sections({s: {k: str(v) if not isinstance(v, str) else v for k, v in d.items()}
                          for s, d in data.items()})
