"""Scenario-driven command line front end.

Usage::

    williams-otto --config waste_min --out-dir results
    williams-otto --config my.ini --config yield_max --parallel 2 --emit-plotdata

``--config`` accepts a path to an ``.ini``/``.json`` scenario or the name of
a bundled scenario (``--list`` prints them). Each scenario writes
``<out-dir>/<name>/trajectory.csv`` (or ``.json``) and ``summary.json``.

Exit codes: 0 success, 2 scenario parse error, 3 model error, 4 solver or
analysis failure, 5 I/O error. With several scenarios the largest code wins.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import colloc, model, nlpsolve, ocp, pictrl, report, scenario
from .model import CONTROL_NAMES

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_MODEL = 3
EXIT_SOLVER = 4
EXIT_IO = 5


@dataclass
class RunSummary:
    scenario: str
    kind: str
    status: str = "success"
    exit_code: int = EXIT_OK
    objective: float | None = None
    integrals: dict = field(default_factory=dict)
    iterations: int | None = None
    kkt_residual: float | None = None
    wall_time: float = 0.0
    paths: dict = field(default_factory=dict)
    message: str = ""
    details: dict = field(default_factory=dict)

    @property
    def success(self):
        return self.exit_code == EXIT_OK


@dataclass
class _Outcome:
    trajectory: colloc.DiscreteTrajectory
    controls: tuple          # controls shown in plot data
    quantities: tuple        # quantities shown in plot data
    setpoints: dict = field(default_factory=dict)
    solve: object = None     # nlpsolve.SolveResult for optimization kinds
    objective: float | None = None
    details: dict = field(default_factory=dict)
    failure: str = ""


# --- overrides -------------------------------------------------------------------

def apply_overrides(sc, args):
    """Copy of ``sc`` with command-line values taking precedence."""
    mesh, solver, output = sc.mesh, sc.solver, sc.output
    if args.mesh_elements is not None:
        mesh = dataclasses.replace(mesh, elements=args.mesh_elements)
    if args.colloc_points is not None:
        mesh = dataclasses.replace(mesh, points=args.colloc_points)
    if args.tol is not None:
        solver = dataclasses.replace(solver, tol=args.tol)
    if args.max_iter is not None:
        solver = dataclasses.replace(solver, max_iter=args.max_iter)
    if args.format is not None:
        output = dataclasses.replace(output, format=args.format)
    if args.emit_plotdata:
        output = dataclasses.replace(output, emit_plotdata=True)
    if args.render_figures:
        output = dataclasses.replace(output, render_figures=True)
    scenario._check_mesh(mesh)
    scenario._check_solver(solver)
    return dataclasses.replace(sc, mesh=mesh, solver=solver, output=output)


def _solve_options(sc, log_iterations):
    s = sc.solver
    return nlpsolve.SolveOptions(tol=s.tol, max_iter=s.max_iter, mu_init=s.mu_init, mu_factor=s.mu_factor,
                                 bound_push=s.bound_push, log=nlpsolve.stderr_log if log_iterations else None)


# --- kinds -----------------------------------------------------------------------

def _run_simulate(sc, c, log):
    u0 = sc.u_star().as_array()
    steps = {}
    for name, spec in sc.controls.items():
        if spec.step_time is not None:
            steps.setdefault(spec.step_time, []).append((CONTROL_NAMES.index(name), spec.step_value))
    times = sorted(steps)
    rows = [u0.copy()]
    for t in times:
        u = rows[-1].copy()
        for i, v in steps[t]:
            u[i] = v
        rows.append(u)
    profile = colloc.PiecewiseProfile(times, rows) if times else colloc.ConstantProfile(u0)
    m = sc.mesh
    mesh = colloc.Mesh.uniform(m.t0, m.tf, m.elements).with_breaks(times)
    traj = colloc.simulate(ocp._ode_for(c), sc.x0(), profile, mesh, colloc.radau_basis(m.points),
                           state_names=model.STATE_NAMES, control_names=CONTROL_NAMES)
    stepped = tuple(n for n in CONTROL_NAMES if sc.control_spec(n).step_time is not None) or ("F_fB",)
    xf, uf = traj.final_state, rows[-1]
    details = {"final_state": dict(zip(model.STATE_NAMES, xf)),
               "final_rhs_inf_norm": float(np.abs(model.rhs(xf, uf, c)).max())}
    return _Outcome(traj, stepped, ("F_pP", "F_wG"), details=details)


def _step_response_details(sr):
    return {"control": sr.control, "quantity": sr.quantity, "u_before": sr.u_before, "u_after": sr.u_after,
            "t_star": sr.t_star, "y_before": sr.y_before, "y_after": sr.y_after, "delta_y": sr.delta_y,
            "delta_rel_u": sr.delta_rel_u, "k_proc": sr.k_proc, "t_proc": sr.t_proc,
            "first_order": sr.first_order, "degenerate": sr.degenerate,
            "overshoot": sr.overshoot, "undershoot": sr.undershoot}


def _run_step(sc, c, log, tune=False):
    st = sc.step
    bounds = (st.lower, st.upper) if st.lower is not None and st.upper is not None else None
    sr = pictrl.run_step_test(st.control, st.quantity, u_star=sc.u_star(), u_after=st.after, t_star=st.t_star,
                              horizon=st.horizon, n_elements=sc.mesh.elements, n_points=sc.mesh.points,
                              bounds=bounds, c=c)
    details = {"step_response": _step_response_details(sr)}
    failure = ""
    if tune:
        try:
            kp, ki = pictrl.skogestad_gains(sr)
            details["gains"] = {"k_prop": kp, "k_int": ki}
        except pictrl.TuningError as exc:
            failure = str(exc)
    return _Outcome(sr.trajectory, (st.control,), (st.quantity,), details=details, failure=failure)


def _run_pi(sc, c, log):
    u0 = sc.u_star()
    x0 = sc.x0()
    channels, gains = [], {}
    for ch in sc.channels:
        bounds = (ch.lower, ch.upper) if ch.lower is not None and ch.upper is not None else None
        kp, ki = ch.k_prop, ch.k_int
        if kp is None:
            _, (kp, ki) = pictrl.tune_channel(ch.control, ch.quantity, u_star=u0, bounds=bounds, c=c)
        gains[ch.control] = {"k_prop": kp, "k_int": ki}
        channels.append(pictrl.PiChannel(ch.control, ch.quantity, ch.setpoint, kp, ki, t_star=ch.t_star,
                                         bounds=bounds))
    run = pictrl.run_closed_loop(channels, x0=x0, u_star=u0, horizon=sc.mesh.tf, n_elements=sc.mesh.elements,
                                 n_points=sc.mesh.points, c=c)
    traj = run.trajectory
    t = traj.sample_times()
    setpoints = {ch.quantity: (t, np.full(t.shape, ch.setpoint)) for ch in channels}
    tn = traj.node_times.ravel()
    band = {q: pictrl.band_entry_time(tn, run.setpoint_traces[q], ch.setpoint, 0.01, ch.t_star)
            for q, ch in zip(run.setpoint_traces, channels)}
    details = {"gains": gains, "settled": run.settled, "terminal_errors": run.terminal_errors,
               "band_entry_time_1pct": band}
    failure = "" if run.settled else "closed loop did not settle within the horizon"
    return _Outcome(traj, tuple(ch.control for ch in channels), tuple(ch.quantity for ch in channels),
                    setpoints=setpoints, details=details, failure=failure)


def _shape(spec):
    if spec.shape == "fixed":
        return ocp.Fixed(spec.value)
    cls = {"constant": ocp.Constant, "piecewise": ocp.PiecewiseConstant, "spline": ocp.Spline}[spec.shape]
    return cls(spec.lower, spec.upper, spec.initial)


def build_ocp(sc, c=None):
    """Optimal control problem described by an ``optimize`` scenario."""
    c = c or sc.model_constants()
    o = sc.objective
    if o.type == "integral":
        obj = ocp.IntegralOfStream(o.stream, o.sign)
    else:
        obj = ocp.WeightedSum(tuple((w, ocp.IntegralOfStream(s, g)) for w, s, g in o.terms))
    return ocp.OcProblem(
        tf=sc.mesh.tf, t0=sc.mesh.t0, x0=sc.x0(), controls={n: _shape(sc.control_spec(n)) for n in CONTROL_NAMES},
        objective=obj, path_constraints=tuple(sc.constraints.path), n_elements=sc.mesh.elements,
        n_points=sc.mesh.points, ffb_integral_max=sc.constraints.ffb_integral_max, ffb_penalty=o.ffb_penalty,
        constants=c)


def _free(sc):
    return tuple(n for n in CONTROL_NAMES if sc.control_spec(n).shape != "fixed")


def _run_optimize(sc, c, log):
    sol = ocp.solve_ocp(build_ocp(sc, c), _solve_options(sc, log))
    details = {"max_path_violation": sol.max_path_violation}
    failure = "" if sol.success else f"solver finished with status {sol.result.status.value}: {sol.result.message}"
    quantities = tuple(dict.fromkeys(["F_pP", "F_wG"] + [q for q, _ in sc.constraints.path]))
    return _Outcome(sol.trajectory, _free(sc), quantities, solve=sol.result, objective=sol.objective,
                    details=details, failure=failure)


def _run_track(sc, c, log):
    o = sc.objective
    free = _free(sc)
    bounds = {n: (sc.control_spec(n).lower, sc.control_spec(n).upper) for n in free}
    sol = ocp.track_optimal(o.targets, free_controls=free, t_star=o.t_start, tf=sc.mesh.tf, alpha=o.alpha,
                            opts=_solve_options(sc, log), x0=sc.x0(), u_star=sc.u_star(),
                            n_elements=sc.mesh.elements, n_points=sc.mesh.points, bounds=bounds, c=c)
    traj = sol.full_trajectory()
    t = traj.sample_times()
    setpoints = {q: (t, np.full(t.shape, v)) for q, v in o.targets}
    tn = traj.node_times.ravel()
    band = {q: pictrl.band_entry_time(tn, ocp.node_quantity(traj, q, c).ravel(), v, 0.01, o.t_start)
            for q, v in o.targets}
    details = {"terminal_values": sol.extras["terminal_values"],
               "terminal_derivative_inf_norm": float(np.abs(sol.extras["terminal_derivative"]).max()),
               "band_entry_time_1pct": band}
    failure = "" if sol.success else f"solver finished with status {sol.result.status.value}: {sol.result.message}"
    return _Outcome(traj, free, tuple(q for q, _ in o.targets), setpoints=setpoints, solve=sol.result,
                    objective=sol.objective, details=details, failure=failure)


_DISPATCH = {
    "simulate": _run_simulate,
    "step-test": _run_step,
    "tune": lambda sc, c, log: _run_step(sc, c, log, tune=True),
    "pi-run": _run_pi,
    "optimize": _run_optimize,
    "track": _run_track,
}


# --- running ---------------------------------------------------------------------

def run(sc, out_dir=".", log_iterations=False):
    """Run one scenario and write its outputs under ``out_dir/<name>``."""
    t0 = time.perf_counter()
    summary = RunSummary(sc.name, sc.kind)
    target = Path(out_dir) / sc.name
    outcome = None
    try:
        c = sc.model_constants()
        outcome = _DISPATCH[sc.kind](sc, c, log_iterations)
    except (model.ModelError, ocp.OcpError) as exc:
        summary.status, summary.exit_code, summary.message = "model-error", EXIT_MODEL, str(exc)
    except (nlpsolve.SolverError, colloc.CollocationError, pictrl.SettlingError, pictrl.InstabilityError,
            pictrl.TuningError) as exc:
        summary.status, summary.exit_code, summary.message = "solver-error", EXIT_SOLVER, str(exc)
    except ValueError as exc:
        summary.status, summary.exit_code, summary.message = "model-error", EXIT_MODEL, str(exc)
    if outcome is not None:
        summary.details = outcome.details
        summary.integrals = ocp.trajectory_integrals(outcome.trajectory, c)
        summary.objective = outcome.objective
        if outcome.solve is not None:
            summary.iterations = outcome.solve.iterations
            summary.kkt_residual = outcome.solve.kkt_residual
            summary.details["solver_status"] = outcome.solve.status.value
            summary.details["solver_time"] = outcome.solve.wall_time
        if outcome.failure:
            summary.status, summary.exit_code, summary.message = "solver-error", EXIT_SOLVER, outcome.failure
    try:
        target.mkdir(parents=True, exist_ok=True)
        if outcome is not None:
            table = report.trajectory_table(outcome.trajectory, c)
            summary.paths["trajectory"] = str(report.write_trajectory(target, table, sc.output.format))
            if sc.output.emit_plotdata or sc.output.render_figures:
                slices = report.plot_slices(table, outcome.controls, outcome.quantities, outcome.setpoints, c)
                if sc.output.emit_plotdata:
                    top, bottom = report.write_plotdata(target, slices)
                    summary.paths["plot_top"], summary.paths["plot_bottom"] = str(top), str(bottom)
                if sc.output.render_figures:
                    summary.paths["figure"] = str(report.render_figure(target, slices, sc.name))
        summary.wall_time = time.perf_counter() - t0
        summary.paths["summary"] = str(target / "summary.json")
        report.write_summary(target, dataclasses.asdict(summary))
    except OSError as exc:
        summary.status, summary.exit_code, summary.message = "io-error", EXIT_IO, str(exc)
    return summary


def _run_job(job):
    sc, out_dir, log = job
    return run(sc, out_dir, log)


def build_parser():
    p = argparse.ArgumentParser(prog="williams-otto", description="Run Williams-Otto process scenarios.")
    p.add_argument("--config", action="append", metavar="PATH",
                   help="scenario file (.ini or .json) or bundled scenario name; repeatable")
    p.add_argument("--out-dir", default="results", metavar="PATH")
    p.add_argument("--mesh-elements", type=int, metavar="N")
    p.add_argument("--colloc-points", type=int, metavar="K")
    p.add_argument("--tol", type=float, metavar="X")
    p.add_argument("--max-iter", type=int, metavar="N")
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--log-iterations", action="store_true", help="stream solver iterations to stderr")
    p.add_argument("--emit-plotdata", action="store_true", help="write plot_top.csv / plot_bottom.csv")
    p.add_argument("--render-figures", action="store_true", help="also render figure.png with matplotlib")
    p.add_argument("--parallel", type=int, default=1, metavar="N", help="run up to N scenarios concurrently")
    p.add_argument("--list", action="store_true", help="list bundled scenarios and exit")
    p.add_argument("--dump", choices=("ini", "json"), help="print the parsed scenario(s) and exit")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.list:
        print("\n".join(scenario.bundled_names()))
        return EXIT_OK
    if not args.config:
        parser.print_usage(sys.stderr)
        print("williams-otto: error: --config is required", file=sys.stderr)
        return EXIT_PARSE
    if args.parallel < 1:
        print("williams-otto: error: --parallel must be positive", file=sys.stderr)
        return EXIT_PARSE

    scenarios = []
    for path in args.config:
        try:
            scenarios.append(apply_overrides(scenario.parse_scenario(path), args))
        except scenario.ScenarioError as exc:
            print(f"williams-otto: {exc}", file=sys.stderr)
            return EXIT_PARSE
        except OSError as exc:
            print(f"williams-otto: {exc}", file=sys.stderr)
            return EXIT_PARSE if isinstance(exc, FileNotFoundError) else EXIT_IO
    names = [sc.name for sc in scenarios]
    if len(set(names)) != len(names):
        print("williams-otto: scenario names must be distinct", file=sys.stderr)
        return EXIT_PARSE
    if args.dump:
        for sc in scenarios:
            print(scenario.to_ini(sc) if args.dump == "ini" else scenario.to_json(sc))
        return EXIT_OK

    jobs = [(sc, args.out_dir, args.log_iterations) for sc in scenarios]
    if args.parallel > 1 and len(jobs) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.parallel) as pool:
            summaries = list(pool.map(_run_job, jobs))
    else:
        summaries = [_run_job(j) for j in jobs]

    print("scenario,kind,status,objective,int_F_pP,int_F_wG,iterations,kkt_residual,wall_time,out")
    for s in summaries:
        obj = "" if s.objective is None else report.fmt(s.objective)
        it = "" if s.iterations is None else str(s.iterations)
        kkt = "" if s.kkt_residual is None else f"{s.kkt_residual:.3e}"
        pp = s.integrals.get("int_F_pP")
        wg = s.integrals.get("int_F_wG")
        print(f"{s.scenario},{s.kind},{s.status},{obj},{'' if pp is None else f'{pp:.6g}'},"
              f"{'' if wg is None else f'{wg:.6g}'},{it},{kkt},{s.wall_time:.2f},{s.paths.get('summary', '')}")
        if s.message:
            print(f"williams-otto: {s.scenario}: {s.message}", file=sys.stderr)
    return max(s.exit_code for s in summaries)


if __name__ == "__main__":
    sys.exit(main())
