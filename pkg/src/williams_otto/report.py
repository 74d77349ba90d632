"""Trajectory tables, run summaries and plot data."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import model
from .model import CONTROL_NAMES, STATE_NAMES

STREAM_COLUMNS = ("F_tP", "F_pP", "F_wG")
COLUMNS = ("t",) + STATE_NAMES + CONTROL_NAMES + STREAM_COLUMNS


def fmt(v):
    return format(float(v), ".17g")


def trajectory_table(traj, c=model.DEFAULT_CONSTANTS):
    """Rows at the start time and every collocation node, columns :data:`COLUMNS`."""
    t = traj.sample_times()
    X = traj.sample_states()[:, :len(STATE_NAMES)]
    U = traj.sample_controls()
    S = [np.broadcast_to(np.asarray(model.quantity(q, list(X.T), list(U.T), c), dtype=float), t.shape)
         for q in STREAM_COLUMNS]
    return np.column_stack([t, X, U] + S)


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        fh.write(", ".join(columns) + "\n")
        for r in rows:
            fh.write(",".join(fmt(v) for v in r) + "\n")
    return path


def write_trajectory(out_dir, table, fmt_name="csv"):
    out_dir = Path(out_dir)
    if fmt_name == "json":
        path = out_dir / "trajectory.json"
        data = {name: [float(v) for v in table[:, j]] for j, name in enumerate(COLUMNS)}
        path.write_text(json.dumps({"columns": list(COLUMNS), "data": data}, indent=1))
        return path
    return write_csv(out_dir / "trajectory.csv", COLUMNS, table)


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if np.isfinite(v) else None
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, Path):
        return str(v)
    return v


def write_summary(out_dir, summary):
    path = Path(out_dir) / "summary.json"
    path.write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n")
    return path


# --- plot data ----------------------------------------------------------------

def plot_slices(table, controls, quantities, setpoints=None, c=model.DEFAULT_CONSTANTS):
    """Two panels: chosen controls and quantities on top, the six states below."""
    idx = {n: i for i, n in enumerate(COLUMNS)}
    top_cols = ["t"] + list(controls)
    top = [table[:, 0]] + [table[:, idx[n]] for n in controls]
    X = table[:, 1:1 + len(STATE_NAMES)]
    U = table[:, 1 + len(STATE_NAMES):1 + len(STATE_NAMES) + len(CONTROL_NAMES)]
    for q in quantities:
        top_cols.append(q)
        if q in idx:
            top.append(table[:, idx[q]])
        else:
            v = model.quantity(q, list(X.T), list(U.T), c)
            top.append(np.broadcast_to(np.asarray(v, dtype=float), table[:, 0].shape))
    for q, (times, values) in (setpoints or {}).items():
        top_cols.append(f"{q}_sp")
        top.append(np.interp(table[:, 0], times, values))
    bottom_cols = ["t"] + list(STATE_NAMES)
    bottom = table[:, :1 + len(STATE_NAMES)]
    return (top_cols, np.column_stack(top)), (bottom_cols, bottom)


def write_plotdata(out_dir, slices):
    (tc, top), (bc, bottom) = slices
    out_dir = Path(out_dir)
    return [write_csv(out_dir / "plot_top.csv", tc, top), write_csv(out_dir / "plot_bottom.csv", bc, bottom)]


def render_figure(out_dir, slices, title=""):
    """Render the two plot panels to ``figure.png`` (non-interactive backend)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    (tc, top), (bc, bottom) = slices
    names = [n for n in tc[1:] if not n.endswith("_sp")]
    fig, axes = plt.subplots(2, max(len(names), 1), figsize=(4 * max(len(names), 2), 6), squeeze=False)
    for j, name in enumerate(names):
        ax = axes[0, j]
        ax.plot(top[:, 0], top[:, tc.index(name)], lw=1.2)
        sp = f"{name}_sp"
        if sp in tc:
            ax.plot(top[:, 0], top[:, tc.index(sp)], lw=1.0, color="tab:orange")
        ax.set_title(name)
        ax.set_xlabel("t [h]")
    gs = axes[1, 0].get_gridspec()
    for ax in axes[1]:
        ax.remove()
    ax = fig.add_subplot(gs[1, :])
    for j, name in enumerate(bc[1:]):
        ax.plot(bottom[:, 0], bottom[:, j + 1], lw=1.0, label=name)
    ax.set_xlabel("t [h]")
    ax.set_ylabel("mass [klb]")
    ax.legend(ncol=6, fontsize="small")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(out_dir) / "figure.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
