import json
import textwrap

import numpy as np
import pytest

from williams_otto import cli, model, report

SIM = """
[scenario]
name = {name}
kind = simulate
[initial_state]
preset = {preset}
[mesh]
tf = 20
elements = 20
[control.F_fB]
value = 20
{extra}
"""

ZERO_STATE = """
[scenario]
name = zero
kind = simulate
[initial_state]
m_A = 0
m_B = 0
m_C = 0
m_E = 0
m_P = 0
m_G = 0
[mesh]
tf = 5
elements = 5
"""

SHORT_OPT = """
[scenario]
name = short_opt
kind = optimize
[mesh]
tf = 10
elements = 5
[control.T]
shape = spline
lower = 200
upper = 800
initial = 580
[objective]
type = integral
stream = F_wG
sign = 1
[solver]
max_iter = 2
"""


def write(tmp_path, fname, text):
    p = tmp_path / fname
    p.write_text(textwrap.dedent(text))
    return str(p)


def sim_file(tmp_path, name="sim", preset="x_star", extra=""):
    return write(tmp_path, f"{name}.ini", SIM.format(name=name, preset=preset, extra=extra))


def read_csv(path):
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
    return header, np.loadtxt(path, delimiter=",", skiprows=1)


class TestExitCodes:
    def test_parse_error_writes_nothing(self, tmp_path):
        good = sim_file(tmp_path)
        bad = write(tmp_path, "bad.ini", "[scenario]\nname = bad\nkind = simulate\n[control.eta]\nvalue = 1.5\n")
        out = tmp_path / "out"
        assert cli.main(["--config", good, "--config", bad, "--out-dir", str(out)]) == cli.EXIT_PARSE
        assert not out.exists()

    def test_missing_config(self, tmp_path, capsys):
        assert cli.main(["--out-dir", str(tmp_path)]) == cli.EXIT_PARSE
        assert cli.main(["--config", str(tmp_path / "nope.ini")]) == cli.EXIT_PARSE

    def test_duplicate_names(self, tmp_path):
        p = sim_file(tmp_path)
        assert cli.main(["--config", p, "--config", p, "--out-dir", str(tmp_path)]) == cli.EXIT_PARSE

    def test_model_error(self, tmp_path):
        p = write(tmp_path, "zero.ini", ZERO_STATE)
        assert cli.main(["--config", p, "--out-dir", str(tmp_path / "o")]) == cli.EXIT_MODEL
        summary = json.loads((tmp_path / "o" / "zero" / "summary.json").read_text())
        assert summary["status"] == "model-error" and "mass" in summary["message"]

    def test_solver_error(self, tmp_path):
        p = write(tmp_path, "o.ini", SHORT_OPT)
        assert cli.main(["--config", p, "--out-dir", str(tmp_path / "o")]) == cli.EXIT_SOLVER
        summary = json.loads((tmp_path / "o" / "short_opt" / "summary.json").read_text())
        assert summary["details"]["solver_status"] == "IterLimit"
        # the partial iterate is still written
        assert (tmp_path / "o" / "short_opt" / "trajectory.csv").exists()

    def test_io_error(self, tmp_path):
        blocker = tmp_path / "blocker"
        blocker.write_text("")
        assert cli.main(["--config", sim_file(tmp_path), "--out-dir", str(blocker)]) == cli.EXIT_IO

    def test_worst_code_wins(self, tmp_path):
        p1 = write(tmp_path, "zero.ini", ZERO_STATE)
        p2 = write(tmp_path, "o.ini", SHORT_OPT)
        assert cli.main(["--config", p1, "--config", p2, "--out-dir", str(tmp_path / "o")]) == cli.EXIT_SOLVER

    def test_ok(self, tmp_path, capsys):
        assert cli.main(["--config", sim_file(tmp_path), "--out-dir", str(tmp_path / "o")]) == cli.EXIT_OK
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0].startswith("scenario,kind,status")
        assert lines[1].startswith("sim,simulate,success")


class TestTrajectoryOutput:
    def test_header_bit_exact(self, tmp_path):
        cli.main(["--config", sim_file(tmp_path), "--out-dir", str(tmp_path)])
        header, rows = read_csv(tmp_path / "sim" / "trajectory.csv")
        assert header == ("t, m_A, m_B, m_C, m_E, m_P, m_G, F_fA, F_fB, T, mu, eta, F_tP, F_pP, F_wG")
        assert rows.shape == (20 * 3 + 1, 15)
        assert np.all(np.diff(rows[:, 0]) > 0)
        assert rows[0, 0] == 0.0 and rows[-1, 0] == pytest.approx(20.0, abs=1e-12)

    def test_steady_start_stays_flat(self, tmp_path):
        cli.main(["--config", sim_file(tmp_path, preset="steady"), "--out-dir", str(tmp_path)])
        _, rows = read_csv(tmp_path / "sim" / "trajectory.csv")
        np.testing.assert_allclose(rows[:, 1:7], np.broadcast_to(rows[0, 1:7], rows[:, 1:7].shape),
                                   rtol=0, atol=1e-8)

    def test_streams_consistent_with_states(self, tmp_path):
        cli.main(["--config", sim_file(tmp_path, preset="x0_sim"), "--out-dir", str(tmp_path)])
        _, rows = read_csv(tmp_path / "sim" / "trajectory.csv")
        for r in rows[::7]:
            x, u = r[1:7], r[7:12]
            assert r[13] == pytest.approx(model.quantity("F_pP", x, u), rel=1e-14)
            assert r[14] == pytest.approx(model.quantity("F_wG", x, u), rel=1e-14)

    def test_reproducible(self, tmp_path):
        p = sim_file(tmp_path, preset="x0_sim")
        cli.main(["--config", p, "--out-dir", str(tmp_path / "a")])
        cli.main(["--config", p, "--out-dir", str(tmp_path / "b")])
        assert (tmp_path / "a/sim/trajectory.csv").read_bytes() == (tmp_path / "b/sim/trajectory.csv").read_bytes()

    def test_mesh_override(self, tmp_path):
        cli.main(["--config", sim_file(tmp_path), "--out-dir", str(tmp_path), "--mesh-elements", "7",
                  "--colloc-points", "2"])
        _, rows = read_csv(tmp_path / "sim" / "trajectory.csv")
        assert rows.shape[0] == 7 * 2 + 1

    def test_step_lands_on_mesh_break(self, tmp_path):
        p = sim_file(tmp_path, extra="step_time = 5.5\nstep_value = 21\n")
        cli.main(["--config", p, "--out-dir", str(tmp_path)])
        _, rows = read_csv(tmp_path / "sim" / "trajectory.csv")
        t, ffb = rows[:, 0], rows[:, 8]
        assert np.all(ffb[t <= 5.5] == 20) and np.all(ffb[t > 5.5] == 21)
        assert np.any(np.isclose(t, 5.5, rtol=0, atol=1e-12))

    def test_json_format(self, tmp_path):
        cli.main(["--config", sim_file(tmp_path), "--out-dir", str(tmp_path), "--format", "json"])
        data = json.loads((tmp_path / "sim" / "trajectory.json").read_text())
        assert tuple(data["columns"]) == report.COLUMNS
        assert len(data["data"]["t"]) == 61

    def test_plotdata_and_figure(self, tmp_path):
        cli.main(["--config", sim_file(tmp_path), "--out-dir", str(tmp_path), "--emit-plotdata",
                  "--render-figures"])
        d = tmp_path / "sim"
        top_header, top = read_csv(d / "plot_top.csv")
        bottom_header, bottom = read_csv(d / "plot_bottom.csv")
        assert top_header.split(", ")[0] == "t"
        assert bottom_header == "t, m_A, m_B, m_C, m_E, m_P, m_G"
        assert top.shape[0] == bottom.shape[0] == 61
        assert (d / "figure.png").read_bytes()[:4] == b"\x89PNG"

    def test_parallel_matches_sequential(self, tmp_path):
        a = sim_file(tmp_path, name="a", preset="x0_sim")
        b = sim_file(tmp_path, name="b", preset="x_star")
        cli.main(["--config", a, "--config", b, "--out-dir", str(tmp_path / "seq")])
        cli.main(["--config", a, "--config", b, "--out-dir", str(tmp_path / "par"), "--parallel", "2"])
        for n in "ab":
            assert (tmp_path / f"seq/{n}/trajectory.csv").read_bytes() == \
                (tmp_path / f"par/{n}/trajectory.csv").read_bytes()


class TestMisc:
    def test_list(self, capsys):
        assert cli.main(["--list"]) == 0
        names = capsys.readouterr().out.split()
        assert {"waste_min", "yield_max", "combined", "pi_run_fpp"} <= set(names)

    @pytest.mark.parametrize("fmt", ["ini", "json"])
    def test_dump_applies_overrides(self, capsys, fmt):
        assert cli.main(["--config", "yield_max", "--dump", fmt, "--tol", "1e-6"]) == 0
        out = capsys.readouterr().out
        assert "1e-06" in out

    def test_simulate_step_reaches_new_steady_state(self, tmp_path):
        assert cli.main(["--config", "simulate_step_ffb", "--out-dir", str(tmp_path)]) == 0
        _, rows = read_csv(tmp_path / "simulate_step_ffb" / "trajectory.csv")
        u = rows[-1, 7:12]
        xs = model.find_steady_state(u).as_array()
        np.testing.assert_allclose(rows[-1, 1:7], xs, rtol=0, atol=1e-4)
