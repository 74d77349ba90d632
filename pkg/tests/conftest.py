import numpy as np
import pytest

from williams_otto import cli, scenario

_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_CRITERIA] = {}


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records an acceptance outcome, then asserts it."""
    results = request.config.stash[_CRITERIA]

    def record(n, ok, detail=""):
        results[n] = (bool(ok), detail)
        assert ok, f"criterion {n}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_CRITERIA, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def bundled(tmp_path_factory):
    """``bundled(name)`` runs a bundled scenario once per session; returns ``(summary, csv_rows)``."""
    out = tmp_path_factory.mktemp("bundled")
    cache = {}

    def get(name):
        if name not in cache:
            s = cli.run(scenario.parse_scenario(name), out)
            rows = np.loadtxt(out / name / "trajectory.csv", delimiter=",", skiprows=1)
            cache[name] = (s, rows)
        return cache[name]

    return get
