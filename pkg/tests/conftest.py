import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lapstrat import vehicle  # noqa: E402
from lapstrat.synth import make_track  # noqa: E402
from lapstrat.vehicle import VehicleParams  # noqa: E402

# Every lap simulated in this process is checked against the friction circle.
FRICTION_LOG = {"laps": 0, "violations": 0}
_run = vehicle.LapSimulator.run


def _checked_run(self, *args, **kwargs):
    lap = _run(self, *args, **kwargs)
    FRICTION_LOG["laps"] += 1
    FRICTION_LOG["violations"] += lap.friction_violations(1e-9)
    return lap


vehicle.LapSimulator.run = _checked_run


@pytest.fixture(autouse=True)
def _friction_circle_holds():
    before = FRICTION_LOG["violations"]
    yield
    assert FRICTION_LOG["violations"] == before, "friction circle violated in a simulated lap"


@pytest.fixture(scope="session")
def params():
    return VehicleParams()


@pytest.fixture(scope="session")
def oval():
    return make_track("oval-1km", 2.0)


@pytest.fixture(scope="session")
def bahrain():
    return make_track("bahrain-like", 2.0)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    tr = terminalreporter
    if ACCEPTANCE:
        tr.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            tr.write_line(ACCEPTANCE[n])
    tr.write_line(f"friction circle: {FRICTION_LOG['violations']} violations over {FRICTION_LOG['laps']} "
                  f"simulated laps")
