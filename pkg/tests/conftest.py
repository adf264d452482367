import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from helpers import REMOTE_BOX, tiny_instance
from resp.reduced_rank import place_knot_grid

settings.register_profile(
    "resp", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("resp")

@pytest.fixture
def tiny():
    return tiny_instance(3)


@pytest.fixture(scope="session")
def recovery_geometry():
    rng = np.random.default_rng(0)
    locs = np.c_[rng.uniform(-109, -102, 30), rng.uniform(37, 41, 30)]
    remote = np.array([(lo, la) for lo in np.linspace(-170, -120, 10) for la in np.linspace(-10, 30, 6)])
    knots = place_knot_grid(REMOTE_BOX, 10)
    return locs, remote, knots


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(RESULTS):
        parts = RESULTS[crit]
        ok = all(p[1] for p in parts)
        detail = "; ".join(f"{name}: {'ok' if good else 'FAIL'} ({d})" for name, good, d in parts)
        terminalreporter.write_line(f"criterion {crit:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
