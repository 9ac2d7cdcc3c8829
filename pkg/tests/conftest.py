import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stcount.core import population_fractions
from stcount.simulate import eight_region_adjacency

settings.register_profile("stcount", deadline=None, derandomize=True, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("stcount")


@pytest.fixture
def eight():
    return eight_region_adjacency()


@pytest.fixture
def equal_offset():
    return lambda K: population_fractions(np.full(K, 100000.0))


# Acceptance criteria report one line each; the lines are repeated in the
# terminal summary so they survive output capture.
_CRITERIA = []


@pytest.fixture
def criterion():
    def report(cid, ok, detail):
        line = f"criterion {cid:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA.append(line)
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
