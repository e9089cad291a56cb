import numpy as np
import pytest

from vpbsim.collision import bgk_operator
from vpbsim.spatial import TorusGrid
from vpbsim.velocity_space import HermiteBasis


@pytest.fixture(scope="session")
def basis4():
    return HermiteBasis(4)


@pytest.fixture(scope="session")
def grid16():
    return TorusGrid(16)


@pytest.fixture(scope="session")
def bgk4(basis4):
    return bgk_operator(basis4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


@pytest.fixture(scope="session")
def verdict(request):
    """Record one acceptance line; returns ``ok`` so callers can assert on it."""
    lines = request.config.stash[_VERDICTS]

    def record(label, ok, detail=""):
        if isinstance(ok, str):
            status = ok
        else:
            ok = bool(ok)
            status = "PASS" if ok else "FAIL"
        line = f"{status:<5} {label}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
