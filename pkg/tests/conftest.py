import numpy as np
import pytest

from hmflow.sphere_geometry import build_icosphere

_RESULTS = {}


def record(criterion, ok, detail=""):
    """Store one acceptance line; printed in the terminal summary."""
    _RESULTS[criterion] = (bool(ok), detail)


@pytest.fixture
def acceptance():
    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(_RESULTS):
        ok, detail = _RESULTS[c]
        terminalreporter.write_line(f"criterion {c:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


_MESHES = {}


def mesh_at(level):
    if level not in _MESHES:
        _MESHES[level] = build_icosphere(level)
    return _MESHES[level]


@pytest.fixture(scope="session")
def mesh3():
    return mesh_at(3)


@pytest.fixture(scope="session")
def mesh4():
    return mesh_at(4)


@pytest.fixture(scope="session")
def mesh5():
    return mesh_at(5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
