import numpy as np
import pytest

from varistep.geometry import ReferenceGrid


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def grid5():
    return ReferenceGrid(5, 5)


def random_feasible(grid, rng, amp=0.02):
    """Small random perturbation of the identity with P-nodes on gamma."""
    X = grid.identity() + amp * rng.standard_normal((grid.nx, grid.ny, 2))
    return grid.apply_gamma(X)


def random_rate(grid, rng):
    b = rng.standard_normal((grid.nx, grid.ny, 2))
    b[grid.dirichlet] = 0.0
    return b


def random_rotation(rng):
    th = rng.uniform(0, 2 * np.pi)
    c, s = np.cos(th), np.sin(th)
    return np.array([[c, -s], [s, c]])


def rotate_about(X, R, centre):
    return (X - centre) @ R.T + centre


# ---------------------------------------------------------------------------
# acceptance verdicts, printed as one line per criterion after the run
# ---------------------------------------------------------------------------
_VERDICTS = {}


@pytest.fixture
def verdict():
    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
