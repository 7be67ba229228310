import numpy as np
import pytest

from regnoise.grid_fields import SpatialGrid
from regnoise.stochastics import TimeGrid


@pytest.fixture
def grid():
    return SpatialGrid(1, 512, 8.0)


@pytest.fixture
def small_grid():
    return SpatialGrid(1, 128, 8.0)


@pytest.fixture
def tgrid():
    return TimeGrid(1.0, 32)


def gaussian(x, s2=0.25):
    return np.exp(-np.asarray(x) ** 2 / (2 * s2))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
