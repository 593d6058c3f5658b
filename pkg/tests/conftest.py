import warnings

import numpy as np
import pytest

from lagicd.fdk import fdk_reconstruct
from lagicd.geometry import desk_grid, make_geometry
from lagicd.phantom import analytic_project, make_pelvis_like_phantom, rasterize

warnings.filterwarnings("ignore", message="The TBB threading layer")


@pytest.fixture(scope="session")
def desk():
    return make_geometry("desk")


@pytest.fixture(scope="session")
def grid64():
    return desk_grid(64)


@pytest.fixture(scope="session")
def pelvis():
    return make_pelvis_like_phantom()


@pytest.fixture(scope="session")
def pelvis_truth(pelvis, grid64):
    return rasterize(pelvis, grid64, 2)


@pytest.fixture(scope="session")
def pelvis_sino(pelvis, desk):
    return analytic_project(pelvis, desk)


@pytest.fixture(scope="session")
def pelvis_fdk_full(pelvis_sino, grid64):
    return fdk_reconstruct(pelvis_sino, grid64)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(1234))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
