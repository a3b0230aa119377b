import numpy as np
import pytest

from exploratory_switching import families
from exploratory_switching.acceptance import regulator_grid, symmetric_model
from exploratory_switching.grid import SpaceTimeGrid
from exploratory_switching.pde import solve_exploratory_hjb


@pytest.fixture(scope="session")
def regulator():
    return families.regulator()


@pytest.fixture(scope="session")
def small_grid():
    return SpaceTimeGrid(1.0, 200, (-3.0,), (3.0,), (121,))


@pytest.fixture(scope="session")
def regulator_field(regulator):
    """Exploratory solution on the full 601 x 2000 grid (about 10 s)."""
    return solve_exploratory_hjb(regulator, regulator_grid())


@pytest.fixture(scope="session")
def small_field(regulator, small_grid):
    return solve_exploratory_hjb(regulator, small_grid)


@pytest.fixture
def symmetric():
    return symmetric_model()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
