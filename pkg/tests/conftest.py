import numpy as np
import pytest

from ppde_tools.diffusion import DiffusionSpec, SimConfig
from ppde_tools.paths import DiscretePath, TimeGrid


@pytest.fixture
def grid():
    return TimeGrid.uniform(1.0, 100)


@pytest.fixture
def coarse_grid():
    return TimeGrid.uniform(1.0, 20)


@pytest.fixture
def brownian():
    return DiffusionSpec.brownian(1)


@pytest.fixture
def origin(grid):
    return DiscretePath.constant(grid, [0.0])


@pytest.fixture
def wiggly_path(grid):
    return DiscretePath.from_function(grid, lambda s: [0.5 + 0.3 * s + 0.1 * np.sin(3.0 * s)])


@pytest.fixture
def sim(grid):
    return SimConfig(n_paths=4000, grid=grid, seed=1234, block_size=1024)


@pytest.fixture
def coarse_sim(coarse_grid):
    return SimConfig(n_paths=1000, grid=coarse_grid, seed=99, block_size=256)
