import numpy as np
import pytest

from llblab.field import VectorField, make_grid


@pytest.fixture
def rng():
    return np.random.default_rng(20240808)


def random_field(grid, rng, scale=1.0):
    return VectorField(grid, scale * rng.normal(size=(grid.n_interior, 3)))


@pytest.fixture
def grid63():
    return make_grid(63)
