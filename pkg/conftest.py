"""Shared solved models on reduced grids."""

from pathlib import Path

import numpy as np
import pytest

from edge_law import build_edge_law
from fixed_point import solve_picard, solve_power_m2
from numerics import Grid
from potentials import make_free_model, make_linear_model, make_named_dyson_model

CONFIG_DIR = Path(__file__).parent / 'configs'

RHO_PLUS_M3_Z4 = 1.0 - 1.0 / np.sqrt(2.0)


@pytest.fixture(scope='session')
def small_grid():
    return Grid(-8.0, 8.0, 801)


@pytest.fixture(scope='session')
def linear_model(small_grid):
    return make_linear_model(3, 4.0, grid=small_grid)


@pytest.fixture(scope='session')
def linear_solution(linear_model):
    return solve_picard(linear_model)


@pytest.fixture(scope='session')
def linear_law(linear_model, linear_solution):
    return build_edge_law(linear_model, linear_solution)


@pytest.fixture(scope='session')
def dyson_m2_model(small_grid):
    return make_named_dyson_model(2, 'gaussian', grid=small_grid)


@pytest.fixture(scope='session')
def dyson_m2_solution(dyson_m2_model):
    return solve_power_m2(dyson_m2_model)


@pytest.fixture(scope='session')
def dyson_m2_law(dyson_m2_model, dyson_m2_solution):
    return build_edge_law(dyson_m2_model, dyson_m2_solution)


@pytest.fixture(scope='session')
def free_model(small_grid):
    return make_free_model(3, grid=small_grid)


@pytest.fixture(scope='session')
def free_solution(free_model):
    return solve_picard(free_model)


@pytest.fixture(scope='session')
def free_law(free_model, free_solution):
    return build_edge_law(free_model, free_solution)
