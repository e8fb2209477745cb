import numpy as np
import pytest

from field_core import Grid2D, ScalarField, VectorField
from moser_flow import Path, PathEnsemble


@pytest.fixture
def grid8():
    return Grid2D(8, 8)


@pytest.fixture
def grid16():
    return Grid2D(16, 16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_field(grid: Grid2D, rng: np.random.Generator, boundary_parallel: bool = True) -> VectorField:
    v = VectorField(grid, rng.normal(size=(grid.ny, grid.nx + 1)), rng.normal(size=(grid.ny + 1, grid.nx)))
    return v.with_boundary_zeroed() if boundary_parallel else v


def uniform(grid: Grid2D) -> ScalarField:
    return ScalarField.constant(grid, 1.0 / grid.area)


def single_path(*points) -> PathEnsemble:
    return PathEnsemble.from_paths([Path(np.array(points, dtype=float))], [1.0])
