import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_field
from errors import InvalidInputError
from field_core import (
    BoundaryFlux,
    Grid2D,
    ScalarField,
    VectorField,
    boundary_flux,
    divergence,
    embed_scalar,
    embed_vector,
    format_json,
    graph_tv_norm,
    is_boundary_parallel,
    is_probability_density,
    magnitude_field,
    mass,
    read_field,
    read_scalar,
    read_table,
    read_vector,
    restrict_scalar,
    tv_norm,
    write_scalar,
    write_vector,
)


class TestGrid:
    def test_default_cell_size_spans_unit_width(self):
        grid = Grid2D(4, 2)
        assert grid.h == 0.25
        assert grid.bounds == (0.0, 1.0, 0.0, 0.5)
        assert grid.shape == (2, 4)

    def test_rejects_degenerate_grids(self):
        with pytest.raises(InvalidInputError):
            Grid2D(1, 4)
        with pytest.raises(InvalidInputError):
            Grid2D(4, 4, h=0.0)

    def test_padded_grid_keeps_cell_size(self):
        grid = Grid2D(4, 4).padded(2)
        assert (grid.nx, grid.ny) == (8, 8)
        assert grid.origin == (-0.5, -0.5)
        assert grid.h == 0.25

    def test_locate_clips_to_grid(self):
        grid = Grid2D(4, 4)
        i, j = grid.locate(np.array([[0.1, 0.9], [1.0, 0.0], [0.5, 0.5]]))
        assert i.tolist() == [0, 3, 2]
        assert j.tolist() == [3, 0, 2]


class TestFields:
    def test_shape_mismatch_is_rejected(self):
        grid = Grid2D(4, 4)
        with pytest.raises(InvalidInputError):
            ScalarField(grid, np.zeros(15))
        with pytest.raises(InvalidInputError):
            VectorField(grid, np.zeros((4, 4)), np.zeros((5, 4)))

    def test_fields_are_read_only(self):
        f = ScalarField.zeros(Grid2D(3, 3))
        with pytest.raises(ValueError):
            f.values[0, 0] = 1.0

    def test_arithmetic_across_grids_fails(self):
        with pytest.raises(InvalidInputError):
            ScalarField.zeros(Grid2D(3, 3)) + ScalarField.zeros(Grid2D(4, 4))
        with pytest.raises(InvalidInputError):
            VectorField.zeros(Grid2D(3, 3)) - VectorField.zeros(Grid2D(4, 4))


class TestDivergence:
    def test_single_interior_face(self):
        grid = Grid2D(3, 3)
        u = np.zeros((3, 4))
        u[1, 2] = 1.0
        div = divergence(VectorField(grid, u, np.zeros((4, 3)))).values.copy()
        assert div[1, 1] == pytest.approx(1.0 / grid.h)
        assert div[1, 2] == pytest.approx(-1.0 / grid.h)
        div[1, 1] = div[1, 2] = 0.0
        assert np.all(div == 0.0)

    def test_linear_flux_has_unit_divergence(self):
        grid = Grid2D(5, 5)
        u = np.tile(np.arange(6) * grid.h, (5, 1))
        div = divergence(VectorField(grid, u, np.zeros((6, 5))))
        np.testing.assert_allclose(div.values, 1.0, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), nx=st.integers(2, 12), ny=st.integers(2, 12))
    def test_divergence_theorem(self, seed, nx, ny):
        v = random_field(Grid2D(nx, ny), np.random.default_rng(seed), boundary_parallel=False)
        assert mass(divergence(v)) == pytest.approx(boundary_flux(v).total(), abs=1e-10)

    def test_linearity(self, grid8, rng):
        v1 = random_field(grid8, rng)
        v2 = random_field(grid8, rng)
        lhs = divergence(2.0 * v1 - 3.0 * v2).values
        rhs = 2.0 * divergence(v1).values - 3.0 * divergence(v2).values
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)


class TestNorms:
    def test_constant_unit_flux(self):
        grid = Grid2D(8, 8)
        v = VectorField(grid, np.ones((8, 9)), np.zeros((9, 8)))
        assert tv_norm(v) == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(magnitude_field(v).values, 1.0)

    def test_zero_field(self, grid8):
        assert tv_norm(VectorField.zeros(grid8)) == 0.0
        assert graph_tv_norm(VectorField.zeros(grid8)) == 0.0

    def test_homogeneity_and_triangle_inequality(self, grid8, rng):
        v1 = random_field(grid8, rng)
        v2 = random_field(grid8, rng)
        assert tv_norm(-2.5 * v1) == pytest.approx(2.5 * tv_norm(v1), rel=1e-12)
        assert tv_norm(v1 + v2) <= tv_norm(v1) + tv_norm(v2) + 1e-12

    def test_graph_norm_counts_every_face(self):
        grid = Grid2D(4, 4)
        u = np.zeros((4, 5))
        u[2, 1:3] = 2.0
        v = VectorField(grid, u, np.zeros((5, 4)))
        assert graph_tv_norm(v) == pytest.approx(2 * 2.0 * grid.cell_area)

    def test_mass_of_uniform_density(self):
        grid = Grid2D(10, 10)
        f = ScalarField.constant(grid, 1.0)
        assert mass(f) == pytest.approx(1.0, abs=1e-12)
        assert is_probability_density(f)

    def test_probability_density_checks(self):
        grid = Grid2D(4, 4)
        assert not is_probability_density(ScalarField.constant(grid, 2.0))
        values = np.ones((4, 4))
        values[0, 0] = -1.0
        values[1, 1] = 3.0
        assert not is_probability_density(ScalarField(grid, values))


class TestBoundary:
    def test_outward_sign_convention(self):
        grid = Grid2D(3, 3)
        u = np.zeros((3, 4))
        w = np.zeros((4, 3))
        u[:, 0] = 1.0
        w[-1, :] = 2.0
        flux = boundary_flux(VectorField(grid, u, w))
        np.testing.assert_array_equal(flux.left, -1.0)
        np.testing.assert_array_equal(flux.top, 2.0)
        assert flux.total() == pytest.approx(grid.h * (-3.0 + 6.0))
        assert flux.max_abs() == 2.0

    def test_boundary_parallel(self, grid8, rng):
        v = random_field(grid8, rng, boundary_parallel=False)
        assert not is_boundary_parallel(v)
        assert is_boundary_parallel(v.with_boundary_zeroed())
        assert BoundaryFlux.zeros(grid8).total() == 0.0


class TestPadding:
    def test_embed_then_restrict(self, grid8, rng):
        f = ScalarField(grid8, rng.random((8, 8)))
        padded = embed_scalar(f, grid8.padded(3))
        assert mass(padded) == pytest.approx(mass(f))
        np.testing.assert_array_equal(restrict_scalar(padded, grid8).values, f.values)

    def test_embedded_field_keeps_divergence_inside(self, grid8, rng):
        v = random_field(grid8, rng)
        outer = grid8.padded(2)
        div = divergence(embed_vector(v, outer))
        np.testing.assert_allclose(restrict_scalar(div, grid8).values, divergence(v).values, atol=1e-12)
        assert is_boundary_parallel(embed_vector(v, outer))

    def test_mismatched_padding(self):
        with pytest.raises(InvalidInputError):
            embed_scalar(ScalarField.zeros(Grid2D(4, 4)), Grid2D(7, 8))


class TestFiles:
    def test_scalar_file(self, tmp_path, rng):
        grid = Grid2D(5, 3, h=0.2, origin=(-0.1, 0.3))
        f = ScalarField(grid, rng.random((3, 5)))
        write_scalar(f, tmp_path / "f.csv")
        back = read_scalar(tmp_path / "f.csv")
        assert back.grid == grid
        np.testing.assert_array_equal(back.values, f.values)

    def test_vector_file_and_dispatch(self, tmp_path, grid8, rng):
        v = random_field(grid8, rng, boundary_parallel=False)
        write_vector(v, tmp_path / "v.csv")
        back = read_field(tmp_path / "v.csv")
        assert isinstance(back, VectorField)
        np.testing.assert_array_equal(back.u, v.u)
        np.testing.assert_array_equal(back.w, v.w)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InvalidInputError):
            read_scalar(tmp_path / "nope.csv")

    def test_wrong_header(self, tmp_path, grid8):
        write_scalar(ScalarField.zeros(grid8), tmp_path / "f.csv")
        with pytest.raises(InvalidInputError):
            read_vector(tmp_path / "f.csv")

    def test_wrong_row_count(self, tmp_path):
        (tmp_path / "f.csv").write_text("# scalar nx=3 ny=3 h=0.5\n1,2,3\n4,5,6\n")
        with pytest.raises(InvalidInputError):
            read_scalar(tmp_path / "f.csv")

    def test_non_numeric_values(self, tmp_path):
        (tmp_path / "f.csv").write_text("# scalar nx=2 ny=2 h=0.5\n1,x\n3,4\n")
        with pytest.raises(InvalidInputError):
            read_scalar(tmp_path / "f.csv")

    def test_table_column_count(self, tmp_path):
        (tmp_path / "t.csv").write_text("# atoms count=1\n0.5,0.5\n")
        with pytest.raises(InvalidInputError):
            read_table(tmp_path / "t.csv", ["x", "y", "mass"])

    def test_empty_table(self, tmp_path):
        (tmp_path / "t.csv").write_text("# atoms count=0\n")
        with pytest.raises(InvalidInputError):
            read_table(tmp_path / "t.csv", ["x", "y", "mass"])


class TestJson:
    def test_sorted_keys_and_full_precision(self):
        text = format_json({"b": 0.1, "a": {"y": 1, "x": True}, "c": None})
        assert text.index('"a"') < text.index('"b"') < text.index('"c"')
        payload = json.loads(text)
        assert payload["b"] == 0.1
        assert payload["a"] == {"x": True, "y": 1}

    def test_non_finite_becomes_null(self):
        payload = json.loads(format_json({"x": math.inf, "y": float("nan")}))
        assert payload == {"x": None, "y": None}

    def test_output_is_deterministic(self):
        data = {"z": np.float64(1.0) / 3.0, "k": np.int64(7)}
        assert format_json(data) == format_json(dict(reversed(list(data.items()))))
