"""
Canned (v, mu, nu) triples with known answers.

All builders take a Grid2D and place features in unit coordinates
(0, 0)-(1, 1) relative to the grid's extent, so they work at any resolution.
Every triple satisfies divergence(v) = mu - nu to round-off.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from errors import InvalidInputError
from field_core import Grid2D, ScalarField, VectorField, tv_norm

Triple = tuple[VectorField, ScalarField, ScalarField]


def _unit_centers(grid: Grid2D) -> tuple[np.ndarray, np.ndarray]:
    """Cell-center coordinates rescaled so the grid spans [0, 1] on each axis."""
    xi = (np.arange(grid.nx) + 0.5) / grid.nx
    eta = (np.arange(grid.ny) + 0.5) / grid.ny
    return xi, eta


def _to_physical(grid: Grid2D, point) -> np.ndarray:
    x0, y0 = grid.origin
    return np.array([x0 + point[0] * grid.nx * grid.h, y0 + point[1] * grid.ny * grid.h])


def make_cycle_field(grid: Grid2D, center, radius: float, strength: float) -> VectorField:
    """
    Divergence-free square loop of constant circulation `strength`.

    The loop runs counterclockwise through the ring of cells at Chebyshev
    distance k = max(1, round(radius / h)) from the cell containing `center`;
    `strength` crosses each of the 8k faces between consecutive ring cells.
    `center` and `radius` are in physical units.
    """
    k = max(1, int(round(radius / grid.h)))
    ci, cj = (int(c[0]) for c in grid.locate(np.asarray(center, dtype=float)))
    if not grid.contains(np.asarray(center, dtype=float))[0]:
        raise InvalidInputError(f"cycle center {tuple(center)} lies outside the grid")
    if ci - k < 0 or cj - k < 0 or ci + k > grid.nx - 1 or cj + k > grid.ny - 1:
        raise InvalidInputError(f"cycle of {k} cells around cell ({ci}, {cj}) leaves the grid")

    u = np.zeros((grid.ny, grid.nx + 1))
    w = np.zeros((grid.ny + 1, grid.nx))
    s = float(strength)
    u[cj - k, ci - k + 1:ci + k + 1] = s        # bottom row, rightwards
    w[cj - k + 1:cj + k + 1, ci + k] = s        # right column, upwards
    u[cj + k, ci - k + 1:ci + k + 1] = -s       # top row, leftwards
    w[cj - k + 1:cj + k + 1, ci - k] = -s       # left column, downwards
    return VectorField(grid, u, w)


def _bump(t: np.ndarray, center: float, width: float) -> np.ndarray:
    return np.exp(-0.5 * ((t - center) / width) ** 2)


def make_separated_scenario(grid: Grid2D, strength: float | None = None) -> Triple:
    """
    Transport in the left half, an off-support loop in the right half.

    mu = g(x) a(y) and nu = g(x) b(y) with g a bump at x = 0.25 (zero from
    x = 0.45 on) and a, b bumps at y = 0.3 and y = 0.7. The transport field is
    vertical: w = g * cumulative (a - b). The loop is centred at (0.75, 0.5)
    with radius 0.2. strength=None picks the circulation that makes the loop
    carry half of tv_norm(v); strength=0 gives the cycle-free variant.
    """
    if grid.nx < 32 or grid.ny < 32:
        raise InvalidInputError(f"separated scenario needs at least 32x32 cells, got {grid.nx}x{grid.ny}")
    h = grid.h
    xi, eta = _unit_centers(grid)
    g = np.where(xi < 0.45, _bump(xi, 0.25, 0.06), 0.0)
    g /= g.sum() * h
    a = _bump(eta, 0.3, 0.06)
    a /= a.sum() * h
    b = _bump(eta, 0.7, 0.06)
    b /= b.sum() * h

    mu = ScalarField(grid, np.outer(a, g))
    nu = ScalarField(grid, np.outer(b, g))
    w = np.zeros((grid.ny + 1, grid.nx))
    w[1:, :] = np.outer(np.cumsum((a - b) * h), g)
    w[-1, :] = 0.0
    transport = VectorField(grid, np.zeros((grid.ny, grid.nx + 1)), w)

    center = _to_physical(grid, (0.75, 0.5))
    radius = 0.2 * grid.nx * h
    if strength is None:
        k = max(1, int(round(radius / h)))
        strength = tv_norm(transport) / (h * h * (8 * k - 4 + 2 * math.sqrt(2.0)))
    loop = make_cycle_field(grid, center, radius, strength)
    return transport + loop, mu, nu


def make_1d_profile(grid: Grid2D) -> Triple:
    """
    The y-invariant triple v = ((x - x^2) / 2, 0), mu = 1 + (1 - 2x) / 4, nu = 1 - (1 - 2x) / 4.

    On a grid that is not the unit square, x is rescaled to [0, 1] and the
    densities are divided by the domain area. u is built face by face from
    mu - nu so the divergence identity holds to round-off, and both side
    faces are exactly 0.
    """
    xi, _ = _unit_centers(grid)
    area = grid.area
    slope = (1.0 - 2.0 * xi) / 4.0
    mu_row = (1.0 + slope) / area
    nu_row = (1.0 - slope) / area
    mu = ScalarField(grid, np.tile(mu_row, (grid.ny, 1)))
    nu = ScalarField(grid, np.tile(nu_row, (grid.ny, 1)))

    u_row = np.zeros(grid.nx + 1)
    u_row[1:] = np.cumsum((mu_row - nu_row) * grid.h)
    u_row[-1] = 0.0
    u = np.tile(u_row, (grid.ny, 1))
    return VectorField(grid, u, np.zeros((grid.ny + 1, grid.nx))), mu, nu


def make_atom_pair(grid: Grid2D, source=(0.1, 0.1), target=(0.9, 0.9)) -> Triple:
    """
    Unit point masses in two cells and the l1 path between them.

    The flow leaves the source cell horizontally, turns once and enters the
    target cell vertically; mass 1 crosses each face on the way, so the face
    flux is 1 / h. `source` and `target` are in unit coordinates.
    """
    si, sj = (int(c[0]) for c in grid.locate(_to_physical(grid, source)))
    ti, tj = (int(c[0]) for c in grid.locate(_to_physical(grid, target)))
    if (si, sj) == (ti, tj):
        raise InvalidInputError("source and target atoms fall in the same cell")
    h = grid.h
    density = 1.0 / grid.cell_area
    mu = np.zeros(grid.shape)
    nu = np.zeros(grid.shape)
    mu[sj, si] = density
    nu[tj, ti] = density

    u = np.zeros((grid.ny, grid.nx + 1))
    w = np.zeros((grid.ny + 1, grid.nx))
    if ti > si:
        u[sj, si + 1:ti + 1] = 1.0 / h
    elif ti < si:
        u[sj, ti + 1:si + 1] = -1.0 / h
    if tj > sj:
        w[sj + 1:tj + 1, ti] = 1.0 / h
    elif tj < sj:
        w[tj + 1:sj + 1, ti] = -1.0 / h
    return VectorField(grid, u, w), ScalarField(grid, mu), ScalarField(grid, nu)


def make_cycle_only(grid: Grid2D) -> Triple:
    """A unit-circulation loop around the center with mu = nu uniform."""
    center = _to_physical(grid, (0.5, 0.5))
    v = make_cycle_field(grid, center, 0.25 * grid.nx * grid.h, 1.0)
    uniform = ScalarField.constant(grid, 1.0 / grid.area)
    return v, uniform, uniform


SCENARIOS: dict[str, Callable[[Grid2D], Triple]] = {
    "profile1d": make_1d_profile,
    "separated": make_separated_scenario,
    "cycle-free": lambda grid: make_separated_scenario(grid, strength=0.0),
    "atom-pair": make_atom_pair,
    "cycle": make_cycle_only,
}
