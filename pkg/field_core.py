"""
Grids, scalar/vector fields and the discrete operators every other module uses.

Layout (staggered, MAC-style):
- ScalarField.values has shape (ny, nx); row j=0 is the bottom row.
- VectorField.u has shape (ny, nx+1): u[j, i] is the x-flux density on the
  left face of cell (i, j).
- VectorField.w has shape (ny+1, nx): w[j, i] is the y-flux density on the
  bottom face of cell (i, j).

All fields are immutable value types; every operation returns a new field.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from errors import InvalidInputError


@dataclass(frozen=True)
class Grid2D:
    """Uniform cell grid. Cell (i, j) has center origin + ((i+1/2)h, (j+1/2)h)."""

    nx: int
    ny: int
    h: float | None = None
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise InvalidInputError(f"grid needs at least 2x2 cells, got {self.nx}x{self.ny}")
        h = 1.0 / self.nx if self.h is None else float(self.h)
        if not h > 0:
            raise InvalidInputError(f"cell size must be positive, got {h}")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def cell_area(self) -> float:
        return self.h * self.h

    @property
    def area(self) -> float:
        return self.nx * self.ny * self.h * self.h

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """(xmin, xmax, ymin, ymax) of the closed domain."""
        x0, y0 = self.origin
        return (x0, x0 + self.nx * self.h, y0, y0 + self.ny * self.h)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Meshgrid of cell-center coordinates, each of shape (ny, nx)."""
        x0, y0 = self.origin
        xc = x0 + (np.arange(self.nx) + 0.5) * self.h
        yc = y0 + (np.arange(self.ny) + 0.5) * self.h
        return np.meshgrid(xc, yc)

    def x_faces(self) -> np.ndarray:
        return self.origin[0] + np.arange(self.nx + 1) * self.h

    def y_faces(self) -> np.ndarray:
        return self.origin[1] + np.arange(self.ny + 1) * self.h

    def padded(self, cells: int) -> "Grid2D":
        """The enlarged grid with `cells` extra cells on every side."""
        if cells < 0:
            raise InvalidInputError(f"padding must be non-negative, got {cells}")
        x0, y0 = self.origin
        return Grid2D(
            self.nx + 2 * cells,
            self.ny + 2 * cells,
            self.h,
            (x0 - cells * self.h, y0 - cells * self.h),
        )

    def locate(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Cell indices (i, j) of points, clipped to the grid."""
        points = np.atleast_2d(points)
        i = np.floor((points[:, 0] - self.origin[0]) / self.h).astype(np.int64)
        j = np.floor((points[:, 1] - self.origin[1]) / self.h).astype(np.int64)
        return np.clip(i, 0, self.nx - 1), np.clip(j, 0, self.ny - 1)

    def contains(self, points: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        xmin, xmax, ymin, ymax = self.bounds
        slack = tol * max(1.0, self.h)
        points = np.atleast_2d(points)
        return (
            (points[:, 0] >= xmin - slack)
            & (points[:, 0] <= xmax + slack)
            & (points[:, 1] >= ymin - slack)
            & (points[:, 1] <= ymax + slack)
        )


def _frozen(array, shape: tuple[int, int], what: str) -> np.ndarray:
    values = np.array(array, dtype=float, copy=True)
    if values.size != shape[0] * shape[1]:
        raise InvalidInputError(f"{what} needs {shape[0] * shape[1]} values, got {values.size}")
    values = values.reshape(shape)
    values.setflags(write=False)
    return values


@dataclass(frozen=True)
class ScalarField:
    """Cell-centered density (mass per unit area)."""

    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values, self.grid.shape, "scalar field"))

    @classmethod
    def zeros(cls, grid: Grid2D) -> "ScalarField":
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def constant(cls, grid: Grid2D, value: float) -> "ScalarField":
        return cls(grid, np.full(grid.shape, float(value)))

    def _check(self, other: "ScalarField"):
        if other.grid != self.grid:
            raise InvalidInputError("scalar fields live on different grids")

    def __add__(self, other: "ScalarField") -> "ScalarField":
        self._check(other)
        return ScalarField(self.grid, self.values + other.values)

    def __sub__(self, other: "ScalarField") -> "ScalarField":
        self._check(other)
        return ScalarField(self.grid, self.values - other.values)

    def __mul__(self, factor: float) -> "ScalarField":
        return ScalarField(self.grid, self.values * float(factor))

    __rmul__ = __mul__

    def __neg__(self) -> "ScalarField":
        return ScalarField(self.grid, -self.values)


@dataclass(frozen=True)
class VectorField:
    """Staggered face-flux field: u on vertical faces, w on horizontal faces."""

    grid: Grid2D
    u: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        g = self.grid
        object.__setattr__(self, "u", _frozen(self.u, (g.ny, g.nx + 1), "u block"))
        object.__setattr__(self, "w", _frozen(self.w, (g.ny + 1, g.nx), "w block"))

    @classmethod
    def zeros(cls, grid: Grid2D) -> "VectorField":
        return cls(grid, np.zeros((grid.ny, grid.nx + 1)), np.zeros((grid.ny + 1, grid.nx)))

    def _check(self, other: "VectorField"):
        if other.grid != self.grid:
            raise InvalidInputError("vector fields live on different grids")

    def __add__(self, other: "VectorField") -> "VectorField":
        self._check(other)
        return VectorField(self.grid, self.u + other.u, self.w + other.w)

    def __sub__(self, other: "VectorField") -> "VectorField":
        self._check(other)
        return VectorField(self.grid, self.u - other.u, self.w - other.w)

    def __mul__(self, factor: float) -> "VectorField":
        return VectorField(self.grid, self.u * float(factor), self.w * float(factor))

    __rmul__ = __mul__

    def __neg__(self) -> "VectorField":
        return VectorField(self.grid, -self.u, -self.w)

    def with_boundary_zeroed(self) -> "VectorField":
        """Copy with every boundary face set to 0 (boundary-parallel)."""
        u = self.u.copy()
        w = self.w.copy()
        u[:, 0] = u[:, -1] = 0.0
        w[0, :] = w[-1, :] = 0.0
        return VectorField(self.grid, u, w)


@dataclass(frozen=True)
class BoundaryFlux:
    """Outward normal flux density on each side of the grid boundary."""

    left: np.ndarray
    right: np.ndarray
    bottom: np.ndarray
    top: np.ndarray
    h: float = field(default=1.0)

    def total(self) -> float:
        """Net outflow: sum of outward flux times face length."""
        return self.h * float(
            self.left.sum() + self.right.sum() + self.bottom.sum() + self.top.sum()
        )

    def max_abs(self) -> float:
        return float(
            max(
                np.abs(self.left).max(initial=0.0),
                np.abs(self.right).max(initial=0.0),
                np.abs(self.bottom).max(initial=0.0),
                np.abs(self.top).max(initial=0.0),
            )
        )

    @classmethod
    def zeros(cls, grid: Grid2D) -> "BoundaryFlux":
        return cls(np.zeros(grid.ny), np.zeros(grid.ny), np.zeros(grid.nx), np.zeros(grid.nx), grid.h)


# Operators

def divergence(v: VectorField) -> ScalarField:
    """Per-cell (u_{i+1,j} - u_{i,j})/h + (w_{i,j+1} - w_{i,j})/h."""
    h = v.grid.h
    div = (v.u[:, 1:] - v.u[:, :-1]) / h + (v.w[1:, :] - v.w[:-1, :]) / h
    return ScalarField(v.grid, div)


def cell_vectors(v: VectorField) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell vector from averaging the two opposing face fluxes."""
    vx = 0.5 * (v.u[:, :-1] + v.u[:, 1:])
    vy = 0.5 * (v.w[:-1, :] + v.w[1:, :])
    return vx, vy


def magnitude_field(v: VectorField) -> ScalarField:
    vx, vy = cell_vectors(v)
    return ScalarField(v.grid, np.hypot(vx, vy))


def mass(f: ScalarField) -> float:
    return float(f.values.sum() * f.grid.cell_area)


def tv_norm(v: VectorField) -> float:
    """Total variation |v|(Omega) with the cell-average reconstruction."""
    return mass(magnitude_field(v))


def graph_tv_norm(v: VectorField) -> float:
    """l1 total variation on the grid graph: sum of h^2 (|u| + |w|) over faces."""
    return float((np.abs(v.u).sum() + np.abs(v.w).sum()) * v.grid.cell_area)


def boundary_flux(v: VectorField) -> BoundaryFlux:
    return BoundaryFlux(
        left=-v.u[:, 0].copy(),
        right=v.u[:, -1].copy(),
        bottom=-v.w[0, :].copy(),
        top=v.w[-1, :].copy(),
        h=v.grid.h,
    )


def is_boundary_parallel(v: VectorField) -> bool:
    return boundary_flux(v).max_abs() == 0.0


def is_probability_density(f: ScalarField, tol: float = 1e-9) -> bool:
    return bool(f.values.min() >= 0.0) and abs(mass(f) - 1.0) <= tol


# Padding

def _offset(fine: Grid2D, coarse: Grid2D) -> int:
    cells = (fine.nx - coarse.nx) // 2
    if (
        cells < 0
        or fine.ny - coarse.ny != 2 * cells
        or fine.nx - coarse.nx != 2 * cells
        or not math.isclose(fine.h, coarse.h)
    ):
        raise InvalidInputError("grid is not a symmetric padding of the field's grid")
    return cells


def embed_scalar(f: ScalarField, grid: Grid2D) -> ScalarField:
    """Zero-extend f onto a padded grid."""
    p = _offset(grid, f.grid)
    values = np.zeros(grid.shape)
    values[p:p + f.grid.ny, p:p + f.grid.nx] = f.values
    return ScalarField(grid, values)


def embed_vector(v: VectorField, grid: Grid2D) -> VectorField:
    """Zero-extend v onto a padded grid; old boundary faces become interior faces."""
    p = _offset(grid, v.grid)
    u = np.zeros((grid.ny, grid.nx + 1))
    w = np.zeros((grid.ny + 1, grid.nx))
    u[p:p + v.grid.ny, p:p + v.grid.nx + 1] = v.u
    w[p:p + v.grid.ny + 1, p:p + v.grid.nx] = v.w
    return VectorField(grid, u, w)


def restrict_scalar(f: ScalarField, grid: Grid2D) -> ScalarField:
    """Crop f from a padded grid back to `grid`."""
    p = _offset(f.grid, grid)
    return ScalarField(grid, f.values[p:p + grid.ny, p:p + grid.nx])


# File formats

_HEADER = re.compile(r"^#\s*(scalar|vector|paths)\s+(.*)$")


def parse_header(line: str, kind: str) -> dict[str, str]:
    match = _HEADER.match(line.strip())
    if not match or match.group(1) != kind:
        raise InvalidInputError(f"expected a '# {kind} ...' header, got {line.strip()[:60]!r}")
    pairs = {}
    for token in match.group(2).split():
        key, _, value = token.partition("=")
        pairs[key] = value
    return pairs


def _grid_from_header(pairs: dict[str, str]) -> Grid2D:
    try:
        return Grid2D(
            int(pairs["nx"]),
            int(pairs["ny"]),
            float(pairs["h"]),
            (float(pairs.get("x0", 0.0)), float(pairs.get("y0", 0.0))),
        )
    except (KeyError, ValueError) as e:
        raise InvalidInputError(f"malformed grid header: {e}") from e


def _grid_header(kind: str, grid: Grid2D) -> str:
    header = f"{kind} nx={grid.nx} ny={grid.ny} h={grid.h:.17g}"
    if grid.origin != (0.0, 0.0):
        header += f" x0={grid.origin[0]:.17g} y0={grid.origin[1]:.17g}"
    return header


def _read_lines(path: str | Path) -> list[str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise InvalidInputError(f"cannot read {path}: {e}") from e
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise InvalidInputError(f"{path} is empty")
    return lines


def _block(lines: list[str], what: str) -> np.ndarray:
    try:
        return np.loadtxt(lines, delimiter=",", ndmin=2)
    except ValueError as e:
        raise InvalidInputError(f"bad numbers in {what}: {e}") from e


def write_scalar(f: ScalarField, path: str | Path):
    np.savetxt(path, f.values, fmt="%.17g", delimiter=",",
               header=_grid_header("scalar", f.grid), comments="# ", encoding="utf-8")


def read_scalar(path: str | Path) -> ScalarField:
    lines = _read_lines(path)
    grid = _grid_from_header(parse_header(lines[0], "scalar"))
    values = _block(lines[1:], f"{path}")
    if values.shape != grid.shape:
        raise InvalidInputError(f"{path}: expected {grid.ny} rows of {grid.nx} values, got {values.shape}")
    return ScalarField(grid, values)


def write_vector(v: VectorField, path: str | Path):
    rows = ["# " + _grid_header("vector", v.grid), "u:"]
    rows += [",".join(f"{x:.17g}" for x in row) for row in v.u]
    rows.append("w:")
    rows += [",".join(f"{x:.17g}" for x in row) for row in v.w]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def read_vector(path: str | Path) -> VectorField:
    lines = _read_lines(path)
    grid = _grid_from_header(parse_header(lines[0], "vector"))
    body = [line.strip() for line in lines[1:]]
    try:
        iu = body.index("u:")
        iw = body.index("w:")
    except ValueError as e:
        raise InvalidInputError(f"{path}: missing 'u:' or 'w:' block") from e
    u = _block(body[iu + 1:iw], "u block")
    w = _block(body[iw + 1:], "w block")
    if u.shape != (grid.ny, grid.nx + 1) or w.shape != (grid.ny + 1, grid.nx):
        raise InvalidInputError(f"{path}: block shapes {u.shape}, {w.shape} do not match the header")
    return VectorField(grid, u, w)


def read_field(path: str | Path) -> ScalarField | VectorField:
    """Read a scalar or vector field file, whichever its header says."""
    first = _read_lines(path)[0]
    match = _HEADER.match(first.strip())
    if match and match.group(1) == "vector":
        return read_vector(path)
    return read_scalar(path)


def read_table(path: str | Path, columns: list[str]) -> pd.DataFrame:
    """Read a headerless numeric CSV (comment lines start with '#')."""
    try:
        df = pd.read_csv(path, comment="#", header=None, skipinitialspace=True, float_precision="round_trip")
    except (OSError, pd.errors.EmptyDataError) as e:
        raise InvalidInputError(f"cannot read {path}: {e}") from e
    if df.shape[1] != len(columns):
        raise InvalidInputError(f"{path}: expected columns {columns}, got {df.shape[1]} columns")
    df.columns = columns
    return df


# Reports

def _json_value(value, indent: int) -> str:
    pad = "  " * indent
    if isinstance(value, dict):
        if not value:
            return "{}"
        items = [
            f'{pad}  "{key}": {_json_value(value[key], indent + 1)}' for key in sorted(value)
        ]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_json_value(x, indent + 1) for x in value) + "]"
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        x = float(value)
        if not math.isfinite(x):
            return "null"
        return format(x, ".17g")
    if value is None:
        return "null"
    return '"' + str(value).replace("\\", "\\\\").replace('"', '\\"') + '"'


def format_json(payload: dict) -> str:
    """Deterministic JSON: sorted keys, floats with 17 significant digits."""
    return _json_value(payload, 0) + "\n"
