"""
Dacorogna-Moser construction: from a divergence-compatible field to a path ensemble.

Given v with div v = f0 - f1 and strictly positive densities, particles seeded from
f0 follow y' = v(y) / f_t(y), f_t = (1-t) f0 + t f1, for t in [0, 1]. The
weighted trajectories form the traffic plan Q = Y_# f0.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path as FilePath

import numpy as np
import pandas as pd

from errors import DegenerateDensityError, InvalidInputError, InvalidParameterError
from field_core import Grid2D, ScalarField, VectorField, parse_header, cell_vectors

logger = logging.getLogger(__name__)

DENSITY_FLOOR = 1e-14
CHUNK = 4096
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class Path:
    """Polyline in the plane; point k is reached at times[k] (uniform by default)."""

    points: np.ndarray
    times: np.ndarray | None = None

    def __post_init__(self):
        points = np.array(self.points, dtype=float, copy=True).reshape(-1, 2)
        if len(points) < 2:
            raise InvalidInputError("a path needs at least 2 points")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)
        times = np.linspace(0.0, 1.0, len(points)) if self.times is None else np.array(self.times, dtype=float)
        if times.shape != (len(points),):
            raise InvalidInputError("times must have one entry per point")
        times.setflags(write=False)
        object.__setattr__(self, "times", times)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.points, axis=0), axis=1).sum())

    @property
    def start(self) -> np.ndarray:
        return self.points[0]

    @property
    def end(self) -> np.ndarray:
        return self.points[-1]

    def reversed(self) -> "Path":
        return Path(self.points[::-1], 1.0 - self.times[::-1])


class PathEnsemble:
    """Weighted finite set of paths, stored as concatenated points plus offsets."""

    def __init__(self, points: np.ndarray, offsets: np.ndarray, weights: np.ndarray):
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        offsets = np.asarray(offsets, dtype=np.int64)
        weights = np.asarray(weights, dtype=float)
        if offsets.ndim != 1 or len(offsets) != len(weights) + 1 or offsets[0] != 0 or offsets[-1] != len(points):
            raise InvalidInputError("offsets do not match points and weights")
        if np.any(np.diff(offsets) < 2):
            raise InvalidInputError("every path needs at least 2 points")
        if np.any(weights < 0):
            raise InvalidInputError("path weights must be non-negative")
        if len(weights) and abs(weights.sum() - 1.0) > 1e-9:
            raise InvalidInputError(f"path weights sum to {weights.sum():.12g}, expected 1")
        for array in (points, offsets, weights):
            array.setflags(write=False)
        self.points = points
        self.offsets = offsets
        self.weights = weights

    @classmethod
    def from_paths(cls, paths: list[Path], weights) -> "PathEnsemble":
        if len(paths) != len(weights):
            raise InvalidInputError("paths and weights have different lengths")
        if not paths:
            return cls(np.zeros((0, 2)), np.zeros(1, dtype=np.int64), np.zeros(0))
        sizes = [len(p.points) for p in paths]
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        return cls(np.concatenate([p.points for p in paths]), offsets, np.asarray(weights, dtype=float))

    def __len__(self) -> int:
        return len(self.weights)

    def __getitem__(self, k: int) -> Path:
        return Path(self.points[self.offsets[k]:self.offsets[k + 1]])

    def __iter__(self):
        return (self[k] for k in range(len(self)))

    @property
    def paths(self) -> list[Path]:
        return list(self)

    def first_points(self) -> np.ndarray:
        return self.points[self.offsets[:-1]]

    def last_points(self) -> np.ndarray:
        return self.points[self.offsets[1:] - 1]

    def segments(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(starts, ends, weights) of every polyline segment."""
        keep = np.ones(len(self.points) - 1, dtype=bool) if len(self.points) else np.zeros(0, dtype=bool)
        keep[self.offsets[1:-1] - 1] = False
        seg_weights = np.repeat(self.weights, np.diff(self.offsets) - 1)
        return self.points[:-1][keep], self.points[1:][keep], seg_weights

    def reversed(self) -> "PathEnsemble":
        return PathEnsemble.from_paths([p.reversed() for p in self], self.weights)

    def mixture(self, other: "PathEnsemble", alpha: float) -> "PathEnsemble":
        """The ensemble alpha * self + (1 - alpha) * other."""
        if not 0.0 <= alpha <= 1.0:
            raise InvalidParameterError(f"mixture weight must lie in [0, 1], got {alpha}")
        return PathEnsemble(
            np.concatenate([self.points, other.points]),
            np.concatenate([self.offsets, other.offsets[1:] + self.offsets[-1]]),
            np.concatenate([alpha * self.weights, (1.0 - alpha) * other.weights]),
        )

    def map_paths(self, fn) -> "PathEnsemble":
        return PathEnsemble.from_paths([fn(p) for p in self], self.weights)


def _check_same_grid(*fields):
    grids = {f.grid for f in fields}
    if len(grids) != 1:
        raise InvalidInputError("fields live on different grids")


def interpolate_density(f0: ScalarField, f1: ScalarField, t: float) -> ScalarField:
    if not 0.0 <= t <= 1.0:
        raise InvalidParameterError(f"t must lie in [0, 1], got {t}")
    _check_same_grid(f0, f1)
    return ScalarField(f0.grid, (1.0 - t) * f0.values + t * f1.values)


def _bilinear(values: np.ndarray, grid: Grid2D, points: np.ndarray) -> np.ndarray:
    """Bilinear interpolation between cell centers, constant beyond the outer centers."""
    fx = np.clip((points[:, 0] - grid.origin[0]) / grid.h - 0.5, 0.0, grid.nx - 1)
    fy = np.clip((points[:, 1] - grid.origin[1]) / grid.h - 0.5, 0.0, grid.ny - 1)
    i = np.minimum(fx.astype(np.int64), grid.nx - 2)
    j = np.minimum(fy.astype(np.int64), grid.ny - 2)
    tx = fx - i
    ty = fy - j
    return (
        (1 - tx) * (1 - ty) * values[j, i]
        + tx * (1 - ty) * values[j, i + 1]
        + (1 - tx) * ty * values[j + 1, i]
        + tx * ty * values[j + 1, i + 1]
    )


class _MoserField:
    """Pre-sampled ingredients of v(x) / f_t(x)."""

    def __init__(self, v: VectorField, f0: ScalarField, f1: ScalarField):
        _check_same_grid(v, f0, f1)
        self.grid = v.grid
        self.vx, self.vy = cell_vectors(v)
        self.f0 = f0.values
        self.f1 = f1.values

    def __call__(self, t: float, points: np.ndarray) -> np.ndarray:
        density = (1.0 - t) * _bilinear(self.f0, self.grid, points) + t * _bilinear(self.f1, self.grid, points)
        if density.size and density.min() < DENSITY_FLOOR:
            raise DegenerateDensityError(
                f"interpolated density {density.min():.3e} at t={t:.4g}; regularize the input first"
            )
        out = np.empty_like(points)
        out[:, 0] = _bilinear(self.vx, self.grid, points) / density
        out[:, 1] = _bilinear(self.vy, self.grid, points) / density
        return out


def moser_velocity(v: VectorField, f0: ScalarField, f1: ScalarField, t: float, x) -> np.ndarray:
    """The velocity v(x) / f_t(x) at one point."""
    if not 0.0 <= t <= 1.0:
        raise InvalidParameterError(f"t must lie in [0, 1], got {t}")
    return _MoserField(v, f0, f1)(t, np.asarray(x, dtype=float).reshape(1, 2))[0]


def stratified_seeds(f0: ScalarField, n_particles: int, rng: np.random.Generator) -> np.ndarray:
    """
    One stratum per cell with expected count n * f0 * h^2, rounded to exact counts.

    Leftover particles go to cells drawn with probability proportional to the
    fractional parts. Inside a cell holding m particles, particle k sits at
    x offset (k + 1/2) / m and at the golden-ratio y offset (k + 1/2) * g + s mod 1,
    with one random shift s per cell.
    """
    grid = f0.grid
    expected = np.clip(f0.values, 0.0, None).ravel() * grid.cell_area * n_particles
    counts = np.floor(expected).astype(np.int64)
    remainder = n_particles - int(counts.sum())
    if remainder > 0:
        frac = expected - counts
        if frac.sum() <= 0:
            frac = expected
        candidates = np.count_nonzero(frac)
        extra = rng.choice(
            counts.size, size=remainder, replace=remainder > candidates, p=frac / frac.sum()
        )
        np.add.at(counts, extra, 1)
    elif remainder < 0:
        drop = rng.choice(counts.size, size=-remainder, replace=True, p=counts / counts.sum())
        np.subtract.at(counts, drop, 1)
        counts = np.clip(counts, 0, None)

    shift = rng.random(counts.size)
    cells = np.repeat(np.arange(counts.size), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rank = np.arange(len(cells)) - np.repeat(starts, counts) + 0.5
    per_cell = counts[cells]
    offsets = np.column_stack([rank / per_cell, np.mod(rank * GOLDEN + shift[cells], 1.0)])
    j, i = np.divmod(cells, grid.nx)
    corner = np.column_stack([grid.origin[0] + i * grid.h, grid.origin[1] + j * grid.h])
    return corner + offsets * grid.h


def _advect(field: _MoserField, start: np.ndarray, n_steps: int) -> np.ndarray:
    """Classical RK4 with fixed step 1/n_steps; positions clamped to the domain."""
    xmin, xmax, ymin, ymax = field.grid.bounds
    lo = np.array([xmin, ymin])
    hi = np.array([xmax, ymax])
    dt = 1.0 / n_steps
    track = np.empty((n_steps + 1, len(start), 2))
    y = start.copy()
    track[0] = y
    for k in range(n_steps):
        t = k * dt
        k1 = field(t, y)
        k2 = field(t + 0.5 * dt, y + 0.5 * dt * k1)
        k3 = field(t + 0.5 * dt, y + 0.5 * dt * k2)
        k4 = field(t + dt, y + dt * k3)
        y = np.clip(y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), lo, hi)
        track[k + 1] = y
    return track


def integrate_paths(
    v: VectorField,
    f0: ScalarField,
    f1: ScalarField,
    n_particles: int,
    n_steps: int,
    seed: int,
    threads: int = 1,
) -> PathEnsemble:
    """Seed particles from f0, advect them with v / f_t, return Q = Y_# f0."""
    if n_particles < 1 or n_steps < 1:
        raise InvalidParameterError("need at least one particle and one step")
    field = _MoserField(v, f0, f1)
    rng = np.random.default_rng(seed)
    seeds = stratified_seeds(f0, n_particles, rng)
    n = len(seeds)

    blocks = [seeds[k:k + CHUNK] for k in range(0, n, CHUNK)]
    logger.info("advecting %d particles in %d blocks on %d thread(s)", n, len(blocks), threads)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        tracks = list(pool.map(lambda block: _advect(field, block, n_steps), blocks))

    track = np.concatenate(tracks, axis=1) if tracks else np.zeros((n_steps + 1, 0, 2))
    points = track.transpose(1, 0, 2).reshape(-1, 2)
    offsets = np.arange(n + 1, dtype=np.int64) * (n_steps + 1)
    return PathEnsemble(points, offsets, np.full(n, 1.0 / n))


def reparametrize_constant_speed(p: Path, n_out: int) -> Path:
    """
    Same trace, traversed at constant speed.

    The result holds the n_out arclength-equispaced points. A vertex within
    1e-9 of the total length from one of them replaces it, every other vertex
    is merged in, so no corner is cut; times are proportional to arclength.
    """
    if n_out < 2:
        raise InvalidParameterError(f"n_out must be at least 2, got {n_out}")
    steps = np.linalg.norm(np.diff(p.points, axis=0), axis=1)
    arclength = np.concatenate([[0.0], np.cumsum(steps)])
    total = arclength[-1]
    if total == 0.0:
        return Path(np.repeat(p.points[:1], n_out, axis=0))

    marks = np.linspace(0.0, total, n_out)
    right = np.clip(np.searchsorted(marks, arclength), 1, n_out - 1)
    nearest = np.where(marks[right] - arclength < arclength - marks[right - 1], right, right - 1)
    on_mark = np.abs(marks[nearest] - arclength) <= 1e-9 * total
    marks[nearest[on_mark]] = arclength[on_mark]
    marks = np.unique(np.concatenate([marks, arclength[~on_mark]]))
    keep = np.concatenate([[True], np.diff(marks) > 1e-12 * total])
    marks = marks[keep]
    marks[0] = 0.0
    marks[-1] = total
    points = np.column_stack([
        np.interp(marks, arclength, p.points[:, 0]),
        np.interp(marks, arclength, p.points[:, 1]),
    ])
    points[0] = p.points[0]
    points[-1] = p.points[-1]
    return Path(points, marks / total)


def endpoint_density(Q: PathEnsemble, grid: Grid2D, end: int = 1) -> ScalarField:
    """Histogram density of (e_0)_# Q (end=0) or (e_1)_# Q (end=1)."""
    points = Q.first_points() if end == 0 else Q.last_points()
    i, j = grid.locate(points)
    hist = np.bincount(j * grid.nx + i, weights=Q.weights, minlength=grid.nx * grid.ny)
    return ScalarField(grid, hist.reshape(grid.shape) / grid.cell_area)


def write_paths(Q: PathEnsemble, path: str | FilePath):
    sizes = np.diff(Q.offsets)
    frame = pd.DataFrame({
        "path_id": np.repeat(np.arange(len(Q)), sizes),
        "weight": np.repeat(Q.weights, sizes),
        "point_index": np.concatenate([np.arange(s) for s in sizes]) if len(sizes) else np.zeros(0, dtype=int),
        "x": Q.points[:, 0],
        "y": Q.points[:, 1],
    })
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(f"# paths count={len(Q)}\n")
        frame.to_csv(handle, header=False, index=False, float_format="%.17g")


def read_paths(path: str | FilePath) -> PathEnsemble:
    try:
        with open(path, encoding="utf-8") as handle:
            header = parse_header(handle.readline(), "paths")
        frame = pd.read_csv(
            path,
            skiprows=1,
            header=None,
            names=["path_id", "weight", "point_index", "x", "y"],
            float_precision="round_trip",
        )
    except (OSError, pd.errors.EmptyDataError) as e:
        raise InvalidInputError(f"cannot read {path}: {e}") from e
    count = int(header.get("count", -1))
    frame = frame.sort_values(["path_id", "point_index"], kind="stable")
    ids = frame["path_id"].to_numpy()
    starts = np.flatnonzero(np.concatenate([[True], ids[1:] != ids[:-1]])) if len(ids) else np.zeros(0, dtype=int)
    if count >= 0 and len(starts) != count:
        raise InvalidInputError(f"{path}: header says {count} paths, found {len(starts)}")
    offsets = np.concatenate([starts, [len(ids)]])
    weights = frame["weight"].to_numpy()[starts]
    return PathEnsemble(frame[["x", "y"]].to_numpy(), offsets, weights)
