"""
Traffic intensity i_Q and traffic flow v_Q of a path ensemble.

Every polyline segment is clipped exactly against the cell boundaries
(parametric crossings with the grid lines), so a path deposits its true
arclength in each cell it visits:
- intensity: weight * sub-segment length / h^2 in the sub-segment's cell
- flow: weight * sub-segment displacement / h^2, the x part split 1/2 - 1/2
  between the cell's two vertical faces, the y part between its two
  horizontal faces
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from errors import InvalidInputError
from field_core import Grid2D, ScalarField, VectorField, divergence, format_json, mass, tv_norm
from moser_flow import Path, PathEnsemble, endpoint_density

logger = logging.getLogger(__name__)

PATH_CHUNK = 4096
DIVERGENCE_TOL = 1e-8


@dataclass(frozen=True)
class DecompositionReport:
    norm_v: float
    norm_vQ: float
    norm_residual: float
    intensity_mass: float
    defect: float
    marginal_gap_mu: float
    marginal_gap_nu: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return format_json(self.to_dict())


@dataclass(frozen=True)
class _Pieces:
    """Clipped sub-segments of a block of paths, in canonical orientation."""

    cells: np.ndarray
    lengths: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    forward: np.ndarray


def _crossings(a: np.ndarray, b: np.ndarray, origin: float, h: float) -> tuple[np.ndarray, np.ndarray]:
    """(segment index, t) for every grid line strictly between a and b along one axis."""
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    first = np.floor((lo - origin) / h).astype(np.int64) + 1
    last = np.ceil((hi - origin) / h).astype(np.int64) - 1
    counts = np.maximum(last - first + 1, 0)
    owner = np.repeat(np.arange(len(a)), counts)
    if not len(owner):
        return owner, np.zeros(0)
    rank = np.arange(len(owner)) - np.repeat(np.cumsum(counts) - counts, counts)
    lines = origin + (first[owner] + rank) * h
    return owner, (lines - a[owner]) / (b[owner] - a[owner])


def _clip(starts: np.ndarray, ends: np.ndarray, grid: Grid2D) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Split segments at grid lines.

    Returns (segment index, flat cell index, parameter fraction) per piece;
    the cell is the one containing the piece midpoint.
    """
    n = len(starts)
    x_owner, x_t = _crossings(starts[:, 0], ends[:, 0], grid.origin[0], grid.h)
    y_owner, y_t = _crossings(starts[:, 1], ends[:, 1], grid.origin[1], grid.h)
    owner = np.concatenate([np.arange(n), np.arange(n), x_owner, y_owner])
    t = np.concatenate([np.zeros(n), np.ones(n), x_t, y_t])
    order = np.lexsort((t, owner))
    owner = owner[order]
    t = t[order]

    same = owner[1:] == owner[:-1]
    seg = owner[:-1][same]
    t0 = t[:-1][same]
    t1 = t[1:][same]
    mid = 0.5 * (t0 + t1)
    points = starts[seg] + mid[:, None] * (ends[seg] - starts[seg])
    i, j = grid.locate(points)
    return seg, j * grid.nx + i, t1 - t0


def _canonical(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Order each segment's endpoints lexicographically; a segment and its reverse clip identically."""
    forward = (a[:, 0] < b[:, 0]) | ((a[:, 0] == b[:, 0]) & (a[:, 1] <= b[:, 1]))
    lo = np.where(forward[:, None], a, b)
    hi = np.where(forward[:, None], b, a)
    return lo, hi, forward


def _segment_pieces(a: np.ndarray, b: np.ndarray, weights: np.ndarray, grid: Grid2D) -> _Pieces:
    lo, hi, forward = _canonical(a, b)
    seg, cells, fraction = _clip(lo, hi, grid)
    delta = hi - lo
    scale = weights[seg] * fraction
    return _Pieces(
        cells=cells,
        lengths=scale * np.hypot(delta[seg, 0], delta[seg, 1]),
        dx=scale * delta[seg, 0],
        dy=scale * delta[seg, 1],
        forward=forward[seg],
    )


def _block_pieces(Q: PathEnsemble, first: int, last: int, grid: Grid2D) -> _Pieces:
    start, stop = Q.offsets[first], Q.offsets[last]
    points = Q.points[start:stop]
    local = Q.offsets[first:last + 1] - start
    keep = np.ones(max(len(points) - 1, 0), dtype=bool)
    keep[local[1:-1] - 1] = False
    weights = np.repeat(Q.weights[first:last], np.diff(local) - 1)
    return _segment_pieces(points[:-1][keep], points[1:][keep], weights, grid)


def _check_inside(points: np.ndarray, grid: Grid2D):
    if len(points) and not grid.contains(points).all():
        raise InvalidInputError("path leaves the grid")


def _pieces(Q: PathEnsemble, grid: Grid2D, threads: int = 1) -> _Pieces:
    _check_inside(Q.points, grid)
    blocks = [(k, min(k + PATH_CHUNK, len(Q))) for k in range(0, len(Q), PATH_CHUNK)]
    if not blocks:
        empty = np.zeros(0)
        return _Pieces(np.zeros(0, dtype=np.int64), empty, empty, empty, np.zeros(0, dtype=bool))
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        parts = list(pool.map(lambda block: _block_pieces(Q, block[0], block[1], grid), blocks))
    return _Pieces(*(np.concatenate([getattr(p, name) for p in parts]) for name in _Pieces.__dataclass_fields__))


def _sorted_sum(cells: np.ndarray, values: np.ndarray, size: int) -> np.ndarray:
    """Per-cell sums taken in (cell, value) order, so equal multisets give bitwise-equal sums."""
    order = np.lexsort((values, cells))
    return np.bincount(cells[order], weights=values[order], minlength=size)


def _intensity(pieces: _Pieces, grid: Grid2D) -> ScalarField:
    totals = _sorted_sum(pieces.cells, pieces.lengths, grid.nx * grid.ny)
    return ScalarField(grid, totals.reshape(grid.shape) / grid.cell_area)


def _flow(pieces: _Pieces, grid: Grid2D) -> VectorField:
    size = grid.nx * grid.ny
    fwd = pieces.forward
    bwd = ~fwd
    sx = _sorted_sum(pieces.cells[fwd], pieces.dx[fwd], size) - _sorted_sum(pieces.cells[bwd], pieces.dx[bwd], size)
    sy = _sorted_sum(pieces.cells[fwd], pieces.dy[fwd], size) - _sorted_sum(pieces.cells[bwd], pieces.dy[bwd], size)
    sx = 0.5 * sx.reshape(grid.shape) / grid.cell_area
    sy = 0.5 * sy.reshape(grid.shape) / grid.cell_area

    u = np.zeros((grid.ny, grid.nx + 1))
    w = np.zeros((grid.ny + 1, grid.nx))
    u[:, :-1] += sx
    u[:, 1:] += sx
    w[:-1, :] += sy
    w[1:, :] += sy
    return VectorField(grid, u, w)


def traffic_measures(Q: PathEnsemble, grid: Grid2D, threads: int = 1) -> tuple[ScalarField, VectorField]:
    """Intensity and flow from one clipping pass."""
    pieces = _pieces(Q, grid, threads)
    logger.debug("deposited %d paths as %d cell pieces", len(Q), len(pieces.cells))
    return _intensity(pieces, grid), _flow(pieces, grid)


def intensity(Q: PathEnsemble, grid: Grid2D, threads: int = 1) -> ScalarField:
    """Cell density of cumulated traffic: sum of weight * arclength in the cell, over h^2."""
    return _intensity(_pieces(Q, grid, threads), grid)


def flow(Q: PathEnsemble, grid: Grid2D, threads: int = 1) -> VectorField:
    """Staggered field of weighted path displacements."""
    return _flow(_pieces(Q, grid, threads), grid)


def weighted_length(p: Path, phi: ScalarField) -> float:
    """Length of p with each piece weighted by the phi value of its cell."""
    _check_inside(p.points, phi.grid)
    pieces = _segment_pieces(p.points[:-1], p.points[1:], np.ones(len(p.points) - 1), phi.grid)
    return float(np.sum(pieces.lengths * phi.values.ravel()[pieces.cells]))


def average_length(Q: PathEnsemble) -> float:
    starts, ends, weights = Q.segments()
    return float(np.sum(weights * np.linalg.norm(ends - starts, axis=1)))


def displacement_mass(Q: PathEnsemble) -> float:
    """Sum of weight * |end - start|: the transport cost paid by straight segments."""
    gaps = np.linalg.norm(Q.last_points() - Q.first_points(), axis=1)
    return float(np.sum(Q.weights * gaps))


def _l1_gap(a: ScalarField, b: ScalarField) -> float:
    return float(np.abs(a.values - b.values).sum() * a.grid.cell_area)


def decomposition_report(
    v: VectorField,
    Q: PathEnsemble,
    mu: ScalarField,
    nu: ScalarField,
    threads: int = 1,
) -> DecompositionReport:
    if not (v.grid == mu.grid == nu.grid):
        raise InvalidInputError("v, mu and nu must share one grid")
    mismatch = float(np.abs(divergence(v).values - (mu.values - nu.values)).max())
    if mismatch > DIVERGENCE_TOL:
        raise InvalidInputError(f"div v != mu - nu (max cell gap {mismatch:.3e})")

    grid = v.grid
    i_Q, v_Q = traffic_measures(Q, grid, threads)
    norm_v = tv_norm(v)
    norm_vQ = tv_norm(v_Q)
    norm_residual = tv_norm(v - v_Q)
    intensity_mass = mass(i_Q)
    report = DecompositionReport(
        norm_v=norm_v,
        norm_vQ=norm_vQ,
        norm_residual=norm_residual,
        intensity_mass=intensity_mass,
        defect=norm_residual + intensity_mass - norm_v,
        marginal_gap_mu=_l1_gap(endpoint_density(Q, grid, end=0), mu),
        marginal_gap_nu=_l1_gap(endpoint_density(Q, grid, end=1), nu),
    )
    logger.info(
        "decomposition: |v|=%.6g |v_Q|=%.6g |v-v_Q|=%.6g i_Q=%.6g defect=%.3e",
        norm_v, norm_vQ, norm_residual, intensity_mass, report.defect,
    )
    return report
