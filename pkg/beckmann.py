"""
Minimal-flow (Beckmann) and transport (Kantorovich) solvers.

- solve_beckmann_graph: exact l1 minimal flow as a min-cost flow on the
  4-neighbour cell graph (networkx network simplex).
- solve_beckmann_euclidean: min tv_norm(v) s.t. div v = mu - nu, by a
  primal-dual hybrid gradient iteration with a dual lower bound.
- solve_kantorovich: exact transportation LP on atomic measures (POT emd).
- flow_from_plan: segment flow of a coupling.
- monotone_harness: compares a field's magnitude with the intensity of a
  path ensemble under a monotone cost functional.

The exact solvers work on masses scaled to integers (10^9 units).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path as FilePath
from typing import Callable

import networkx as nx
import numpy as np
import ot
import pandas as pd
from scipy.spatial.distance import cdist

from errors import InvalidInputError, InvalidParameterError, SolverFailureError
from field_core import (
    BoundaryFlux,
    Grid2D,
    ScalarField,
    VectorField,
    divergence,
    format_json,
    magnitude_field,
    mass,
    read_table,
    tv_norm,
)
from moser_flow import PathEnsemble
from path_measures import flow, intensity
from regularize import poisson_neumann

logger = logging.getLogger(__name__)

MASS_SCALE = 10**9
MASS_TOL = 1e-9
MAX_ATOMS = 512
GAP_TARGET = 0.01
STEP = 0.7

COSTS = {"euclidean": "euclidean", "l1": "cityblock", "graph": "cityblock"}


# Measures and plans

@dataclass(frozen=True)
class AtomicMeasure:
    """Finitely many weighted points."""

    points: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        points = np.array(self.points, dtype=float).reshape(-1, 2)
        masses = np.array(self.masses, dtype=float).ravel()
        if len(points) != len(masses):
            raise InvalidInputError(f"{len(points)} atom positions but {len(masses)} masses")
        if not len(points):
            raise InvalidInputError("atom list is empty")
        if np.any(masses < 0) or not np.all(np.isfinite(masses)):
            raise InvalidInputError("atom masses must be finite and non-negative")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "masses", masses)

    def __len__(self) -> int:
        return len(self.masses)

    @property
    def total(self) -> float:
        return float(self.masses.sum())


@dataclass(frozen=True)
class TransportPlan:
    """A coupling of two atomic measures, stored as sparse (row, col, mass) triples."""

    sources: AtomicMeasure
    targets: AtomicMeasure
    rows: np.ndarray
    cols: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        if np.any(self.masses <= 0):
            raise InvalidInputError("coupling masses must be positive")
        out = np.bincount(self.rows, weights=self.masses, minlength=len(self.sources))
        into = np.bincount(self.cols, weights=self.masses, minlength=len(self.targets))
        gap = max(np.abs(out - self.sources.masses).max(), np.abs(into - self.targets.masses).max())
        if gap > MASS_TOL:
            raise InvalidInputError(f"plan marginals off by {gap:.3e}")
        if abs(self.masses.sum() - 1.0) > MASS_TOL:
            raise InvalidInputError(f"plan has total mass {self.masses.sum():.12g}")

    @property
    def couplings(self) -> list[tuple[int, int, float]]:
        return [(int(i), int(j), float(m)) for i, j, m in zip(self.rows, self.cols, self.masses)]


def atoms_from_density(f: ScalarField) -> AtomicMeasure:
    """Cell-center atoms carrying the mass of each non-empty cell."""
    xc, yc = f.grid.cell_centers()
    cell_mass = f.values.ravel() * f.grid.cell_area
    keep = cell_mass > 0
    return AtomicMeasure(np.column_stack([xc.ravel()[keep], yc.ravel()[keep]]), cell_mass[keep])


def read_atoms(path: str | FilePath) -> AtomicMeasure:
    df = read_table(path, ["x", "y", "mass"])
    return AtomicMeasure(df[["x", "y"]].to_numpy(dtype=float), df["mass"].to_numpy(dtype=float))


def write_atoms(atoms: AtomicMeasure, path: str | FilePath):
    frame = pd.DataFrame({"x": atoms.points[:, 0], "y": atoms.points[:, 1], "mass": atoms.masses})
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(f"# atoms count={len(atoms)}\n")
        frame.to_csv(handle, header=False, index=False, float_format="%.17g")


def _integer_masses(masses: np.ndarray) -> np.ndarray:
    """Masses in 10^-9 units summing to exactly 10^9; the rounding residual goes to the largest atom."""
    total = float(masses.sum())
    if abs(total - 1.0) > MASS_TOL:
        raise InvalidInputError(f"mass imbalance: total mass {total:.12g}, expected 1")
    scaled = np.rint(masses * MASS_SCALE).astype(np.int64)
    scaled[np.argmax(scaled)] += MASS_SCALE - int(scaled.sum())
    return scaled


# Reports

@dataclass(frozen=True)
class SolverReport:
    value: float
    dual_value: float
    gap: float
    iterations: int
    converged: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return format_json(self.to_dict())


@dataclass(frozen=True)
class FlowSolution:
    """Optimal field and value; unpacks as (field, value)."""

    field: VectorField
    value: float
    report: SolverReport

    def __iter__(self):
        return iter((self.field, self.value))


@dataclass(frozen=True)
class PlanSolution:
    plan: TransportPlan
    value: float
    report: SolverReport

    def __iter__(self):
        return iter((self.plan, self.value))


# Beckmann on the grid graph

def _check_pair(mu: ScalarField, nu: ScalarField):
    if mu.grid != nu.grid:
        raise InvalidInputError("mu and nu live on different grids")
    for name, f in (("mu", mu), ("nu", nu)):
        if f.values.min() < 0:
            raise InvalidInputError(f"{name} has negative values")
    gap = abs(mass(mu) - mass(nu))
    if gap > MASS_TOL:
        raise InvalidInputError(f"mass imbalance: |mass(mu) - mass(nu)| = {gap:.3e}")


def _grid_graph(grid: Grid2D, demand: np.ndarray) -> nx.DiGraph:
    G = nx.DiGraph()
    for node, d in enumerate(demand):
        G.add_node(node, demand=int(d))
    index = np.arange(grid.nx * grid.ny).reshape(grid.shape)
    pairs = np.concatenate([
        np.column_stack([index[:, :-1].ravel(), index[:, 1:].ravel()]),
        np.column_stack([index[:-1, :].ravel(), index[1:, :].ravel()]),
    ])
    for a, b in pairs.tolist():
        G.add_edge(a, b, weight=1)
        G.add_edge(b, a, weight=1)
    return G


def solve_beckmann_graph(mu: ScalarField, nu: ScalarField) -> FlowSolution:
    """
    Exact l1 minimal flow: min sum h^2 (|u| + |w|) s.t. div v = mu - nu.

    Every undirected cell adjacency is a pair of unit-cost arcs; the optimal
    integer flow in 10^-9 mass units becomes face fluxes mass / h.
    """
    _check_pair(mu, nu)
    grid = mu.grid
    h = grid.h
    if np.array_equal(mu.values, nu.values):
        report = SolverReport(0.0, 0.0, 0.0, 0)
        return FlowSolution(VectorField.zeros(grid), 0.0, report)

    supply = _integer_masses(mu.values.ravel() * grid.cell_area)
    sink = _integer_masses(nu.values.ravel() * grid.cell_area)
    G = _grid_graph(grid, sink - supply)
    try:
        cost, flow_dict = nx.network_simplex(G)
    except (nx.NetworkXUnfeasible, nx.NetworkXUnbounded) as e:
        raise SolverFailureError(f"network simplex failed: {e}") from e

    u = np.zeros((grid.ny, grid.nx + 1))
    w = np.zeros((grid.ny + 1, grid.nx))
    for a, out in flow_dict.items():
        for b, amount in out.items():
            if not amount:
                continue
            ja, ia = divmod(a, grid.nx)
            jb, ib = divmod(b, grid.nx)
            sign = 1.0 if b > a else -1.0
            if ja == jb:
                u[ja, max(ia, ib)] += sign * amount
            else:
                w[max(ja, jb), ia] += sign * amount
    field = VectorField(grid, u / (MASS_SCALE * h), w / (MASS_SCALE * h))
    value = cost * h / MASS_SCALE
    logger.info("graph Beckmann on %dx%d: value %.12g", grid.nx, grid.ny, value)
    return FlowSolution(field, value, SolverReport(value, value, 0.0, 0))


# Beckmann with the Euclidean norm

def _average(u: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return 0.5 * (u[:, :-1] + u[:, 1:]), 0.5 * (w[:-1, :] + w[1:, :])


def _average_adjoint(qx: np.ndarray, qy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    u = np.zeros((qx.shape[0], qx.shape[1] + 1))
    w = np.zeros((qy.shape[0] + 1, qy.shape[1]))
    u[:, :-1] += 0.5 * qx
    u[:, 1:] += 0.5 * qx
    w[:-1, :] += 0.5 * qy
    w[1:, :] += 0.5 * qy
    return u, w


def _div(u: np.ndarray, w: np.ndarray, h: float) -> np.ndarray:
    return (u[:, 1:] - u[:, :-1]) / h + (w[1:, :] - w[:-1, :]) / h


def _div_adjoint(phi: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    u = np.zeros((phi.shape[0], phi.shape[1] + 1))
    w = np.zeros((phi.shape[0] + 1, phi.shape[1]))
    u[:, 1:] += phi / h
    u[:, :-1] -= phi / h
    w[1:, :] += phi / h
    w[:-1, :] -= phi / h
    return u, w


def _zero_boundary(u: np.ndarray, w: np.ndarray):
    u[:, 0] = u[:, -1] = 0.0
    w[0, :] = w[-1, :] = 0.0


def _lipschitz(psi: np.ndarray, points: np.ndarray, block: int = 512) -> float:
    """max |psi_a - psi_b| / |a - b| over pairs of distinct points."""
    best = 0.0
    for k in range(0, len(points), block):
        dist = cdist(points[k:k + block], points)
        diff = np.abs(psi[k:k + block, None] - psi[None, :])
        ratio = np.divide(diff, dist, out=np.zeros_like(diff), where=dist > 0)
        best = max(best, float(ratio.max(initial=0.0)))
    return best


def _dual_bound(phi: np.ndarray, f: np.ndarray, grid: Grid2D) -> float:
    """Kantorovich-Rubinstein lower bound |sum psi f h^2| / Lip(psi) over the support of f."""
    support = f.ravel() != 0
    xc, yc = grid.cell_centers()
    points = np.column_stack([xc.ravel()[support], yc.ravel()[support]])
    psi = phi.ravel()[support]
    lip = _lipschitz(psi, points)
    if lip == 0.0:
        return 0.0
    return abs(float(np.sum(psi * f.ravel()[support]))) * grid.cell_area / lip


def _feasible(u: np.ndarray, w: np.ndarray, f: ScalarField) -> VectorField:
    """Project the iterate onto div v = f with a zero-flux Neumann correction."""
    v = VectorField(f.grid, u, w)
    return v + poisson_neumann(f - divergence(v), BoundaryFlux.zeros(f.grid))


def solve_beckmann_euclidean(mu: ScalarField, nu: ScalarField, n_iters: int = 20000) -> FlowSolution:
    """
    Primal-dual hybrid gradient for min sum |A x| s.t. D' x = f'.

    A averages faces to cell vectors (norm <= 1); D' is the divergence scaled
    by h / sqrt(8) (norm <= 1). With tau = sigma = 0.7 the step condition
    tau * sigma * ||K||^2 < 1 holds. The final iterate is made exactly
    feasible, so the returned value is a valid upper bound; the duality gap
    is checked at iterations 100, 200, 400, ... and at the end.
    """
    if n_iters < 1:
        raise InvalidParameterError(f"n_iters must be positive, got {n_iters}")
    _check_pair(mu, nu)
    grid = mu.grid
    h = grid.h
    f = mu - nu
    if not np.any(f.values):
        return FlowSolution(VectorField.zeros(grid), 0.0, SolverReport(0.0, 0.0, 0.0, 0))

    scale = h / math.sqrt(8.0)
    target = scale * f.values
    u = np.zeros((grid.ny, grid.nx + 1))
    w = np.zeros((grid.ny + 1, grid.nx))
    u_bar, w_bar = u.copy(), w.copy()
    qx = np.zeros(grid.shape)
    qy = np.zeros(grid.shape)
    phi = np.zeros(grid.shape)

    best = None
    checkpoint = 100
    iterations = 0
    for k in range(1, n_iters + 1):
        ax, ay = _average(u_bar, w_bar)
        qx += STEP * ax
        qy += STEP * ay
        norm = np.maximum(1.0, np.hypot(qx, qy))
        qx /= norm
        qy /= norm
        phi += STEP * (scale * _div(u_bar, w_bar, h) - target)

        gu, gw = _average_adjoint(qx, qy)
        du, dw = _div_adjoint(phi, h)
        u_new = u - STEP * (gu + scale * du)
        w_new = w - STEP * (gw + scale * dw)
        _zero_boundary(u_new, w_new)
        u_bar = 2.0 * u_new - u
        w_bar = 2.0 * w_new - w
        u, w = u_new, w_new
        iterations = k

        if k == checkpoint or k == n_iters:
            checkpoint *= 2
            field = _feasible(u, w, f)
            value = tv_norm(field)
            dual = _dual_bound(phi, f.values, grid)
            gap = (value - dual) / value if value > 0 else 0.0
            logger.debug("PDHG iter %d: primal %.8g dual %.8g gap %.3e", k, value, dual, gap)
            if best is None or value < best[1]:
                best = (field, value)
            if gap <= GAP_TARGET:
                break

    field, value = best
    dual = _dual_bound(phi, f.values, grid)
    gap = (value - dual) / value if value > 0 else 0.0
    converged = gap <= GAP_TARGET
    if not converged:
        logger.warning("PDHG stopped after %d iterations with duality gap %.3e", iterations, gap)
    report = SolverReport(value, dual, gap, iterations, converged)
    return FlowSolution(field, value, report)


# Kantorovich

def solve_kantorovich(sources: AtomicMeasure, targets: AtomicMeasure, cost: str = "euclidean") -> PlanSolution:
    """
    Exact optimal coupling for the cost |x - y| (euclidean) or |x - y|_1 (l1, graph).

    The plan's marginals are the integer-rounded measures, so its row and
    column sums hold exactly up to the 10^-9 mass unit.
    """
    if cost not in COSTS:
        raise InvalidParameterError(f"unknown cost {cost!r}; choose from {sorted(COSTS)}")
    for name, atoms in (("sources", sources), ("targets", targets)):
        if len(atoms) > MAX_ATOMS:
            raise InvalidInputError(f"{name} has {len(atoms)} atoms, at most {MAX_ATOMS} supported")
    a = _integer_masses(sources.masses)
    b = _integer_masses(targets.masses)
    M = cdist(sources.points, targets.points, metric=COSTS[cost])

    G, log = ot.emd(a.astype(float), b.astype(float), M, numItermax=10**7, log=True)
    if log.get("warning"):
        raise SolverFailureError(f"transport LP did not finish cleanly: {log['warning']}")
    G = np.rint(G)
    rows, cols = np.nonzero(G)
    value = float(np.sum(G[rows, cols] * M[rows, cols])) / MASS_SCALE
    dual = float(np.dot(log["u"], a) + np.dot(log["v"], b)) / MASS_SCALE

    plan = TransportPlan(
        AtomicMeasure(sources.points, a / MASS_SCALE),
        AtomicMeasure(targets.points, b / MASS_SCALE),
        rows.astype(np.int64),
        cols.astype(np.int64),
        G[rows, cols] / MASS_SCALE,
    )
    logger.info("Kantorovich (%s) %dx%d atoms: value %.12g", cost, len(sources), len(targets), value)
    return PlanSolution(plan, value, SolverReport(value, dual, abs(value - dual), 0))


def flow_from_plan(gamma: TransportPlan, grid: Grid2D) -> VectorField:
    """Traffic flow of the plan sending each coupled pair along its straight segment."""
    points = np.empty((2 * len(gamma.masses), 2))
    points[0::2] = gamma.sources.points[gamma.rows]
    points[1::2] = gamma.targets.points[gamma.cols]
    offsets = np.arange(len(gamma.masses) + 1, dtype=np.int64) * 2
    return flow(PathEnsemble(points, offsets, gamma.masses), grid)


# Monotone functionals

@dataclass(frozen=True)
class CostFunctional:
    """
    F(f) = sum h^2 c(f) for a cellwise non-decreasing c.

    kind: 'total-mass' (c = identity), 'p-power' (c = f^p, p > 1) or 'custom'.
    """

    kind: str
    p: float = 1.0
    cellwise: Callable[[np.ndarray], np.ndarray] | None = None
    strictly_monotone: bool | None = None

    def __post_init__(self):
        if self.kind not in ("total-mass", "p-power", "custom"):
            raise InvalidParameterError(f"unknown functional kind {self.kind!r}")
        if self.kind == "p-power" and not self.p > 1:
            raise InvalidParameterError(f"p-power needs p > 1, got {self.p}")
        if self.kind == "custom" and self.cellwise is None:
            raise InvalidParameterError("custom functional needs a cellwise map")
        if self.strictly_monotone is None:
            object.__setattr__(self, "strictly_monotone", self.kind != "custom")

    @classmethod
    def total_mass(cls) -> "CostFunctional":
        return cls("total-mass")

    @classmethod
    def p_power(cls, p: float) -> "CostFunctional":
        return cls("p-power", p=p)

    @classmethod
    def custom(cls, cellwise: Callable[[np.ndarray], np.ndarray], strictly_monotone: bool = False) -> "CostFunctional":
        return cls("custom", cellwise=cellwise, strictly_monotone=strictly_monotone)

    def __call__(self, f: ScalarField) -> float:
        values = np.clip(f.values, 0.0, None)
        if self.kind == "total-mass":
            cell = values
        elif self.kind == "p-power":
            cell = values ** self.p
        else:
            cell = np.asarray(self.cellwise(values), dtype=float)
        return float(cell.sum() * f.grid.cell_area)


@dataclass(frozen=True)
class HarnessReport:
    max_excess: float
    intensity_within_tolerance: bool
    f_intensity: float
    f_magnitude: float
    f_gap: float
    optimality_defect: float | None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return format_json(self.to_dict())


def monotone_harness(
    v: VectorField,
    Q: PathEnsemble,
    F: CostFunctional,
    tolerance: float = 0.02,
    threads: int = 1,
) -> HarnessReport:
    """
    Compare i_Q with |v| cellwise and under F.

    intensity_within_tolerance: max(i_Q - |v|) <= tolerance * max |v|.
    optimality_defect: the L1 gap between |v| and i_Q, reported when F is
    strictly monotone and F(i_Q), F(|v|) agree within tolerance * F(|v|);
    None otherwise.
    """
    i_Q = intensity(Q, v.grid, threads)
    magnitude = magnitude_field(v)
    max_excess = float(np.max(i_Q.values - magnitude.values))
    within = max_excess <= tolerance * float(magnitude.values.max())
    f_intensity = F(i_Q)
    f_magnitude = F(magnitude)
    f_gap = f_magnitude - f_intensity
    defect = None
    if F.strictly_monotone and abs(f_gap) <= tolerance * abs(f_magnitude):
        defect = float(np.abs(magnitude.values - i_Q.values).sum() * v.grid.cell_area)
    return HarnessReport(max_excess, bool(within), f_intensity, f_magnitude, f_gap, defect)
