"""
Smoothing of (v, mu, nu) into a strictly positive, divergence-consistent triple.

Steps, all on the enlarged grid Omega' (input grid padded by ceil(eps^(1/3)/h) cells,
or by the kernel radius when that is wider):
1. Convolve v, mu, nu with a truncated Gaussian of standard deviation eps.
2. Measure the mass a_eps, b_eps escaping Omega' and the boundary flux c_eps.
3. Spread the escaped mass uniformly over Omega'.
4. Correct the field with delta = grad u, u solving a Neumann Poisson problem,
   so that div v_eps = mu_eps - nu_eps and v_eps . n = 0 on the boundary.
5. Mix in the rest state on a uniform density with weight min(FLOOR_RATE * eps, 1/2):
   v_eps scales by (1 - weight) and both densities gain weight / |Omega'|, so
   neither drops below that value.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sps
from scipy import ndimage
from scipy.sparse.linalg import LinearOperator, cg
from scipy.special import ndtr

from errors import InfeasibleError, InvalidInputError, InvalidParameterError, SolverFailureError
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
    is_probability_density,
    mass,
)

logger = logging.getLogger(__name__)

TRUNCATION = 4.0
FLOOR_RATE = 0.125
COMPATIBILITY_TOL = 1e-8
PRECONDITION_TOL = 1e-9


@dataclass(frozen=True)
class RegularizationReport:
    epsilon: float
    a_eps: float
    b_eps: float
    c_eps: float
    poisson_residual: float
    floor: float
    correction_l2: float = 0.0
    padding: int = 0
    floor_mass: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return format_json(self.to_dict())


def _check_eps(eps: float):
    if not eps > 0 or not math.isfinite(eps):
        raise InvalidParameterError(f"smoothing scale must be positive, got {eps}")


def kernel_radius(eps: float, h: float) -> int:
    return max(1, math.ceil(TRUNCATION * eps / h - 1e-12))


def padding_cells(eps: float, h: float) -> int:
    """Width of Omega' minus Omega in cells: t_eps = eps^(1/3) rounded up, never less than the kernel radius."""
    return max(math.ceil(eps ** (1.0 / 3.0) / h - 1e-12), kernel_radius(eps, h))


def gaussian_kernel(eps: float, h: float) -> np.ndarray:
    """1D sampled Gaussian, truncated at 4 eps and normalized to sum 1."""
    radius = kernel_radius(eps, h)
    offsets = np.arange(-radius, radius + 1) * h
    kernel = np.exp(-0.5 * (offsets / eps) ** 2)
    return kernel / kernel.sum()


def _smooth(array: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = ndimage.convolve1d(array, kernel, axis=1, mode="constant", cval=0.0)
    return ndimage.convolve1d(out, kernel, axis=0, mode="constant", cval=0.0)


def gaussian_convolve_scalar(f: ScalarField, eps: float) -> ScalarField:
    """Convolve f (extended by zero) on the enlarged grid Omega'."""
    _check_eps(eps)
    grid = f.grid.padded(padding_cells(eps, f.grid.h))
    kernel = gaussian_kernel(eps, f.grid.h)
    return ScalarField(grid, _smooth(embed_scalar(f, grid).values, kernel))


def gaussian_convolve_vector(v: VectorField, eps: float) -> VectorField:
    """Componentwise face-flux convolution on Omega'; commutes with divergence."""
    _check_eps(eps)
    grid = v.grid.padded(padding_cells(eps, v.grid.h))
    kernel = gaussian_kernel(eps, v.grid.h)
    padded = embed_vector(v, grid)
    return VectorField(grid, _smooth(padded.u, kernel), _smooth(padded.w, kernel))


def _neumann_laplacian(grid: Grid2D) -> sps.csr_matrix:
    """Graph Laplacian of the cell grid (positive semi-definite, constants in the kernel)."""

    def tridiag(n: int) -> sps.csr_matrix:
        main = np.full(n, 2.0)
        main[0] = main[-1] = 1.0
        off = -np.ones(n - 1)
        return sps.diags([off, main, off], [-1, 0, 1], format="csr")

    return (
        sps.kron(sps.identity(grid.ny), tridiag(grid.nx))
        + sps.kron(tridiag(grid.ny), sps.identity(grid.nx))
    ).tocsr()


def _solve_neumann(
    rhs: ScalarField,
    flux: BoundaryFlux,
    rtol: float = 1e-12,
) -> tuple[VectorField, float, int]:
    grid = rhs.grid
    h = grid.h
    gap = mass(rhs) + flux.total()
    if abs(gap) > COMPATIBILITY_TOL:
        raise InfeasibleError(
            f"Neumann compatibility violated: mass(rhs) + boundary outflow = {gap:.3e}"
        )

    u = np.zeros((grid.ny, grid.nx + 1))
    w = np.zeros((grid.ny + 1, grid.nx))
    u[:, 0] = flux.left
    u[:, -1] = -flux.right
    w[0, :] = flux.bottom
    w[-1, :] = -flux.top

    known = np.zeros(grid.shape)
    known[:, 0] -= u[:, 0] / h
    known[:, -1] += u[:, -1] / h
    known[0, :] -= w[0, :] / h
    known[-1, :] += w[-1, :] / h

    b = -(h * h) * (rhs.values - known).ravel()
    b -= b.mean()

    laplacian = _neumann_laplacian(grid)
    n = grid.nx * grid.ny

    def project(x):
        return x - x.mean()

    operator = LinearOperator((n, n), matvec=lambda x: project(laplacian @ project(x)), dtype=float)
    iterations = 0

    def count(_):
        nonlocal iterations
        iterations += 1

    solution, info = cg(
        operator, b, x0=np.zeros(n), rtol=rtol, atol=0.0, maxiter=10 * n, callback=count
    )
    if info != 0:
        raise SolverFailureError(f"conjugate gradient did not converge in {10 * n} iterations")

    potential = project(solution).reshape(grid.shape)
    u[:, 1:-1] = (potential[:, 1:] - potential[:, :-1]) / h
    w[1:-1, :] = (potential[1:, :] - potential[:-1, :]) / h
    delta = VectorField(grid, u, w)
    residual = float(np.abs(divergence(delta).values - rhs.values).max())
    logger.debug("Neumann solve: %d CG iterations, residual %.3e", iterations, residual)
    return delta, residual, iterations


def poisson_neumann(rhs: ScalarField, boundary_flux: BoundaryFlux, rtol: float = 1e-12) -> VectorField:
    """
    Return delta = grad u with div delta = rhs and delta . n = -boundary_flux.

    `boundary_flux` is the outward normal flux to cancel, so compatibility reads
    mass(rhs) + h * sum(boundary_flux) = 0. The potential u has zero mean.
    """
    delta, _, _ = _solve_neumann(rhs, boundary_flux, rtol=rtol)
    return delta


def escaped_mass(f: ScalarField, eps: float, outer: Grid2D) -> float:
    """Mass of f * (exact Gaussian) landing outside `outer`, cells treated as atoms."""
    xc, yc = f.grid.cell_centers()
    xmin, xmax, ymin, ymax = outer.bounds
    tail_x = ndtr(-(xc - xmin) / eps) + ndtr(-(xmax - xc) / eps)
    tail_y = ndtr(-(yc - ymin) / eps) + ndtr(-(ymax - yc) / eps)
    escape = tail_x + tail_y - tail_x * tail_y
    return float((np.abs(f.values) * escape).sum() * f.grid.cell_area)


def _exact_boundary_flux(v: VectorField, eps: float, outer: Grid2D) -> float:
    """max |(v * exact Gaussian) . n| over the boundary faces of `outer`."""
    g = v.grid

    def pdf(d):
        return np.exp(-0.5 * (d / eps) ** 2) / (math.sqrt(2.0 * math.pi) * eps)

    xs_u = g.x_faces()
    ys_u = g.cell_centers()[1][:, 0]
    xs_w = g.cell_centers()[0][0, :]
    ys_w = g.y_faces()
    xmin, xmax, ymin, ymax = outer.bounds
    yb = outer.cell_centers()[1][:, 0]
    xb = outer.cell_centers()[0][0, :]
    area = g.cell_area

    worst = 0.0
    for x_edge in (xmin, xmax):
        side = area * pdf(yb[:, None] - ys_u[None, :]) @ v.u @ pdf(x_edge - xs_u)
        worst = max(worst, float(np.abs(side).max(initial=0.0)))
    for y_edge in (ymin, ymax):
        side = area * pdf(xb[:, None] - xs_w[None, :]) @ v.w.T @ pdf(y_edge - ys_w)
        worst = max(worst, float(np.abs(side).max(initial=0.0)))
    return worst


def regularize_triple(
    v: VectorField,
    mu: ScalarField,
    nu: ScalarField,
    eps: float,
) -> tuple[VectorField, ScalarField, ScalarField, RegularizationReport]:
    """Smooth (v, mu, nu) on Omega'; see the module docstring for the steps."""
    _check_eps(eps)
    if not (v.grid == mu.grid == nu.grid):
        raise InvalidInputError("v, mu and nu must share one grid")
    for name, f in (("mu", mu), ("nu", nu)):
        if not is_probability_density(f):
            raise InvalidInputError(f"{name} is not a probability density (mass {mass(f):.12g})")
    mismatch = float(np.abs(divergence(v).values - (mu.values - nu.values)).max())
    if mismatch > PRECONDITION_TOL:
        raise InvalidInputError(f"div v != mu - nu (max cell gap {mismatch:.3e})")

    mu_hat = gaussian_convolve_scalar(mu, eps)
    nu_hat = gaussian_convolve_scalar(nu, eps)
    v_hat = gaussian_convolve_vector(v, eps)
    grid = v_hat.grid

    a_eps = escaped_mass(mu, eps, grid)
    b_eps = escaped_mass(nu, eps, grid)
    mu_eps = mu_hat * ((1.0 - a_eps) / mass(mu_hat)) + ScalarField.constant(grid, a_eps / grid.area)
    nu_eps = nu_hat * ((1.0 - b_eps) / mass(nu_hat)) + ScalarField.constant(grid, b_eps / grid.area)

    flux = boundary_flux(v_hat)
    c_eps = max(flux.max_abs(), _exact_boundary_flux(v, eps, grid))

    rhs = mu_eps - nu_eps - divergence(v_hat)
    delta, residual, _ = _solve_neumann(rhs, flux)

    floor_mass = min(FLOOR_RATE * eps, 0.5)
    rest = ScalarField.constant(grid, floor_mass / grid.area)
    v_eps = (v_hat + delta).with_boundary_zeroed() * (1.0 - floor_mass)
    mu_eps = mu_eps * (1.0 - floor_mass) + rest
    nu_eps = nu_eps * (1.0 - floor_mass) + rest

    floor = float(min(mu_eps.values.min(), nu_eps.values.min()))
    if not floor > 0:
        raise InvalidParameterError(
            f"density floor vanished at eps={eps}; Gaussian tails underflow, use a larger eps"
        )
    correction_l2 = float(math.sqrt((np.sum(delta.u ** 2) + np.sum(delta.w ** 2)) * grid.cell_area))
    report = RegularizationReport(
        epsilon=float(eps),
        a_eps=a_eps,
        b_eps=b_eps,
        c_eps=c_eps,
        poisson_residual=residual,
        floor=floor,
        correction_l2=correction_l2,
        padding=padding_cells(eps, v.grid.h),
        floor_mass=floor_mass,
    )
    logger.info(
        "regularized at eps=%.4g: a=%.3e b=%.3e c=%.3e floor=%.3e (rest weight %.3e)",
        eps, a_eps, b_eps, c_eps, floor, floor_mass,
    )
    return v_eps, mu_eps, nu_eps, report
