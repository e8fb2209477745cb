"""
Reference-scale checks: 64x64 grid, eps = 2h, 10^5 particles, 64 RK4 steps, seed 42.

The pipeline runs are marked slow; run them with `pytest -m slow`.
"""

import math

import numpy as np
import pytest

from beckmann import CostFunctional, atoms_from_density, monotone_harness, solve_beckmann_euclidean, solve_beckmann_graph, solve_kantorovich
from field_core import Grid2D, ScalarField, magnitude_field, mass, tv_norm
from moser_flow import endpoint_density, integrate_paths
from path_measures import decomposition_report, traffic_measures
from regularize import regularize_triple
from scenarios import make_1d_profile, make_separated_scenario

N = 64
PARTICLES = 100_000
STEPS = 64
SEED = 42


def l1(a: np.ndarray, b: np.ndarray, grid: Grid2D) -> float:
    return float(np.abs(a - b).sum() * grid.cell_area)


def run_pipeline(triple, threads: int = 1):
    v, mu, nu = triple
    v_eps, mu_eps, nu_eps, _ = regularize_triple(v, mu, nu, 2.0 / N)
    Q = integrate_paths(v_eps, mu_eps, nu_eps, PARTICLES, STEPS, SEED, threads=threads)
    i_Q, v_Q = traffic_measures(Q, v_eps.grid, threads=threads)
    return v_eps, mu_eps, nu_eps, Q, i_Q, v_Q


@pytest.fixture(scope="module")
def profile_run():
    return run_pipeline(make_1d_profile(Grid2D(N, N)))


@pytest.fixture(scope="module")
def separated_run():
    grid = Grid2D(N, N)
    v, mu, nu = make_separated_scenario(grid)
    transport, _, _ = make_separated_scenario(grid, strength=0.0)
    return tv_norm(v - transport), tv_norm(v), run_pipeline((v, mu, nu))


@pytest.fixture(scope="module")
def cycle_free_run():
    return run_pipeline(make_separated_scenario(Grid2D(N, N), strength=0.0))


@pytest.mark.slow
def test_moser_paths_reproduce_the_field(profile_run):
    v_eps, _, _, _, i_Q, v_Q = profile_run
    grid = v_eps.grid
    scale = tv_norm(v_eps)
    assert l1(i_Q.values, magnitude_field(v_eps).values, grid) <= 0.05 * scale
    gap = l1(v_Q.u, v_eps.u, grid) + l1(v_Q.w, v_eps.w, grid)
    assert gap <= 0.05 * scale


@pytest.mark.slow
def test_endpoints_match_marginals(profile_run):
    v_eps, mu_eps, nu_eps, Q, _, _ = profile_run
    grid = v_eps.grid
    assert l1(endpoint_density(Q, grid, end=0).values, mu_eps.values, grid) <= 0.05
    assert l1(endpoint_density(Q, grid, end=1).values, nu_eps.values, grid) <= 0.05


@pytest.mark.slow
def test_cycle_free_defect(cycle_free_run):
    v_eps, mu_eps, nu_eps, Q, i_Q, v_Q = cycle_free_run
    report = decomposition_report(v_eps, Q, mu_eps, nu_eps)
    assert abs(report.defect) <= 0.02 * report.norm_v
    assert tv_norm(v_Q) <= mass(i_Q) * 1.02
    assert mass(i_Q) <= tv_norm(v_eps) * 1.02


@pytest.mark.slow
def test_off_support_cycle_is_dropped(separated_run):
    loop_norm, norm_v, (v_eps, _, _, Q, i_Q, v_Q) = separated_run
    xc, _ = i_Q.grid.cell_centers()
    right = i_Q.values[xc >= 0.5].sum() * i_Q.grid.cell_area
    assert right <= 0.05 * loop_norm
    assert tv_norm(v_Q) <= 0.55 * norm_v


@pytest.mark.slow
def test_monotone_harness_on_pipeline(profile_run, separated_run):
    v_eps, _, _, Q, _, _ = profile_run
    report = monotone_harness(v_eps, Q, CostFunctional.total_mass())
    assert report.intensity_within_tolerance

    loop_norm, _, (v_sep, _, _, Q_sep, _, _) = separated_run
    report = monotone_harness(v_sep, Q_sep, CostFunctional.total_mass())
    assert report.f_gap >= 0.4 * loop_norm


@pytest.mark.slow
def test_thread_count_leaves_reports_unchanged():
    grid = Grid2D(32, 32)
    v, mu, nu = make_1d_profile(grid)
    reports = []
    for threads in (1, 4):
        v_eps, mu_eps, nu_eps, _ = regularize_triple(v, mu, nu, 2 * grid.h)
        Q = integrate_paths(v_eps, mu_eps, nu_eps, 20_000, 32, SEED, threads=threads)
        reports.append(decomposition_report(v_eps, Q, mu_eps, nu_eps, threads=threads).to_dict())
    for key, value in reports[0].items():
        assert abs(reports[1][key] - value) <= 1e-12


def test_graph_beckmann_equals_l1_transport_on_random_instances():
    rng = np.random.default_rng(SEED)
    grid = Grid2D(16, 16)
    for _ in range(20):
        n_src, n_dst = (int(k) for k in rng.integers(1, 65, size=2))
        cells = rng.choice(grid.nx * grid.ny, size=n_src + n_dst, replace=False)
        values = []
        for chosen, n in ((cells[:n_src], n_src), (cells[n_src:], n_dst)):
            counts = rng.multinomial(1000 - n, np.full(n, 1.0 / n)) + 1
            flat = np.zeros(grid.nx * grid.ny)
            flat[chosen] = counts / 1000 / grid.cell_area
            values.append(ScalarField(grid, flat.reshape(grid.shape)))
        mu, nu = values
        pb = solve_beckmann_graph(mu, nu)
        pk = solve_kantorovich(atoms_from_density(mu), atoms_from_density(nu), cost="l1")
        assert abs(pb.value - pk.value) <= 1e-9


@pytest.mark.slow
def test_euclidean_beckmann_two_atoms():
    grid = Grid2D(N, N)
    source, target = (10, 20), (50, 41)
    mu = np.zeros(grid.shape)
    nu = np.zeros(grid.shape)
    mu[source[1], source[0]] = nu[target[1], target[0]] = 1.0 / grid.cell_area
    solution = solve_beckmann_euclidean(ScalarField(grid, mu), ScalarField(grid, nu))
    distance = grid.h * math.hypot(target[0] - source[0], target[1] - source[1])
    assert solution.value == pytest.approx(distance, rel=0.02)
    assert solution.report.gap <= 0.01


@pytest.mark.slow
def test_euclidean_beckmann_product_measure():
    _, mu, nu = make_1d_profile(Grid2D(N, N))
    solution = solve_beckmann_euclidean(mu, nu)
    assert solution.value == pytest.approx(1.0 / 12.0, rel=0.02)
    assert solution.report.gap <= 0.01
