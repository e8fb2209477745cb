#!/usr/bin/env python3
"""
minflow: decompose minimal flows into weighted path ensembles.

Subcommands:
- scenario   write a canned (v, mu, nu) triple
- decompose  regularize, integrate Moser trajectories, report the decomposition
- verify     report on an existing path ensemble
- beckmann   minimal-flow and transport solvers (graph, euclidean, kantorovich, crosscheck)
- render     PPM heatmap (and optional plotly HTML) of a field file

Usage:
    python minflow.py scenario profile1d --n 64 --out-dir data/
    python minflow.py decompose --velocity data/velocity.csv --mu data/mu.csv --nu data/nu.csv --out-dir out/
    python minflow.py verify --velocity out/velocity_eps.csv --mu out/mu_eps.csv --nu out/nu_eps.csv --paths out/paths.csv
    python minflow.py beckmann crosscheck --sources s.csv --targets t.csv --n 16
    python minflow.py render out/intensity.csv out/intensity.ppm --html

Exit codes: 0 success, 2 invalid input or infeasible problem, 3 solver failure.
Environment: MINFLOW_THREADS (default for --threads), MINFLOW_DB (default for --db).
"""

import argparse
import logging
import os
import sys
import uuid
from pathlib import Path

import numpy as np
from dotenv import load_dotenv

from beckmann import (
    AtomicMeasure,
    CostFunctional,
    atoms_from_density,
    monotone_harness,
    read_atoms,
    solve_beckmann_euclidean,
    solve_beckmann_graph,
    solve_kantorovich,
)
from db import finish_run, get_engine, get_session, init_db, record_metrics, start_run, upsert_artifact
from errors import InfeasibleError, InvalidInputError, InvalidParameterError, MinflowError, SolverFailureError
from field_core import (
    Grid2D,
    ScalarField,
    VectorField,
    format_json,
    read_field,
    read_scalar,
    read_vector,
    write_scalar,
    write_vector,
)
from moser_flow import integrate_paths, read_paths, write_paths
from path_measures import decomposition_report, traffic_measures
from regularize import regularize_triple
from render import render_scalar, render_vector, write_html, write_ppm
from scenarios import SCENARIOS

logger = logging.getLogger("minflow")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SOLVER = 3


class RunLedger:
    """Records a run in the SQLite ledger; does nothing without a database path."""

    def __init__(self, db_path: str | None, command: str, args: argparse.Namespace):
        self.session = None
        self.run_key = uuid.uuid4().hex
        if not db_path:
            return
        engine = get_engine(db_path)
        init_db(engine)
        self.session = get_session(engine)
        payload = {k: v for k, v in vars(args).items() if k != "handler"}
        start_run(self.session, self.run_key, command, payload, seed=getattr(args, "seed", None))
        self.session.commit()

    def artifact(self, path: Path, kind: str):
        if self.session is not None:
            upsert_artifact(self.session, self.run_key, str(path), kind, path.stat().st_size)

    def metrics(self, values: dict):
        if self.session is not None:
            record_metrics(self.session, self.run_key, values)

    def close(self, exit_code: int):
        if self.session is None:
            return
        try:
            finish_run(self.session, self.run_key, exit_code)
            self.session.commit()
        except Exception:
            self.session.rollback()
            raise
        finally:
            self.session.close()


def resolve_threads(value: int | None) -> int:
    if value is None:
        raw = os.getenv("MINFLOW_THREADS", "1")
        try:
            value = int(raw)
        except ValueError as e:
            raise InvalidParameterError(f"MINFLOW_THREADS must be an integer, got {raw!r}") from e
    if value < 1:
        raise InvalidParameterError(f"thread count must be at least 1, got {value}")
    return value


def write_text(path: Path, text: str, ledger: RunLedger, kind: str = "report"):
    path.write_text(text, encoding="utf-8")
    ledger.artifact(path, kind)


def print_banner(title: str):
    print(f"\n{'='*50}")
    print(title)
    print(f"{'='*50}")


def print_summary(title: str, values: dict):
    print_banner(title)
    width = max(len(k) for k in values) + 1 if values else 0
    for key in sorted(values):
        value = values[key]
        text = f"{value:.12g}" if isinstance(value, float) else str(value)
        print(f"{key + ':':<{width}} {text}")


def load_triple(args) -> tuple[VectorField, ScalarField, ScalarField]:
    v = read_vector(args.velocity)
    mu = read_scalar(args.mu)
    nu = read_scalar(args.nu)
    if not (v.grid == mu.grid == nu.grid):
        raise InvalidInputError("velocity, mu and nu files describe different grids")
    return v, mu, nu


# Commands

def cmd_scenario(args, ledger: RunLedger) -> int:
    builder = SCENARIOS[args.name]
    grid = Grid2D(args.n, args.n)
    v, mu, nu = builder(grid)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, writer, value in (
        ("velocity.csv", write_vector, v),
        ("mu.csv", write_scalar, mu),
        ("nu.csv", write_scalar, nu),
    ):
        writer(value, out / name)
        ledger.artifact(out / name, "field")
    print(f"Scenario '{args.name}' on {args.n}x{args.n} written to {out}/")
    return EXIT_OK


def cmd_decompose(args, ledger: RunLedger) -> int:
    v, mu, nu = load_triple(args)
    threads = resolve_threads(args.threads)
    eps = args.eps if args.eps is not None else 2.0 * v.grid.h
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    print(f"Decomposing {v.grid.nx}x{v.grid.ny} field: eps={eps:.6g}, "
          f"{args.particles} particles, {args.steps} steps, seed {args.seed}, {threads} thread(s)")

    v_eps, mu_eps, nu_eps, reg = regularize_triple(v, mu, nu, eps)
    Q = integrate_paths(v_eps, mu_eps, nu_eps, args.particles, args.steps, args.seed, threads=threads)
    report = decomposition_report(v_eps, Q, mu_eps, nu_eps, threads=threads)

    write_text(out / "report.json", report.to_json(), ledger)
    write_text(out / "regularization.json", reg.to_json(), ledger)
    if args.save_paths:
        write_paths(Q, out / "paths.csv")
        ledger.artifact(out / "paths.csv", "paths")
    if args.save_fields:
        i_Q, v_Q = traffic_measures(Q, v_eps.grid, threads)
        for name, writer, value in (
            ("intensity.csv", write_scalar, i_Q),
            ("flow.csv", write_vector, v_Q),
            ("velocity_eps.csv", write_vector, v_eps),
            ("mu_eps.csv", write_scalar, mu_eps),
            ("nu_eps.csv", write_scalar, nu_eps),
        ):
            writer(value, out / name)
            ledger.artifact(out / name, "field")

    ledger.metrics(report.to_dict())
    ledger.metrics({f"reg_{k}": value for k, value in reg.to_dict().items()})
    print_summary("Regularization", reg.to_dict())
    print_summary("Decomposition Report", report.to_dict())
    return EXIT_OK


def cmd_verify(args, ledger: RunLedger) -> int:
    v, mu, nu = load_triple(args)
    threads = resolve_threads(args.threads)
    Q = read_paths(args.paths)
    report = decomposition_report(v, Q, mu, nu, threads=threads)
    if args.functional == "p-power":
        F = CostFunctional.p_power(args.p)
    else:
        F = CostFunctional.total_mass()
    harness = monotone_harness(v, Q, F, tolerance=args.tolerance, threads=threads)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_text(out / "verify.json", format_json({
        "decomposition": report.to_dict(),
        "harness": harness.to_dict(),
    }), ledger)
    ledger.metrics(report.to_dict())
    print_summary("Decomposition Report", report.to_dict())
    print_summary(f"Monotone Harness ({F.kind})", harness.to_dict())
    return EXIT_OK


def _density_from_atoms(atoms: AtomicMeasure, grid: Grid2D) -> ScalarField:
    """Cell histogram of an atomic measure, as a density."""
    if not grid.contains(atoms.points).all():
        raise InvalidInputError("atom lies outside the unit square")
    i, j = grid.locate(atoms.points)
    hist = np.bincount(j * grid.nx + i, weights=atoms.masses, minlength=grid.nx * grid.ny)
    return ScalarField(grid, hist.reshape(grid.shape) / grid.cell_area)


def _load_instance(args) -> tuple[ScalarField, ScalarField]:
    """Densities from --mu/--nu, or atoms from --sources/--targets binned on an n x n grid."""
    if args.mu and args.nu:
        mu = read_scalar(args.mu)
        nu = read_scalar(args.nu)
        return mu, nu
    if args.sources and args.targets:
        grid = Grid2D(args.n, args.n)
        return (
            _density_from_atoms(read_atoms(args.sources), grid),
            _density_from_atoms(read_atoms(args.targets), grid),
        )
    raise InvalidInputError("give either --mu and --nu or --sources and --targets")


def cmd_beckmann(args, ledger: RunLedger) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"mode": args.mode}

    if args.mode == "kantorovich":
        if args.sources and args.targets:
            sources, targets = read_atoms(args.sources), read_atoms(args.targets)
        else:
            mu, nu = _load_instance(args)
            sources, targets = atoms_from_density(mu), atoms_from_density(nu)
        solution = solve_kantorovich(sources, targets, cost=args.cost)
        payload["kantorovich"] = solution.report.to_dict()
        payload["couplings"] = len(solution.plan.masses)
        payload["cost"] = args.cost
    else:
        mu, nu = _load_instance(args)
        if args.mode in ("graph", "euclidean"):
            if args.mode == "graph":
                solution = solve_beckmann_graph(mu, nu)
            else:
                solution = solve_beckmann_euclidean(mu, nu, args.iters)
            payload[args.mode] = solution.report.to_dict()
            write_vector(solution.field, out / "beckmann_flow.csv")
            ledger.artifact(out / "beckmann_flow.csv", "field")
        else:
            cost = "euclidean" if args.cost == "euclidean" else "l1"
            if cost == "l1":
                pb = solve_beckmann_graph(mu, nu)
            else:
                pb = solve_beckmann_euclidean(mu, nu, args.iters)
            pk = solve_kantorovich(atoms_from_density(mu), atoms_from_density(nu), cost=cost)
            payload["beckmann"] = pb.report.to_dict()
            payload["kantorovich"] = pk.report.to_dict()
            payload["cost"] = cost
            payload["gap"] = abs(pb.value - pk.value)

    write_text(out / "beckmann.json", format_json(payload), ledger)
    flat = {}
    for key, value in payload.items():
        if isinstance(value, dict):
            flat.update({f"{key}_{k}": x for k, x in value.items()})
        else:
            flat[key] = value
    ledger.metrics(flat)
    print_summary(f"Beckmann ({args.mode})", flat)
    return EXIT_OK


def cmd_render(args, ledger: RunLedger) -> int:
    field = read_field(args.field)
    canvas = render_vector(field) if isinstance(field, VectorField) else render_scalar(field)
    target = Path(args.image)
    write_ppm(canvas, target)
    ledger.artifact(target, "image")
    print(f"Wrote {canvas.width}x{canvas.height} image to {target}")
    if args.html:
        page = target.with_suffix(".html")
        write_html(field, page, title=Path(args.field).name)
        ledger.artifact(page, "image")
        print(f"Wrote interactive heatmap to {page}")
    return EXIT_OK


# Parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="minflow", description="Lagrangian decomposition of minimal flows")
    parser.add_argument("--verbose", action="store_true", help="Debug logging on stderr")
    parser.add_argument("--db", type=str, default=None, help="Run ledger path (default: $MINFLOW_DB, unset = off)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scenario", help="Write a canned scenario")
    p.add_argument("name", choices=sorted(SCENARIOS))
    p.add_argument("--n", type=int, default=64, help="Cells per side")
    p.add_argument("--out-dir", type=str, default=".", help="Output directory")
    p.set_defaults(handler=cmd_scenario)

    p = sub.add_parser("decompose", help="Regularize, integrate and report")
    p.add_argument("--velocity", type=str, required=True, help="Vector field file")
    p.add_argument("--mu", type=str, required=True, help="Source density file")
    p.add_argument("--nu", type=str, required=True, help="Target density file")
    p.add_argument("--eps", type=float, default=None, help="Smoothing scale (default: 2h)")
    p.add_argument("--particles", type=int, default=100_000, help="Number of particles")
    p.add_argument("--steps", type=int, default=64, help="RK4 steps")
    p.add_argument("--seed", type=int, default=42, help="Random seed")
    p.add_argument("--threads", type=int, default=None, help="Worker threads (default: $MINFLOW_THREADS or 1)")
    p.add_argument("--out-dir", type=str, default=".", help="Output directory")
    p.add_argument("--save-paths", action="store_true", help="Also write paths.csv")
    p.add_argument("--save-fields", action="store_true",
                   help="Also write intensity.csv, flow.csv and the regularized triple")
    p.set_defaults(handler=cmd_decompose)

    p = sub.add_parser("verify", help="Decomposition report for an existing path ensemble")
    p.add_argument("--velocity", type=str, required=True)
    p.add_argument("--mu", type=str, required=True)
    p.add_argument("--nu", type=str, required=True)
    p.add_argument("--paths", type=str, required=True, help="Path ensemble CSV")
    p.add_argument("--functional", choices=["total-mass", "p-power"], default="total-mass")
    p.add_argument("--p", type=float, default=2.0, help="Exponent for p-power")
    p.add_argument("--tolerance", type=float, default=0.02, help="Relative harness tolerance")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out-dir", type=str, default=".")
    p.set_defaults(handler=cmd_verify)

    p = sub.add_parser("beckmann", help="Minimal-flow and transport solvers")
    p.add_argument("mode", choices=["graph", "euclidean", "kantorovich", "crosscheck"])
    p.add_argument("--mu", type=str, help="Source density file")
    p.add_argument("--nu", type=str, help="Target density file")
    p.add_argument("--sources", type=str, help="Source atoms CSV (x, y, mass)")
    p.add_argument("--targets", type=str, help="Target atoms CSV (x, y, mass)")
    p.add_argument("--n", type=int, default=16, help="Grid cells per side when binning atoms")
    p.add_argument("--cost", choices=["l1", "euclidean", "graph"], default="l1")
    p.add_argument("--iters", type=int, default=20000, help="Primal-dual iterations")
    p.add_argument("--out-dir", type=str, default=".")
    p.set_defaults(handler=cmd_beckmann)

    p = sub.add_parser("render", help="PPM heatmap of a field file")
    p.add_argument("field", type=str)
    p.add_argument("image", type=str)
    p.add_argument("--html", action="store_true", help="Also write a plotly heatmap next to the image")
    p.set_defaults(handler=cmd_render)
    return parser


def configure_logging(verbose: bool):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(asctime)s - %(levelname)s - %(name)s - %(message)s",
        stream=sys.stderr,
    )


def main(argv: list[str] | None = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    ledger = None
    code = EXIT_OK
    try:
        ledger = RunLedger(args.db or os.getenv("MINFLOW_DB"), args.command, args)
        code = args.handler(args, ledger)
    except (InvalidInputError, InfeasibleError) as e:
        print(f"error: {e}", file=sys.stderr)
        code = EXIT_INPUT
    except SolverFailureError as e:
        print(f"solver failure: {e}", file=sys.stderr)
        code = EXIT_SOLVER
    except MinflowError as e:
        print(f"error: {e}", file=sys.stderr)
        code = EXIT_INPUT
    finally:
        if ledger is not None:
            ledger.close(code)
    return code


if __name__ == "__main__":
    sys.exit(main())
