import json

import numpy as np
import pytest

import minflow
from beckmann import AtomicMeasure, write_atoms
from db import Artifact, Metric, Run, get_engine, get_session
from errors import SolverFailureError
from field_core import Grid2D, ScalarField, read_scalar, read_vector, write_scalar


@pytest.fixture(autouse=True)
def clean_env(monkeypatch, tmp_path):
    monkeypatch.delenv("MINFLOW_DB", raising=False)
    monkeypatch.delenv("MINFLOW_THREADS", raising=False)
    monkeypatch.chdir(tmp_path)


@pytest.fixture
def profile_dir(tmp_path):
    out = tmp_path / "profile"
    assert minflow.main(["scenario", "profile1d", "--n", "8", "--out-dir", str(out)]) == 0
    return out


def decompose_args(data, out, *extra):
    return [
        "decompose",
        "--velocity", str(data / "velocity.csv"),
        "--mu", str(data / "mu.csv"),
        "--nu", str(data / "nu.csv"),
        "--particles", "2000",
        "--steps", "8",
        "--out-dir", str(out),
        *extra,
    ]


def test_scenario_files(profile_dir):
    v = read_vector(profile_dir / "velocity.csv")
    mu = read_scalar(profile_dir / "mu.csv")
    assert v.grid == mu.grid == Grid2D(8, 8)


def test_decompose_writes_reports(profile_dir, tmp_path):
    out = tmp_path / "run"
    assert minflow.main(decompose_args(profile_dir, out)) == 0
    report = json.loads((out / "report.json").read_text())
    assert set(report) >= {"norm_v", "norm_vQ", "intensity_mass", "defect"}
    reg = json.loads((out / "regularization.json").read_text())
    assert reg["floor"] > 0
    assert not (out / "paths.csv").exists()


def test_decompose_is_deterministic(profile_dir, tmp_path):
    assert minflow.main(decompose_args(profile_dir, tmp_path / "a", "--threads", "1")) == 0
    assert minflow.main(decompose_args(profile_dir, tmp_path / "b", "--threads", "1")) == 0
    assert minflow.main(decompose_args(profile_dir, tmp_path / "c", "--threads", "2")) == 0
    first = (tmp_path / "a" / "report.json").read_bytes()
    assert (tmp_path / "b" / "report.json").read_bytes() == first
    assert (tmp_path / "c" / "report.json").read_bytes() == first


def test_decompose_then_verify(profile_dir, tmp_path):
    out = tmp_path / "run"
    args = decompose_args(profile_dir, out, "--save-paths", "--save-fields")
    assert minflow.main(args) == 0
    for name in ("paths.csv", "intensity.csv", "flow.csv", "velocity_eps.csv"):
        assert (out / name).exists()
    code = minflow.main([
        "verify",
        "--velocity", str(out / "velocity_eps.csv"),
        "--mu", str(out / "mu_eps.csv"),
        "--nu", str(out / "nu_eps.csv"),
        "--paths", str(out / "paths.csv"),
        "--out-dir", str(out),
    ])
    assert code == 0
    payload = json.loads((out / "verify.json").read_text())
    assert set(payload) == {"decomposition", "harness"}
    decompose_report = json.loads((out / "report.json").read_text())
    assert payload["decomposition"]["norm_v"] == pytest.approx(decompose_report["norm_v"])


@pytest.mark.parametrize("name", ["atom-pair", "cycle-free"])
def test_decompose_concentrated_scenarios(name, tmp_path):
    data = tmp_path / name
    assert minflow.main(["scenario", name, "--n", "32", "--out-dir", str(data)]) == 0
    out = tmp_path / "run"
    assert minflow.main(decompose_args(data, out)) == 0
    reg = json.loads((out / "regularization.json").read_text())
    assert reg["floor_mass"] > 0
    assert reg["floor"] > 1e-4


def test_missing_input_file(tmp_path):
    code = minflow.main(decompose_args(tmp_path / "nowhere", tmp_path / "out"))
    assert code == 2


def test_mass_imbalance(profile_dir, tmp_path, capsys):
    mu = read_scalar(profile_dir / "mu.csv")
    write_scalar(2.0 * mu, profile_dir / "mu.csv")
    assert minflow.main(decompose_args(profile_dir, tmp_path / "out")) == 2
    assert "probability density" in capsys.readouterr().err


def test_bad_thread_setting(profile_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("MINFLOW_THREADS", "many")
    assert minflow.main(decompose_args(profile_dir, tmp_path / "out")) == 2


def test_beckmann_crosscheck(tmp_path):
    rng = np.random.default_rng(5)
    write_atoms(AtomicMeasure(rng.random((4, 2)), np.full(4, 0.25)), tmp_path / "s.csv")
    write_atoms(AtomicMeasure(rng.random((4, 2)), np.full(4, 0.25)), tmp_path / "t.csv")
    code = minflow.main([
        "beckmann", "crosscheck",
        "--sources", str(tmp_path / "s.csv"),
        "--targets", str(tmp_path / "t.csv"),
        "--n", "8",
        "--out-dir", str(tmp_path),
    ])
    assert code == 0
    payload = json.loads((tmp_path / "beckmann.json").read_text())
    assert payload["cost"] == "l1"
    assert payload["gap"] <= 1e-9


def test_beckmann_graph_from_densities(tmp_path):
    grid = Grid2D(8, 8)
    mu = np.zeros((8, 8))
    nu = np.zeros((8, 8))
    mu[2, 1] = nu[2, 5] = 1.0 / grid.cell_area
    write_scalar(ScalarField(grid, mu), tmp_path / "mu.csv")
    write_scalar(ScalarField(grid, nu), tmp_path / "nu.csv")
    code = minflow.main([
        "beckmann", "graph",
        "--mu", str(tmp_path / "mu.csv"),
        "--nu", str(tmp_path / "nu.csv"),
        "--out-dir", str(tmp_path),
    ])
    assert code == 0
    payload = json.loads((tmp_path / "beckmann.json").read_text())
    assert payload["graph"]["value"] == pytest.approx(4 * grid.h)
    assert (tmp_path / "beckmann_flow.csv").exists()


def test_beckmann_empty_atoms(tmp_path):
    (tmp_path / "s.csv").write_text("# atoms count=0\n")
    write_atoms(AtomicMeasure([[0.5, 0.5]], [1.0]), tmp_path / "t.csv")
    code = minflow.main([
        "beckmann", "kantorovich",
        "--sources", str(tmp_path / "s.csv"),
        "--targets", str(tmp_path / "t.csv"),
        "--out-dir", str(tmp_path),
    ])
    assert code == 2


def test_solver_failure_exit_code(tmp_path, monkeypatch):
    def fail(mu, nu):
        raise SolverFailureError("no convergence")

    monkeypatch.setattr(minflow, "solve_beckmann_graph", fail)
    write_atoms(AtomicMeasure([[0.2, 0.2]], [1.0]), tmp_path / "s.csv")
    write_atoms(AtomicMeasure([[0.8, 0.8]], [1.0]), tmp_path / "t.csv")
    code = minflow.main([
        "beckmann", "graph",
        "--sources", str(tmp_path / "s.csv"),
        "--targets", str(tmp_path / "t.csv"),
        "--out-dir", str(tmp_path),
    ])
    assert code == 3


def test_render(profile_dir, tmp_path):
    image = tmp_path / "mu.ppm"
    assert minflow.main(["render", str(profile_dir / "mu.csv"), str(image), "--html"]) == 0
    assert image.read_bytes().startswith(b"P6\n")
    assert image.with_suffix(".html").exists()
    assert minflow.main(["render", str(profile_dir / "velocity.csv"), str(tmp_path / "v.ppm")]) == 0


def test_render_bad_file(tmp_path):
    (tmp_path / "junk.csv").write_text("not a field\n")
    assert minflow.main(["render", str(tmp_path / "junk.csv"), str(tmp_path / "x.ppm")]) == 2


def test_unknown_scenario():
    with pytest.raises(SystemExit):
        minflow.main(["scenario", "tornado"])


def test_run_ledger(profile_dir, tmp_path):
    db = tmp_path / "ledger.db"
    out = tmp_path / "run"
    assert minflow.main(["--db", str(db), *decompose_args(profile_dir, out, "--seed", "9")]) == 0
    session = get_session(get_engine(str(db)))
    runs = session.query(Run).all()
    assert len(runs) == 1
    assert runs[0].command == "decompose"
    assert runs[0].exit_code == 0
    assert runs[0].seed == 9
    paths = {a.path for a in session.query(Artifact).all()}
    assert str(out / "report.json") in paths
    names = {m.name for m in session.query(Metric).all()}
    assert "defect" in names and "reg_floor" in names
    session.close()


def test_failed_run_is_recorded(tmp_path):
    db = tmp_path / "ledger.db"
    assert minflow.main(["--db", str(db), *decompose_args(tmp_path / "nowhere", tmp_path / "o")]) == 2
    session = get_session(get_engine(str(db)))
    assert session.query(Run).one().exit_code == 2
    session.close()
