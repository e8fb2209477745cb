from db import Artifact, Metric, Run, finish_run, get_engine, get_session, init_db, record_metrics, start_run, upsert_artifact


def make_session(tmp_path):
    engine = init_db(get_engine(str(tmp_path / "ledger.db")))
    return get_session(engine)


def test_run_lifecycle(tmp_path):
    session = make_session(tmp_path)
    start_run(session, "k1", "beckmann", {"mode": "graph", "n": 16})
    finish_run(session, "k1", 0)
    session.commit()
    run = session.query(Run).one()
    assert run.exit_code == 0
    assert run.finished_at is not None
    assert '"mode": "graph"' in run.args_json
    session.close()


def test_artifact_upsert_keeps_one_row(tmp_path):
    session = make_session(tmp_path)
    start_run(session, "k2", "render", {})
    upsert_artifact(session, "k2", "out/f.ppm", "image", 10)
    upsert_artifact(session, "k2", "out/f.ppm", "image", 20)
    session.commit()
    rows = session.query(Artifact).all()
    assert len(rows) == 1
    assert rows[0].size_bytes == 20
    session.close()


def test_metrics_skip_non_numbers(tmp_path):
    session = make_session(tmp_path)
    start_run(session, "k3", "verify", {})
    record_metrics(session, "k3", {"defect": 0.5, "converged": True, "mode": "graph", "iterations": 3})
    session.commit()
    names = sorted(m.name for m in session.query(Metric).all())
    assert names == ["defect", "iterations"]
    session.close()
