"""
Run ledger for minflow.

Three-table schema:
- runs: one row per CLI invocation
- artifacts: files a run wrote (one row per run and path)
- metrics: numeric report values recorded by a run
"""

import json
from datetime import datetime, timezone

from sqlalchemy import (
    create_engine,
    Column,
    Integer,
    String,
    Float,
    DateTime,
    ForeignKey,
    Index,
    Text,
    select,
)
from sqlalchemy.dialects.sqlite import insert as sqlite_upsert
from sqlalchemy.orm import declarative_base, relationship, sessionmaker

Base = declarative_base()

DEFAULT_DB = "minflow_runs.db"


def utcnow():
    """Get current UTC time (timezone-aware)."""
    return datetime.now(timezone.utc)


class Run(Base):
    """One invocation of a minflow command."""

    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_key = Column(String, unique=True, nullable=False, index=True)
    command = Column(String, nullable=False, index=True)  # decompose, beckmann, ...
    seed = Column(Integer, nullable=True)
    args_json = Column(Text, nullable=False, default="{}")
    exit_code = Column(Integer, nullable=True)  # null while running
    started_at = Column(DateTime, default=utcnow)
    finished_at = Column(DateTime, nullable=True)

    artifacts = relationship("Artifact", back_populates="run", cascade="all, delete-orphan")
    metrics = relationship("Metric", back_populates="run", cascade="all, delete-orphan")

    def __repr__(self):
        return f"<Run(run_key='{self.run_key}', command='{self.command}', exit={self.exit_code})>"


class Artifact(Base):
    """A file written by a run."""

    __tablename__ = "artifacts"

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_key = Column(String, ForeignKey("runs.run_key"), nullable=False, index=True)
    path = Column(String, nullable=False)
    kind = Column(String, nullable=True)  # report, paths, field, image
    size_bytes = Column(Integer, nullable=True)
    created_at = Column(DateTime, default=utcnow)

    run = relationship("Run", back_populates="artifacts")

    __table_args__ = (
        Index("ux_artifacts_run_path", "run_key", "path", unique=True),
    )

    def __repr__(self):
        return f"<Artifact(run_key='{self.run_key}', path='{self.path}')>"


class Metric(Base):
    """A named number from a run's report."""

    __tablename__ = "metrics"

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_key = Column(String, ForeignKey("runs.run_key"), nullable=False)
    name = Column(String, nullable=False)
    value = Column(Float, nullable=True)

    run = relationship("Run", back_populates="metrics")

    __table_args__ = (
        Index("ix_metrics_run_name", "run_key", "name"),
    )

    def __repr__(self):
        return f"<Metric(run_key='{self.run_key}', {self.name}={self.value})>"


# Database connection utilities
def get_engine(db_path: str = DEFAULT_DB):
    """Create SQLAlchemy engine for SQLite database"""
    return create_engine(f"sqlite:///{db_path}", echo=False)


def get_session(engine=None):
    """Create a new database session"""
    if engine is None:
        engine = get_engine()
    Session = sessionmaker(bind=engine)
    return Session()


def init_db(engine=None):
    """Create all tables in the database"""
    if engine is None:
        engine = get_engine()
    Base.metadata.create_all(engine)
    return engine


# Ledger writes
def start_run(session, run_key: str, command: str, args: dict, seed: int | None = None) -> Run:
    run = Run(
        run_key=run_key,
        command=command,
        seed=seed,
        args_json=json.dumps(args, sort_keys=True, default=str),
    )
    session.add(run)
    session.flush()
    return run


def finish_run(session, run_key: str, exit_code: int):
    run = session.execute(select(Run).where(Run.run_key == run_key)).scalar_one()
    run.exit_code = exit_code
    run.finished_at = utcnow()
    session.flush()


def upsert_artifact(session, run_key: str, path: str, kind: str | None = None, size_bytes: int | None = None):
    """Insert or refresh an artifact record; a rewritten file keeps one row."""
    stmt = sqlite_upsert(Artifact).values(
        run_key=run_key,
        path=path,
        kind=kind,
        size_bytes=size_bytes,
        created_at=utcnow(),
    )
    stmt = stmt.on_conflict_do_update(
        index_elements=["run_key", "path"],
        set_={
            "kind": stmt.excluded.kind,
            "size_bytes": stmt.excluded.size_bytes,
            "created_at": stmt.excluded.created_at,
        },
    )
    session.execute(stmt)
    session.flush()


def record_metrics(session, run_key: str, values: dict):
    """Store every numeric entry of a report dict."""
    for name in sorted(values):
        value = values[name]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            continue
        session.add(Metric(run_key=run_key, name=name, value=float(value)))
    session.flush()
