"""Run ledger: scored profiles, pruning decisions and reports in SQLite."""

import json
import os
from collections.abc import Iterable
from datetime import datetime, timezone
from pathlib import Path

from sqlalchemy import delete
from sqlmodel import Field, Session, SQLModel, create_engine, select

from srprune.schema import DropProfile, PruneReport

UTC = timezone.utc  # alias of datetime.UTC (3.11+)

DB_PATH_ENV = "SRPRUNE_DB_PATH"
DEFAULT_DB_PATH = "data/srprune.db"


class Run(SQLModel, table=True):
    """One pipeline run (config hash + seed)."""

    id: int | None = Field(default=None, primary_key=True)
    run_key: str = Field(index=True, unique=True)
    arch: str
    dataset: str
    seed: int
    base_accuracy: float
    t_err: float | None = None
    ts: datetime


class UnitDrop(SQLModel, table=True):
    """Accuracy drop of one unit in a run."""

    id: int | None = Field(default=None, primary_key=True)
    run_key: str = Field(index=True)
    unit_id: int
    stage_id: int
    eligible: bool
    est_accuracy: float
    drop: float
    selected: bool = False


class Report(SQLModel, table=True):
    """Baseline versus pruned comparison of a run."""

    id: int | None = Field(default=None, primary_key=True)
    run_key: str = Field(index=True, unique=True)
    baseline_acc: float
    pruned_acc: float
    params: int
    pruned_params: int
    flops: int
    pruned_flops: int
    params_pr: float
    flops_pr: float
    threshold: float
    pruned_units: str  # JSON list
    ts: datetime


def get_db_path() -> str:
    """Database path with override support."""
    return os.environ.get(DB_PATH_ENV, DEFAULT_DB_PATH)


def _make_engine():  # noqa: ANN202
    db_path = get_db_path()
    if db_path == ":memory:":
        return create_engine("sqlite:///:memory:", echo=False)
    Path(db_path).parent.mkdir(parents=True, exist_ok=True)
    return create_engine(f"sqlite:///{db_path}", echo=False)


engine = _make_engine()


def init_db() -> None:
    """Initialize the database schema."""
    SQLModel.metadata.create_all(engine)


def save_run(  # noqa: PLR0913
    run_key: str,
    arch: str,
    dataset: str,
    seed: int,
    base_accuracy: float,
    t_err: float | None = None,
) -> None:
    """Insert or update the run row.

    Args:
        run_key: Run directory name (``<config_hash>-s<seed>``)
        arch: Architecture name
        dataset: Identifier of the scoring dataset
        seed: Pipeline seed
        base_accuracy: Accuracy of the baseline on the scoring dataset
        t_err: Applied threshold, once pruning has run

    """
    with Session(engine) as session:
        run = session.exec(select(Run).where(Run.run_key == run_key)).first()
        if run is None:
            run = Run(
                run_key=run_key,
                arch=arch,
                dataset=dataset,
                seed=seed,
                base_accuracy=base_accuracy,
                ts=datetime.now(tz=UTC),
            )
        run.base_accuracy = base_accuracy
        if t_err is not None:
            run.t_err = t_err
        run.ts = datetime.now(tz=UTC)
        session.add(run)
        session.commit()


def save_unit_drops(
    run_key: str,
    profile: DropProfile,
    selected: Iterable[int] = (),
) -> None:
    """Replace the unit rows of a run with ``profile``'s records."""
    selected = set(selected)
    with Session(engine) as session:
        session.execute(delete(UnitDrop).where(UnitDrop.run_key == run_key))
        for entry in profile.drops:
            session.add(
                UnitDrop(
                    run_key=run_key,
                    unit_id=entry.unit_id,
                    stage_id=entry.stage_id,
                    eligible=entry.eligible,
                    est_accuracy=entry.est_accuracy,
                    drop=entry.drop,
                    selected=entry.unit_id in selected,
                ),
            )
        session.commit()


def save_report(run_key: str, report: PruneReport) -> None:
    """Insert or replace the report row of a run."""
    with Session(engine) as session:
        session.execute(delete(Report).where(Report.run_key == run_key))
        session.add(
            Report(
                run_key=run_key,
                baseline_acc=report.baseline.top1_accuracy,
                pruned_acc=report.pruned.top1_accuracy,
                params=report.baseline.params,
                pruned_params=report.pruned.params,
                flops=report.baseline.flops,
                pruned_flops=report.pruned.flops,
                params_pr=report.params_pr,
                flops_pr=report.flops_pr,
                threshold=report.decision.threshold,
                pruned_units=json.dumps(sorted(report.decision.selected)),
                ts=datetime.now(tz=UTC),
            ),
        )
        session.commit()
