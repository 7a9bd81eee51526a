"""Streamlit dashboard for browsing recorded pruning runs.

Lists runs from the srprune ledger, draws a run's drop profile with its
threshold, and shows the report row when one exists.
"""

import json

import streamlit as st
from sqlalchemy.engine import Engine
from sqlmodel import Session, SQLModel, create_engine, select

from srprune.db import Report, Run, UnitDrop, get_db_path

# Configure page
st.set_page_config(
    page_title="srprune runs",
    page_icon="✂️",
    layout="wide",
    initial_sidebar_state="expanded",
)


def create_db_engine() -> Engine:
    """Create SQLite engine with connection to the ledger."""
    db_path = get_db_path()
    if db_path == ":memory:":
        # In-memory database for testing
        engine = create_engine("sqlite:///:memory:", echo=False)
        SQLModel.metadata.create_all(engine)
    else:
        engine = create_engine(f"sqlite:///{db_path}", echo=False)
    return engine


def get_runs(engine: Engine, limit: int = 50) -> list[Run]:
    """Most recently updated runs."""
    with Session(engine) as session:
        statement = select(Run).order_by(Run.ts.desc()).limit(limit)
        return session.exec(statement).all()


def get_unit_drops(engine: Engine, run_key: str) -> list[UnitDrop]:
    """Unit rows of one run in unit order."""
    with Session(engine) as session:
        statement = (
            select(UnitDrop)
            .where(UnitDrop.run_key == run_key)
            .order_by(UnitDrop.unit_id)
        )
        return session.exec(statement).all()


def get_report(engine: Engine, run_key: str) -> Report | None:
    """Report row of one run, if the report step has run."""
    with Session(engine) as session:
        statement = select(Report).where(Report.run_key == run_key)
        return session.exec(statement).first()


def format_percent(fraction: float) -> str:
    """Format a fraction as a percentage with 2 decimal places."""
    return f"{fraction * 100:.2f}%"


def main() -> None:
    """Run the Streamlit dashboard application."""
    st.title("srprune runs")
    st.subheader("Layer redundancy profiles and pruning results")

    try:
        engine = create_db_engine()
        runs = get_runs(engine)
        if not runs:
            st.info("No runs recorded yet. Run `srprune score` to populate the ledger.")
            return

        st.header("Runs")
        st.dataframe(
            [
                {
                    "Run": run.run_key,
                    "Arch": run.arch,
                    "Dataset": run.dataset,
                    "Base accuracy": format_percent(run.base_accuracy),
                    "t_err": "-" if run.t_err is None else format_percent(run.t_err),
                    "Updated": run.ts.strftime("%Y-%m-%d %H:%M:%S"),
                }
                for run in runs
            ],
            use_container_width=True,
            hide_index=True,
        )

        selected = st.selectbox("Select run", [run.run_key for run in runs])
        run = next(r for r in runs if r.run_key == selected)

        st.header("Drop profile")
        drops = get_unit_drops(engine, selected)
        if drops:
            st.bar_chart(
                {
                    "unit": [d.unit_id for d in drops],
                    "drop_pct": [d.drop * 100 for d in drops],
                },
                x="unit",
                y="drop_pct",
                height=400,
            )
            if run.t_err is not None:
                st.caption(f"t_err = {format_percent(run.t_err)}")
            selected_units = [d.unit_id for d in drops if d.selected]
            st.metric("Units pruned", len(selected_units), delta=str(selected_units))
        else:
            st.info(f"No unit drops recorded for {selected}")

        st.header("Report")
        report = get_report(engine, selected)
        if report is None:
            st.info("The report step has not run for this run yet.")
        else:
            cols = st.columns(3)
            cols[0].metric(
                "Top-1",
                format_percent(report.pruned_acc),
                delta=f"{(report.pruned_acc - report.baseline_acc) * 100:+.2f} pts",
            )
            cols[1].metric("Params PR", f"{report.params_pr:.2f}%")
            cols[2].metric("FLOPs PR", f"{report.flops_pr:.2f}%")
            st.caption(f"Pruned units: {json.loads(report.pruned_units)}")

    except (ConnectionError, OSError) as e:
        st.error(f"Error connecting to database: {e}")
        st.info("Make sure the ledger exists (see SRPRUNE_DB_PATH).")


if __name__ == "__main__":
    main()
