"""Launch the run ledger dashboard with Streamlit."""

import os
import sys
from pathlib import Path

import streamlit.web.cli as stcli

PORT_ENV = "SRPRUNE_DASHBOARD_PORT"
DEFAULT_PORT = "8501"


def streamlit_argv() -> list[str]:
    """Arguments serving `srprune.dashboard` headless, without usage statistics."""
    return [
        "streamlit",
        "run",
        str(Path(__file__).with_name("dashboard.py")),
        "--browser.gatherUsageStats",
        "false",
        "--server.headless",
        "true",
        "--server.port",
        os.environ.get(PORT_ENV, DEFAULT_PORT),
    ]


def main() -> None:
    """Run the dashboard script with Streamlit."""
    sys.argv = streamlit_argv()
    sys.exit(stcli.main())


if __name__ == "__main__":
    main()
