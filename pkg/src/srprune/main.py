"""Command-line entry point for srprune."""

import logging
import sys
from pathlib import Path
from typing import Any

import click
import yaml

from srprune.config import SUGGEST, load_config
from srprune.errors import SRPruneError
from srprune.pipeline import STEPS, Pipeline
from srprune.registry import available, spec_for
from srprune.srinit import read_profile, suggest_threshold

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def parse_t_err(
    _ctx: click.Context,
    _param: click.Parameter,
    value: str | None,
) -> float | str | None:
    """Parse the ``--t-err`` option: a number or the literal ``suggest``.

    Raises:
        click.BadParameter: If the value is neither

    """
    if value is None or value == SUGGEST:
        return value
    try:
        return float(value)
    except ValueError as e:
        msg = f"expected a number or {SUGGEST!r}, got {value!r}"
        raise click.BadParameter(msg) from e


def configure_logging(verbose: bool) -> None:  # noqa: FBT001
    """Route library logs to stderr."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        stream=sys.stderr,
        force=True,
    )


def fail(error: Exception) -> None:
    """Echo ``error`` to stderr and exit with its class's code."""
    click.echo(f"Error: {error}", err=True)
    sys.exit(getattr(error, "exit_code", 1))


@click.group()
@click.version_option(package_name="srprune")
def cli() -> None:
    """Layer pruning of residual networks by stochastic re-initialization."""


def _run_step(step: str, options: dict[str, Any]) -> None:
    configure_logging(options["verbose"])
    overrides = {
        "seed": options["seed"],
        "t_err": options["t_err"],
        "output_dir": options["output"],
        "units_parallel": options["units_parallel"],
    }
    try:
        config = load_config(options["config"], overrides)
        pipeline = Pipeline(
            config,
            progress=not options["quiet"],
            ledger=options["ledger"],
        )
        pipeline.run(step)
        click.echo(str(pipeline.run_dir))
    except SRPruneError as e:
        fail(e)


def _pipeline_command(step: str, help_text: str) -> click.Command:
    @click.option(
        "--config",
        "config",
        type=click.Path(dir_okay=False, path_type=Path),
        required=True,
        help="Pipeline configuration file (YAML)",
    )
    @click.option("--seed", type=int, default=None, help="Override the config seed")
    @click.option(
        "--t-err",
        "t_err",
        default=None,
        callback=parse_t_err,
        help="Threshold override, or 'suggest'",
    )
    @click.option(
        "--output",
        type=click.Path(file_okay=False, path_type=Path),
        default=None,
        help="Override the output directory",
    )
    @click.option(
        "--units-parallel",
        type=int,
        default=None,
        help="Units scored concurrently",
    )
    @click.option(
        "--ledger/--no-ledger",
        default=True,
        help="Record results in the run ledger",
    )
    @click.option("--quiet", is_flag=True, help="Hide progress bars")
    @click.option("--verbose", "-v", is_flag=True, help="Debug logging")
    def command(**options: Any) -> None:  # noqa: ANN401
        _run_step(step, options)

    command.__doc__ = help_text
    return cli.command(name=step)(command)


_HELP = {
    "train": "Train (or import) the baseline model.",
    "score": "Score every unit of the baseline by its re-initialization drop.",
    "prune": "Select units under t_err and remove them.",
    "finetune": "Fine-tune the pruned model.",
    "report": "Compare baseline and pruned model (params, FLOPs, accuracy).",
    "interpret": "Grad-CAM / guided-backprop panels of the extreme-drop variants.",
    "all": "Run every step in order.",
}

for _step in (*STEPS, "all"):
    _pipeline_command(_step, _HELP[_step])


@cli.command(name="suggest")
@click.argument("profile", type=click.Path(exists=True, dir_okay=False, path_type=Path))
def suggest_cmd(profile: Path) -> None:
    """Print the advisory threshold for a saved profile."""
    try:
        click.echo(f"{suggest_threshold(read_profile(profile)):.6f}")
    except SRPruneError as e:
        fail(e)


@cli.command(name="archs")
@click.option("--show", default=None, help="Print the spec of one architecture")
def archs_cmd(show: str | None) -> None:
    """List registered architectures."""
    try:
        if show is None:
            for name in available():
                click.echo(name)
        else:
            click.echo(yaml.safe_dump(spec_for(show).to_dict(), sort_keys=False))
    except SRPruneError as e:
        fail(e)


if __name__ == "__main__":
    cli()
