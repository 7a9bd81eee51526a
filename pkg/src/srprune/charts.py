"""Drop-profile charts."""

from pathlib import Path

import matplotlib as mpl

mpl.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from srprune.errors import ArgumentError  # noqa: E402
from srprune.schema import DropProfile  # noqa: E402
from srprune.srinit import write_profile_csv  # noqa: E402

BAR_COLOR = "#1f4e79"
BELOW_THRESHOLD_COLOR = "#9ecae1"
INELIGIBLE_HATCH = "//"
THRESHOLD_COLOR = "tab:orange"
BASELINE_COLOR = "black"

ERR_EMPTY_PROFILE = "cannot plot an empty profile"


def _save(fig: plt.Figure, out_path: str | Path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def bar_colors(profile: DropProfile, t_err: float | None) -> list[str]:
    """Bar color per unit: light when the drop is below ``t_err``."""
    return [
        BELOW_THRESHOLD_COLOR if t_err is not None and d.drop < t_err else BAR_COLOR
        for d in profile.drops
    ]


def plot_profile(
    profile: DropProfile,
    t_err: float | None,
    out_path: str | Path,
) -> Path:
    """Bar chart of the accuracy drop of every unit, in unit order.

    Bars below ``t_err`` are drawn light, units without an identity shortcut
    are hatched, ``t_err`` is a horizontal line and the base accuracy a dotted
    one. A CSV with the plotted records is written next to the image.

    Args:
        profile: Drop profile to draw
        t_err: Threshold, or None to draw none
        out_path: Image path (format from the suffix, e.g. ``.png`` or ``.svg``)

    Returns:
        The image path

    Raises:
        ArgumentError: If the profile has no units

    """
    if not profile.drops:
        raise ArgumentError(ERR_EMPTY_PROFILE)
    labels = [str(d.unit_id) for d in profile.drops]
    drops = [100 * d.drop for d in profile.drops]
    fig, ax = plt.subplots(figsize=(max(6.0, 0.3 * len(labels)), 4))
    bars = ax.bar(labels, drops, color=bar_colors(profile, t_err))
    for bar, entry in zip(bars, profile.drops, strict=True):
        if not entry.eligible:
            bar.set_hatch(INELIGIBLE_HATCH)
    if t_err is not None:
        ax.axhline(
            100 * t_err,
            color=THRESHOLD_COLOR,
            label=f"t_err = {100 * t_err:.2f}%",
        )
    ax.axhline(
        100 * profile.base_accuracy,
        color=BASELINE_COLOR,
        linestyle=":",
        label=f"base accuracy = {100 * profile.base_accuracy:.2f}%",
    )
    ax.set_xlabel("unit")
    ax.set_ylabel("accuracy drop (%)")
    ax.legend(loc="upper right", fontsize=8)
    out_path = Path(out_path)
    write_profile_csv(profile, out_path.with_suffix(".csv"))
    return _save(fig, out_path)


def plot_estimation_accuracy(profile: DropProfile, out_path: str | Path) -> Path:
    """Bar chart of each estimation model's accuracy against the base accuracy."""
    if not profile.drops:
        raise ArgumentError(ERR_EMPTY_PROFILE)
    labels = [str(d.unit_id) for d in profile.drops]
    fig, ax = plt.subplots(figsize=(max(6.0, 0.3 * len(labels)), 4))
    ax.bar(labels, [100 * d.est_accuracy for d in profile.drops], color=BAR_COLOR)
    ax.axhline(
        100 * profile.base_accuracy,
        color=BASELINE_COLOR,
        linestyle=":",
        label="base accuracy",
    )
    ax.set_ylim(0, 100)
    ax.set_xlabel("re-initialized unit")
    ax.set_ylabel("top-1 accuracy (%)")
    ax.legend(loc="lower right", fontsize=8)
    return _save(fig, out_path)
