"""Tests for drop-profile charts."""

import pytest

from srprune.charts import (
    BAR_COLOR,
    BELOW_THRESHOLD_COLOR,
    bar_colors,
    plot_estimation_accuracy,
    plot_profile,
)
from srprune.errors import ArgumentError
from srprune.schema import DropProfile, UnitDrop
from srprune.srinit import read_profile_csv


@pytest.fixture
def profile():
    """Three units, the middle one without an identity shortcut."""
    base = 0.8
    drops = [(1, True, 0.01), (2, False, 0.3), (3, True, 0.05)]
    return DropProfile(
        base_accuracy=base,
        drops=tuple(UnitDrop(u, 1, ok, base - d, d) for u, ok, d in drops),
        dataset_id="synthetic:val:50",
        sample_count=50,
        seeds=(0,),
    )


def test_bar_colors(profile):
    """Bars strictly below t_err are light; no threshold means uniform bars."""
    assert bar_colors(profile, 0.05) == [BELOW_THRESHOLD_COLOR, BAR_COLOR, BAR_COLOR]
    assert bar_colors(profile, None) == [BAR_COLOR] * 3


def test_plot_profile_writes_image_and_csv(profile, tmp_path):
    """The chart comes with a CSV of the plotted records."""
    out = plot_profile(profile, 0.02, tmp_path / "figures" / "profile.png")
    assert out.exists()
    assert tuple(read_profile_csv(out.with_suffix(".csv"))) == profile.drops


def test_plot_profile_svg(profile, tmp_path):
    """The format follows the suffix."""
    out = plot_profile(profile, None, tmp_path / "profile.svg")
    assert out.read_text().lstrip().startswith("<?xml")


def test_plot_estimation_accuracy(profile, tmp_path):
    """Estimation accuracies are drawn against the base accuracy."""
    assert plot_estimation_accuracy(profile, tmp_path / "est.png").exists()


def test_empty_profile(tmp_path):
    """An empty profile cannot be drawn."""
    empty = DropProfile(0.5, (), "d", 1, (0,))
    with pytest.raises(ArgumentError):
        plot_profile(empty, 0.1, tmp_path / "empty.png")
