"""End-to-end pipeline runs on a tiny synthetic problem."""

import pytest
import yaml
from sqlmodel import Session, select

from srprune.config import parse_config
from srprune.db import Report, Run, UnitDrop
from srprune.errors import DependencyError
from srprune.netcore import load_checkpoint
from srprune.pipeline import ARTIFACTS, Pipeline
from srprune.srinit import read_decision, read_profile


def tiny_config(output_dir, **srinit):
    """Four-unit tiny-resnet on separable 3x8x8 synthetic images."""
    raw = {
        "arch": {
            "family": "tiny-resnet",
            "block_kind": "basic",
            "num_classes": 3,
            "input_shape": [3, 8, 8],
            "stages": [[2, 4, False], [2, 8, True]],
        },
        "output_dir": str(output_dir),
        "dataset": {
            "name": "synthetic",
            "val_fraction": 0.3,
            "test_limit": 30,
            "synthetic": {
                "m": 90,
                "classes": 3,
                "input_shape": [3, 8, 8],
                "noise": 0.3,
            },
        },
        "srinit": {"t_err": "suggest", "seeds": [0], **srinit},
        "train": {"epochs": 2, "batch_size": 16, "lr": 0.05, "augment": False},
        "finetune": {"epochs": 1, "batch_size": 16, "augment": False},
        "interpret": {"samples": 2, "top_fraction": 0.25},
    }
    return parse_config(raw)


def test_missing_upstream_artifact(tmp_path):
    """Scoring before training names the missing file and its producer."""
    pipeline = Pipeline(tiny_config(tmp_path), ledger=False)
    with pytest.raises(DependencyError) as excinfo:
        pipeline.run("score")
    assert excinfo.value.produced_by == "train"
    assert excinfo.value.exit_code == 9
    assert str(excinfo.value.path).endswith("baseline.pt")


def test_full_run_writes_every_artifact(tmp_path, ledger):
    """`all` produces every artifact and records the run in the ledger."""
    config = tiny_config(tmp_path)
    pipeline = Pipeline(config)
    pipeline.run("all")

    run_dir = config.run_dir
    for name in ARTIFACTS.values():
        assert (run_dir / name).exists(), name
    assert (run_dir / "figures" / "profile.png").exists()
    assert (run_dir / "figures" / "interpret_0.png").exists()
    assert (run_dir / "figures" / "cam_1_high_drop.csv").exists()

    decision = read_decision(run_dir / "decision.yaml")
    profile = read_profile(run_dir / "profile.yaml")
    assert decision.threshold_source == "suggest"
    assert decision.threshold == decision.suggested_threshold
    assert decision.skipped_incompatible == {3}
    assert decision.profile_ref == profile.profile_id

    tuned = load_checkpoint(run_dir / "finetuned.pt")
    assert tuned.unit_ids == [u for u in (1, 2, 3, 4) if u not in decision.selected]

    report = yaml.safe_load((run_dir / "report.yaml").read_text())
    assert report["pruned_units"] == sorted(decision.selected)
    assert report["params"]["pruned"] <= report["params"]["baseline"]
    assert report["config_hash"] == config.config_hash

    interpret = yaml.safe_load((run_dir / "interpret.yaml").read_text())
    assert len(interpret["samples"]) == 2
    assert interpret["top_fraction"] == 0.25

    with Session(ledger) as session:
        run = session.exec(select(Run)).one()
        assert run.run_key == run_dir.name
        assert run.t_err == decision.threshold
        drops = session.exec(select(UnitDrop)).all()
        assert sorted(d.unit_id for d in drops) == [1, 2, 3, 4]
        assert {d.unit_id for d in drops if d.selected} == set(decision.selected)
        assert session.exec(select(Report)).one().run_key == run_dir.name


def test_runs_are_reproducible(tmp_path):
    """Same configuration and seed give identical profiles and decisions."""
    first = tiny_config(tmp_path / "a", units_parallel=1)
    second = tiny_config(tmp_path / "b", units_parallel=2)
    for config in (first, second):
        pipeline = Pipeline(config, ledger=False)
        for step in ("train", "score", "prune"):
            pipeline.run(step)
    assert first.run_dir.name == second.run_dir.name
    for artifact in ("profile.csv", "decision.yaml"):
        a = (first.run_dir / artifact).read_text()
        b = (second.run_dir / artifact).read_text()
        assert a == b, artifact


def test_explicit_threshold_is_recorded(tmp_path):
    """An explicit t_err is applied as given, with the suggestion alongside."""
    config = tiny_config(tmp_path, t_err=2.0)
    pipeline = Pipeline(config, ledger=False)
    for step in ("train", "score", "prune"):
        pipeline.run(step)
    decision = read_decision(config.run_dir / "decision.yaml")
    assert decision.threshold == 2.0
    assert decision.threshold_source == "explicit"
    assert decision.suggested_threshold is not None
    assert decision.selected == {1, 2, 4}
    assert load_checkpoint(config.run_dir / "pruned.pt").unit_ids == [3]


def test_new_threshold_reuses_baseline_and_profile(tmp_path):
    """Pruning again at another t_err keeps the run directory and its scores."""
    first = tiny_config(tmp_path, t_err=2.0)
    pipeline = Pipeline(first, ledger=False)
    for step in ("train", "score", "prune"):
        pipeline.run(step)
    baseline = (first.run_dir / "baseline.pt").read_bytes()
    profile = (first.run_dir / "profile.yaml").read_text()

    second = tiny_config(tmp_path, t_err=-2.0)
    assert second.run_dir == first.run_dir
    Pipeline(second, ledger=False).run("prune")
    decision = read_decision(second.run_dir / "decision.yaml")
    assert decision.threshold == -2.0
    assert decision.selected == set()
    assert load_checkpoint(second.run_dir / "pruned.pt").unit_ids == [1, 2, 3, 4]
    assert (second.run_dir / "baseline.pt").read_bytes() == baseline
    assert (second.run_dir / "profile.yaml").read_text() == profile
