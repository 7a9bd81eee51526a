"""Tests for the shared data model."""

import pytest

from srprune.errors import ArgumentError, ConfigError
from srprune.schema import (
    DepthDiagnostic,
    DropProfile,
    ModelStats,
    NetworkSpec,
    PruneDecision,
    PruneReport,
    StageSpec,
    UnitDrop,
    from_dict,
    from_json,
    to_dict,
    to_json,
)


def make_profile(base=0.9, drops=((1, 0.85), (2, 0.4)), eligible=(True, True)):
    """Profile with consistent drop values."""
    return DropProfile(
        base_accuracy=base,
        drops=tuple(
            UnitDrop(
                unit_id=uid,
                stage_id=1,
                eligible=ok,
                est_accuracy=est,
                drop=base - est,
            )
            for (uid, est), ok in zip(drops, eligible, strict=True)
        ),
        dataset_id="synthetic:val:100",
        sample_count=100,
        seeds=(0,),
    )


class TestNetworkSpec:
    """NetworkSpec validation and plain-data form."""

    def test_lists_are_coerced(self):
        """Stage lists and input shape lists become tuples."""
        spec = NetworkSpec(
            family="resnet-cifar",
            stages=[[9, 16, False], [9, 32, True]],
            block_kind="basic",
            num_classes=10,
            input_shape=[3, 32, 32],
        )
        assert spec.stages[1] == StageSpec(9, 32, downsample=True)
        assert spec.input_shape == (3, 32, 32)
        assert spec.unit_count == 18

    def test_round_trip(self):
        """to_dict/from_dict preserve the spec."""
        spec = NetworkSpec("tiny-resnet", ((3, 16, False),), "basic", 10, (3, 32, 32))
        assert NetworkSpec.from_dict(spec.to_dict()) == spec

    @pytest.mark.parametrize(
        ("field", "value"),
        [
            ("family", "vgg"),
            ("block_kind", "inverted"),
            ("num_classes", 1),
            ("input_shape", (3, 32)),
            ("stages", ()),
        ],
    )
    def test_invalid_values(self, field, value):
        """Invalid values raise ConfigError."""
        data = {
            "family": "tiny-resnet",
            "stages": ((1, 4, False),),
            "block_kind": "basic",
            "num_classes": 2,
            "input_shape": (3, 8, 8),
        }
        data[field] = value
        with pytest.raises(ConfigError):
            NetworkSpec(**data)

    def test_stage_needs_blocks(self):
        """A stage with zero blocks is rejected."""
        with pytest.raises(ConfigError, match="block_count"):
            StageSpec(0, 16)

    def test_from_dict_missing_key(self):
        """Missing keys become ConfigError."""
        with pytest.raises(ConfigError, match="Malformed"):
            NetworkSpec.from_dict({"family": "tiny-resnet"})


class TestDropProfile:
    """Bounds and the drop identity."""

    def test_properties(self):
        """Profile exposes ids, drops and trial count."""
        profile = make_profile()
        assert profile.unit_ids == (1, 2)
        assert profile.drop_of(2) == pytest.approx(0.5)
        assert profile.trials_per_unit == 1
        assert len(profile.profile_id) == 16

    def test_drop_must_match_accuracies(self):
        """A drop that is not base - est is rejected."""
        with pytest.raises(ArgumentError, match="drop"):
            DropProfile(
                base_accuracy=0.9,
                drops=(UnitDrop(1, 1, True, 0.8, 0.2),),  # noqa: FBT003
                dataset_id="d",
                sample_count=10,
                seeds=(0,),
            )

    def test_accuracy_out_of_range(self):
        """Accuracies outside [0, 1] are rejected."""
        with pytest.raises(ArgumentError):
            make_profile(base=1.2)

    def test_duplicate_units(self):
        """Unit ids are unique."""
        with pytest.raises(ArgumentError, match="Duplicate"):
            make_profile(drops=((1, 0.5), (1, 0.4)))

    def test_unknown_unit(self):
        """drop_of rejects ids outside the profile."""
        with pytest.raises(ArgumentError):
            make_profile().drop_of(7)

    def test_eligible_drops(self):
        """Only eligible units contribute."""
        profile = make_profile(eligible=(True, False))
        assert profile.eligible_drops() == [pytest.approx(0.05)]

    def test_profile_id_changes_with_content(self):
        """Different drops give a different id."""
        assert make_profile().profile_id != make_profile(base=0.95).profile_id


def test_decision_sets_must_be_disjoint():
    """A unit cannot be selected and skipped at once."""
    with pytest.raises(ArgumentError, match="disjoint"):
        PruneDecision(threshold=0.1, selected={1, 2}, skipped_incompatible={2})


def test_decision_coerces_sets():
    """Set fields become frozensets."""
    decision = PruneDecision(threshold=0.1, selected=[1], skipped_incompatible=[3])
    assert decision.selected == frozenset({1})
    assert decision.retained == frozenset()


def test_model_stats_rejects_negative_counts():
    """Negative counters are invalid."""
    with pytest.raises(ArgumentError):
        ModelStats(top1_accuracy=0.5, params=-1, flops=0, input_shape=(3, 8, 8))


def test_report_json_round_trip():
    """A full report survives JSON serialization."""
    profile = make_profile()
    report = PruneReport(
        baseline=ModelStats(0.9, 1000, 5000, (3, 32, 32)),
        pruned=ModelStats(0.88, 600, 3000, (3, 32, 32)),
        params_pr=40.0,
        flops_pr=40.0,
        accuracy_delta=-2.0,
        decision=PruneDecision(
            threshold=0.1,
            selected={1},
            skipped_incompatible=set(),
            retained={2},
            profile_ref=profile.profile_id,
            threshold_source="suggest",
            suggested_threshold=0.1,
        ),
        profile=profile,
        depth=DepthDiagnostic(stage_means={1: 0.2}, redundancy_at_end=None),
    )
    restored = from_json(to_json(report), PruneReport)
    assert restored == report


def test_decision_dict_round_trip():
    """Decisions serialize sets as sorted lists."""
    decision = PruneDecision(threshold=0.05, selected={4, 2}, skipped_incompatible={3})
    data = to_dict(decision)
    assert data["selected"] == [2, 4]
    assert from_dict(data, PruneDecision) == decision
