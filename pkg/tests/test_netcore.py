"""Tests for model construction, unit enumeration, surgery and checkpoints."""

import math

import pytest
import torch
from torch import nn

from srprune.errors import ArgumentError, CompatibilityError, ConfigError, FormatError
from srprune.netcore import (
    CHECKPOINT_VERSION,
    ResidualNet,
    build_model,
    checkpoint_io,
    enumerate_prunable_units,
    fan_in,
    from_torchvision,
    kaiming_reset_,
    load_checkpoint,
    remove_units,
    save_checkpoint,
)
from srprune.schema import NetworkSpec, StageSpec


def test_build_is_deterministic(tiny_spec):
    """Same spec and seed give bit-identical parameters."""
    a = build_model(tiny_spec, seed=5)
    b = build_model(tiny_spec, seed=5)
    c = build_model(tiny_spec, seed=6)
    pairs = zip(a.state_dict().items(), b.state_dict().values(), strict=True)
    for (key, pa), pb in pairs:
        assert torch.equal(pa, pb), key
    assert not torch.equal(a.units.unit1.conv1.weight, c.units.unit1.conv1.weight)


def test_build_leaves_global_rng_alone(tiny_spec):
    """Building a model does not advance the global torch RNG."""
    torch.manual_seed(123)
    expected = torch.rand(3)
    torch.manual_seed(123)
    build_model(tiny_spec, seed=0)
    assert torch.equal(torch.rand(3), expected)


def test_model_shape_and_mode(tiny_model, tiny_spec):
    """Logits have one column per class; fresh models are in eval mode."""
    logits = tiny_model(torch.zeros(5, *tiny_spec.input_shape))
    assert logits.shape == (5, tiny_spec.num_classes)
    assert tiny_model.mode == "eval"
    assert tiny_model.unit_ids == [1, 2, 3, 4]
    assert tiny_model.n == 4


def test_unknown_unit(tiny_model):
    """Looking up a missing unit id fails."""
    with pytest.raises(ArgumentError):
        tiny_model.unit(9)


def test_unsupported_combination():
    """residual-mlp has no bottleneck block."""
    spec = NetworkSpec("residual-mlp", ((2, 8, False),), "bottleneck", 2, (2, 1, 1))
    with pytest.raises(ConfigError, match="Unsupported"):
        ResidualNet(spec)


def test_kaiming_statistics():
    """Re-initialized weights have variance 2 / fan_in and near-zero mean."""
    conv = nn.Conv2d(64, 64, 3)
    kaiming_reset_(conv, torch.Generator().manual_seed(0))
    weight = conv.weight.detach().double()
    expected = 2.0 / fan_in(conv.weight)
    assert weight.numel() >= 10_000
    assert 0.95 * expected <= weight.var().item() <= 1.05 * expected
    bound = 4 * math.sqrt(expected) / math.sqrt(weight.numel())
    assert abs(weight.mean().item()) <= bound
    assert torch.count_nonzero(conv.bias) == 0


def test_kaiming_resets_batch_norm():
    """Norm layers get unit scale, zero shift and fresh statistics."""
    bn = nn.BatchNorm2d(4)
    with torch.no_grad():
        bn.weight.fill_(3.0)
        bn.running_mean.fill_(2.0)
    kaiming_reset_(bn, torch.Generator())
    assert torch.equal(bn.weight, torch.ones(4))
    assert torch.equal(bn.bias, torch.zeros(4))
    assert torch.equal(bn.running_mean, torch.zeros(4))
    assert torch.equal(bn.running_var, torch.ones(4))


class TestEnumerate:
    """Unit descriptions."""

    def test_identity_detection(self, tiny_model):
        """Only the downsampling unit lacks an identity shortcut."""
        units = enumerate_prunable_units(tiny_model)
        assert [u.index for u in units] == [1, 2, 3, 4]
        assert [u.identity_shortcut for u in units] == [True, True, False, True]
        assert [u.stage_id for u in units] == [1, 1, 2, 2]

    def test_feature_dim_and_params(self, tiny_model):
        """feature_dim is the fan_in of the first conv; params are exact."""
        units = enumerate_prunable_units(tiny_model)
        assert units[0].feature_dim == 4 * 3 * 3
        assert units[0].param_count == 144 + 8 + 144 + 8
        assert units[2].param_count == 288 + 16 + 576 + 16 + 32 + 16

    def test_mlp_units(self, mlp_spec):
        """Equal-width MLP blocks are all removable."""
        units = enumerate_prunable_units(build_model(mlp_spec, seed=0))
        assert all(u.eligible for u in units)
        assert [u.feature_dim for u in units] == [8, 8, 8]

    def test_resnet56_has_27_units(self):
        """ResNet56 exposes 27 units, 2 of them downsampling."""
        spec = NetworkSpec(
            "resnet-cifar",
            (
                StageSpec(9, 16),
                StageSpec(9, 32, downsample=True),
                StageSpec(9, 64, downsample=True),
            ),
            "basic",
            10,
            (3, 32, 32),
        )
        units = enumerate_prunable_units(build_model(spec, seed=0))
        assert len(units) == 27
        assert [u.index for u in units if not u.eligible] == [10, 19]


class TestRemoveUnits:
    """Surgery."""

    def test_remove_keeps_ids(self, tiny_model):
        """Surviving units keep their original ids; the source is untouched."""
        pruned = remove_units(tiny_model, {2, 4})
        assert pruned.unit_ids == [1, 3]
        assert tiny_model.unit_ids == [1, 2, 3, 4]
        assert pruned(torch.zeros(1, 3, 8, 8)).shape == (1, 3)

    def test_empty_selection_is_identity(self, tiny_model):
        """Removing nothing gives an equivalent model."""
        x = torch.randn(4, 3, 8, 8, generator=torch.Generator().manual_seed(0))
        assert torch.equal(remove_units(tiny_model, set())(x), tiny_model(x))

    def test_projection_unit_is_refused(self, tiny_model):
        """A downsampling unit cannot be removed."""
        with pytest.raises(CompatibilityError):
            remove_units(tiny_model, {3})

    def test_out_of_range(self, tiny_model):
        """Unknown ids are rejected."""
        with pytest.raises(ArgumentError, match="out of range"):
            remove_units(tiny_model, {0, 5})

    def test_removals_compose(self, tiny_model):
        """Removing two units at once equals removing them one after another."""
        together = remove_units(tiny_model, {1, 4})
        stepwise = remove_units(remove_units(tiny_model, {1}), {4})
        assert together.unit_ids == stepwise.unit_ids == [2, 3]
        x = torch.randn(5, 3, 8, 8, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            assert torch.equal(together(x), stepwise(x))

    def test_zero_residual_removal_is_exact(self, tiny_spec):
        """Removing a unit whose residual branch is zero changes no logit."""
        model = build_model(tiny_spec, seed=2).double()
        with torch.no_grad():
            model.units.unit2.bn2.weight.zero_()
            model.units.unit2.bn2.bias.zero_()
        x = torch.randn(6, 3, 8, 8, dtype=torch.float64)
        assert torch.equal(remove_units(model, {2})(x), model(x))


class TestCheckpoint:
    """Checkpoint format."""

    def test_round_trip_pruned(self, tiny_model, tmp_path):
        """A pruned model reloads with the same ids, parameters and outputs."""
        pruned = remove_units(tiny_model, {1})
        path = tmp_path / "pruned.pt"
        save_checkpoint(pruned, path)
        loaded = load_checkpoint(path)
        assert loaded.unit_ids == [2, 3, 4]
        assert loaded.mode == "eval"
        x = torch.randn(2, 3, 8, 8)
        assert torch.equal(loaded(x), pruned(x))

    def test_dtype_and_mode_preserved(self, tiny_model, tmp_path):
        """float64 parameters and train mode survive a round trip."""
        model = tiny_model.double().train()
        path = tmp_path / "m.pt"
        checkpoint_io(model, path, "save")
        loaded = checkpoint_io(None, path, "load")
        assert next(loaded.parameters()).dtype == torch.float64
        assert loaded.mode == "train"

    def test_truncated_file(self, tiny_model, tmp_path):
        """A truncated checkpoint raises FormatError naming the version."""
        path = tmp_path / "m.pt"
        save_checkpoint(tiny_model, path)
        path.write_bytes(path.read_bytes()[:100])
        with pytest.raises(FormatError, match=f"v{CHECKPOINT_VERSION}"):
            load_checkpoint(path)

    def test_wrong_version(self, tiny_model, tmp_path):
        """Another format version is refused."""
        path = tmp_path / "m.pt"
        payload = {"format": "srprune-checkpoint", "version": 99}
        torch.save(payload, path)
        with pytest.raises(FormatError, match="version 99"):
            load_checkpoint(path)

    @pytest.mark.parametrize("key", ["spec", "unit_ids", "dtype", "state_dict"])
    def test_missing_key(self, tiny_model, tmp_path, key):
        """A checkpoint lacking a required entry raises FormatError."""
        path = tmp_path / "m.pt"
        save_checkpoint(tiny_model, path)
        payload = torch.load(path, weights_only=True)
        del payload[key]
        torch.save(payload, path)
        with pytest.raises(FormatError, match="Malformed checkpoint"):
            load_checkpoint(path)

    def test_malformed_spec(self, tiny_model, tmp_path):
        """A spec without stages raises FormatError rather than ConfigError."""
        path = tmp_path / "m.pt"
        save_checkpoint(tiny_model, path)
        payload = torch.load(path, weights_only=True)
        payload["spec"] = {"family": "tiny-resnet"}
        torch.save(payload, path)
        with pytest.raises(FormatError, match="Malformed checkpoint"):
            load_checkpoint(path)

    def test_unknown_direction(self, tiny_model, tmp_path):
        """checkpoint_io only saves or loads."""
        with pytest.raises(ArgumentError):
            checkpoint_io(tiny_model, tmp_path / "m.pt", "copy")


def test_from_torchvision_matches_outputs():
    """A converted torchvision ResNet computes the same logits."""
    torchvision = pytest.importorskip("torchvision")
    tv_model = torchvision.models.resnet18(num_classes=7).eval()
    model = from_torchvision(tv_model, input_size=64)
    assert model.spec.block_kind == "basic"
    assert model.unit_ids == list(range(1, 9))
    x = torch.randn(2, 3, 64, 64)
    with torch.no_grad():
        torch.testing.assert_close(model(x), tv_model(x))
