"""Tests for the architecture registry."""

import pytest
import yaml

from srprune.errors import ConfigError
from srprune.netcore import build_model, enumerate_prunable_units
from srprune.registry import available, load_registry, spec_for


def test_bundled_registry_names():
    """The bundled registry has the CIFAR, ImageNet and desk models."""
    names = available()
    for name in ("resnet56", "resnet110", "resnet50", "tiny-desk", "mlp3"):
        assert name in names


def test_resnet50_spec():
    """ResNet50 is a bottleneck [3, 4, 6, 3] network."""
    spec = spec_for("resnet50")
    assert spec.block_kind == "bottleneck"
    assert [s.block_count for s in spec.stages] == [3, 4, 6, 3]
    assert spec.num_classes == 1000


def test_tiny_desk_has_enough_removable_units():
    """The desk model keeps at least four identity-shortcut units."""
    units = enumerate_prunable_units(build_model(spec_for("tiny-desk"), seed=0))
    assert sum(u.eligible for u in units) >= 4


def test_unknown_name():
    """Unknown names raise ConfigError listing the registered ones."""
    with pytest.raises(ConfigError, match="resnet56"):
        spec_for("resnet57")


def test_env_override(tmp_path, monkeypatch):
    """SRPRUNE_ARCH_REGISTRY points at another registry file."""
    registry = tmp_path / "archs.yaml"
    registry.write_text(
        yaml.safe_dump(
            [
                {
                    "name": "custom",
                    "family": "tiny-resnet",
                    "block_kind": "basic",
                    "num_classes": 4,
                    "input_shape": [3, 16, 16],
                    "stages": [[2, 8, False]],
                },
            ],
        ),
    )
    monkeypatch.setenv("SRPRUNE_ARCH_REGISTRY", str(registry))
    assert available() == ["custom"]
    assert spec_for("custom").num_classes == 4


def test_explicit_path_wins(tmp_path, monkeypatch):
    """An explicit path takes precedence over the environment."""
    monkeypatch.setenv("SRPRUNE_ARCH_REGISTRY", str(tmp_path / "missing.yaml"))
    explicit = tmp_path / "explicit.yaml"
    explicit.write_text("- name: only\n  family: residual-mlp\n")
    assert [e["name"] for e in load_registry(explicit)] == ["only"]
