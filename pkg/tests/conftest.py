"""Shared fixtures: small architectures, synthetic datasets, in-memory ledger."""

import os

# The ledger engine is created at import time; keep tests off the disk
os.environ.setdefault("SRPRUNE_DB_PATH", ":memory:")

import pytest  # noqa: E402
import torch  # noqa: E402
from sqlalchemy.pool import StaticPool  # noqa: E402
from sqlmodel import SQLModel, create_engine  # noqa: E402

from srprune.datasets import LabeledDataset, synthetic_samples  # noqa: E402
from srprune.netcore import build_model  # noqa: E402
from srprune.schema import NetworkSpec, StageSpec  # noqa: E402

# Tiny CNN: units 1, 2, 4 keep their shape; unit 3 downsamples
TINY_STAGES = (StageSpec(2, 4, downsample=False), StageSpec(2, 8, downsample=True))
TINY_INPUT = (3, 8, 8)
TINY_CLASSES = 3


@pytest.fixture
def tiny_spec():
    """Four-unit tiny-resnet on 3x8x8 inputs."""
    return NetworkSpec(
        family="tiny-resnet",
        stages=TINY_STAGES,
        block_kind="basic",
        num_classes=TINY_CLASSES,
        input_shape=TINY_INPUT,
    )


@pytest.fixture
def mlp_spec():
    """Three equal-width residual MLP blocks on 2-D points."""
    return NetworkSpec(
        family="residual-mlp",
        stages=(StageSpec(3, 8),),
        block_kind="basic",
        num_classes=2,
        input_shape=(2, 1, 1),
    )


@pytest.fixture
def tiny_model(tiny_spec):
    """Seeded tiny-resnet in eval mode."""
    return build_model(tiny_spec, seed=0)


@pytest.fixture
def tiny_dataset():
    """Synthetic 3-class set shaped for the tiny-resnet."""
    x, y, classes = synthetic_samples(60, TINY_CLASSES, TINY_INPUT, seed=1)
    return LabeledDataset(x=x, y=y, num_classes=classes, split="test", name="synthetic")


@pytest.fixture
def point_dataset():
    """200 two-class synthetic points in float64."""
    x, y, classes = synthetic_samples(200, 2, (2, 1, 1), seed=3)
    return LabeledDataset(
        x=x.to(torch.float64),
        y=y,
        num_classes=classes,
        split="val",
        name="synthetic",
    )


@pytest.fixture
def test_engine():
    """In-memory SQLite engine shared across sessions."""
    engine = create_engine(
        "sqlite://",
        echo=False,
        connect_args={"check_same_thread": False},
        poolclass=StaticPool,
    )
    SQLModel.metadata.create_all(engine)
    return engine


@pytest.fixture
def ledger(test_engine, monkeypatch):
    """Point the run ledger at the in-memory engine."""
    monkeypatch.setattr("srprune.db.engine", test_engine)
    return test_engine
