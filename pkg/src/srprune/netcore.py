"""Residual networks as an ordered composition of prunable blocks.

A model is ``classifier ∘ head ∘ unit_n ∘ ... ∘ unit_1 ∘ stem``. Every unit
keeps the 1-based id it received at construction time, so a set of unit ids
stays meaningful after other units have been removed.
"""

import copy
import logging
import math
import pickle
from collections.abc import Iterable
from pathlib import Path
from typing import Any, Literal

import torch
from torch import nn

from srprune.errors import ArgumentError, CompatibilityError, ConfigError, FormatError
from srprune.schema import NetworkSpec, PrunableUnit, StageSpec

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "srprune-checkpoint"
CHECKPOINT_VERSION = 1
BOTTLENECK_EXPANSION = 4

SUPPORTED_COMBINATIONS: frozenset[tuple[str, str]] = frozenset(
    {
        ("resnet-cifar", "basic"),
        ("resnet-cifar", "bottleneck"),
        ("resnet-imagenet", "basic"),
        ("resnet-imagenet", "bottleneck"),
        ("tiny-resnet", "basic"),
        ("residual-mlp", "basic"),
    },
)

_NORM_TYPES = (nn.BatchNorm1d, nn.BatchNorm2d)
_WEIGHT_TYPES = (nn.Conv2d, nn.Linear)


def fan_in(weight: torch.Tensor) -> int:
    """Receptive input size of a weight tensor (in_features x kernel area)."""
    return math.prod(weight.shape[1:])


@torch.no_grad()
def kaiming_reset_(module: nn.Module, generator: torch.Generator) -> nn.Module:
    """Re-initialize every parameter of a module in place.

    Weights of convolutions and linear layers are drawn from
    N(0, 2 / fan_in); biases become 0; batch-norm scale/shift become 1/0 and
    their running statistics mean 0 / variance 1. Submodules are visited in
    registration order, so the result depends only on the generator state.

    Args:
        module: Module to reset
        generator: Source of randomness

    Returns:
        The same module, for chaining

    """
    for sub in module.modules():
        if isinstance(sub, _WEIGHT_TYPES):
            std = math.sqrt(2.0 / fan_in(sub.weight))
            sub.weight.normal_(0.0, std, generator=generator)
            if sub.bias is not None:
                sub.bias.zero_()
        elif isinstance(sub, _NORM_TYPES):
            sub.reset_running_stats()
            if sub.affine:
                sub.weight.fill_(1.0)
                sub.bias.zero_()
    return module


class BasicBlock(nn.Module):
    """Two 3x3 convolutions with a residual connection."""

    expansion = 1

    def __init__(self, in_channels: int, width: int, stride: int = 1) -> None:
        """Build the block.

        Args:
            in_channels: Channels of the block input
            width: Channels of the block output
            stride: Stride of the first convolution

        """
        super().__init__()
        out_channels = width * self.expansion
        self.conv1 = nn.Conv2d(in_channels, width, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.relu1 = nn.ReLU()
        self.conv2 = nn.Conv2d(width, out_channels, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.shortcut = _shortcut(in_channels, out_channels, stride)
        self.relu2 = nn.ReLU()

    def residual(self, x: torch.Tensor) -> torch.Tensor:
        """Residual branch."""
        return self.bn2(self.conv2(self.relu1(self.bn1(self.conv1(x)))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Residual branch plus shortcut, rectified."""
        return self.relu2(self.residual(x) + self.shortcut(x))


class Bottleneck(nn.Module):
    """1x1 reduce, 3x3, 1x1 expand, with a residual connection."""

    expansion = BOTTLENECK_EXPANSION

    def __init__(self, in_channels: int, width: int, stride: int = 1) -> None:
        """Build the block.

        Args:
            in_channels: Channels of the block input
            width: Inner width; the block emits ``4 * width`` channels
            stride: Stride of the 3x3 convolution

        """
        super().__init__()
        out_channels = width * self.expansion
        self.conv1 = nn.Conv2d(in_channels, width, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.relu1 = nn.ReLU()
        self.conv2 = nn.Conv2d(width, width, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.relu2 = nn.ReLU()
        self.conv3 = nn.Conv2d(width, out_channels, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_channels)
        self.shortcut = _shortcut(in_channels, out_channels, stride)
        self.relu3 = nn.ReLU()

    def residual(self, x: torch.Tensor) -> torch.Tensor:
        """Residual branch."""
        out = self.relu1(self.bn1(self.conv1(x)))
        out = self.relu2(self.bn2(self.conv2(out)))
        return self.bn3(self.conv3(out))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Residual branch plus shortcut, rectified."""
        return self.relu3(self.residual(x) + self.shortcut(x))


class MLPBlock(nn.Module):
    """Two linear layers with a residual connection."""

    expansion = 1

    def __init__(
        self,
        in_features: int,
        width: int,
        stride: int = 1,  # noqa: ARG002
    ) -> None:
        """Build the block; ``stride`` is accepted for interface parity."""
        super().__init__()
        self.fc1 = nn.Linear(in_features, width)
        self.norm1 = nn.BatchNorm1d(width)
        self.relu1 = nn.ReLU()
        self.fc2 = nn.Linear(width, width)
        self.norm2 = nn.BatchNorm1d(width)
        if in_features == width:
            self.shortcut: nn.Module = nn.Identity()
        else:
            self.shortcut = nn.Sequential(
                nn.Linear(in_features, width, bias=False),
                nn.BatchNorm1d(width),
            )
        self.relu2 = nn.ReLU()

    def residual(self, x: torch.Tensor) -> torch.Tensor:
        """Residual branch."""
        return self.norm2(self.fc2(self.relu1(self.norm1(self.fc1(x)))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Residual branch plus shortcut, rectified."""
        return self.relu2(self.residual(x) + self.shortcut(x))


def _shortcut(in_channels: int, out_channels: int, stride: int) -> nn.Module:
    if stride == 1 and in_channels == out_channels:
        return nn.Identity()
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 1, stride, bias=False),
        nn.BatchNorm2d(out_channels),
    )


def _unit_key(unit_id: int) -> str:
    return f"unit{unit_id}"


class ResidualNet(nn.Module):
    """Composed model: stem, ordered residual units, head and classifier."""

    def __init__(self, spec: NetworkSpec) -> None:
        """Instantiate the full, unpruned topology described by ``spec``.

        Parameters are left at PyTorch defaults; use `build_model` for the
        seeded Kaiming initialization.

        Raises:
            ConfigError: If the family/block_kind combination is unsupported

        """
        super().__init__()
        if (spec.family, spec.block_kind) not in SUPPORTED_COMBINATIONS:
            msg = (
                f"Unsupported combination family={spec.family!r} "
                f"block_kind={spec.block_kind!r}"
            )
            raise ConfigError(msg)
        self.spec = spec
        self.stem, width = _make_stem(spec)
        block_cls = _block_class(spec)

        units: dict[str, nn.Module] = {}
        unit_id = 0
        for stage_id, stage in enumerate(spec.stages, start=1):
            for position in range(stage.block_count):
                unit_id += 1
                stride = 2 if stage.downsample and position == 0 else 1
                block = block_cls(width, stage.channels, stride)
                block.unit_id = unit_id
                block.stage_id = stage_id
                units[_unit_key(unit_id)] = block
                width = stage.channels * block_cls.expansion
        self.units = nn.ModuleDict(units)

        if spec.family == "residual-mlp":
            self.head: nn.Module = nn.Identity()
        else:
            self.head = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.classifier = nn.Linear(width, spec.num_classes)

    @property
    def unit_ids(self) -> list[int]:
        """Ids of the units still present, in forward order."""
        return [block.unit_id for block in self.units.values()]

    @property
    def n(self) -> int:
        """Number of units still present."""
        return len(self.units)

    @property
    def mode(self) -> Literal["train", "eval"]:
        """Current mode."""
        return "train" if self.training else "eval"

    def unit(self, unit_id: int) -> nn.Module:
        """Return the block with the given id.

        Raises:
            ArgumentError: If no unit carries this id

        """
        key = _unit_key(unit_id)
        if key not in self.units:
            msg = f"Unknown unit id {unit_id}; present: {self.unit_ids}"
            raise ArgumentError(msg)
        return self.units[key]

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Output of the last unit (before pooling)."""
        out = self.stem(x)
        for block in self.units.values():
            out = block(out)
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Logits of shape (batch, num_classes)."""
        return self.classifier(self.head(self.features(x)))


def _make_stem(spec: NetworkSpec) -> tuple[nn.Module, int]:
    channels, height, width = spec.input_shape
    stem_width = spec.stages[0].channels
    if spec.family == "residual-mlp":
        stem = nn.Sequential(
            nn.Flatten(),
            nn.Linear(channels * height * width, stem_width),
            nn.BatchNorm1d(stem_width),
            nn.ReLU(),
        )
    elif spec.family == "resnet-imagenet":
        stem = nn.Sequential(
            nn.Conv2d(channels, stem_width, 7, 2, 3, bias=False),
            nn.BatchNorm2d(stem_width),
            nn.ReLU(),
            nn.MaxPool2d(3, 2, 1),
        )
    else:
        stem = nn.Sequential(
            nn.Conv2d(channels, stem_width, 3, 1, 1, bias=False),
            nn.BatchNorm2d(stem_width),
            nn.ReLU(),
        )
    return stem, stem_width


def _block_class(spec: NetworkSpec) -> type[nn.Module]:
    if spec.family == "residual-mlp":
        return MLPBlock
    if spec.block_kind == "bottleneck":
        return Bottleneck
    return BasicBlock


def build_model(spec: NetworkSpec, seed: int) -> ResidualNet:
    """Instantiate a model with seeded Kaiming-normal parameters.

    The global torch RNG is left untouched; two calls with the same spec and
    seed give bit-identical parameters.

    Args:
        spec: Architecture description
        seed: Initialization seed

    Returns:
        The model, in eval mode

    Raises:
        ConfigError: If the family/block_kind combination is unsupported

    """
    with torch.random.fork_rng(devices=[]):
        model = ResidualNet(spec)
    generator = torch.Generator().manual_seed(seed)
    kaiming_reset_(model, generator)
    logger.debug("Built %s with %d units (seed=%d)", spec.family, model.n, seed)
    return model.eval()


def enumerate_prunable_units(model: ResidualNet) -> list[PrunableUnit]:
    """Describe every unit of a model in forward order.

    ``identity_shortcut`` is decided by pushing a zero sample through the
    model and comparing each block's input and output shapes.

    Args:
        model: The model to inspect

    Returns:
        One PrunableUnit per present unit

    """
    shapes: dict[int, tuple[torch.Size, torch.Size]] = {}

    def _record(block: nn.Module, args: tuple, output: torch.Tensor) -> None:
        shapes[block.unit_id] = (args[0].shape, output.shape)

    handles = [b.register_forward_hook(_record) for b in model.units.values()]
    was_training = model.training
    param = next(model.parameters())
    zeros = torch.zeros((1, *model.spec.input_shape), dtype=param.dtype)
    try:
        model.eval()
        with torch.no_grad():
            model(zeros.to(param.device))
    finally:
        for handle in handles:
            handle.remove()
        model.train(was_training)

    units = []
    for block in model.units.values():
        in_shape, out_shape = shapes[block.unit_id]
        first_weight = next(
            m.weight for m in block.modules() if isinstance(m, _WEIGHT_TYPES)
        )
        units.append(
            PrunableUnit(
                index=block.unit_id,
                stage_id=block.stage_id,
                identity_shortcut=in_shape == out_shape,
                feature_dim=fan_in(first_weight),
                param_count=sum(p.numel() for p in block.parameters()),
            ),
        )
    return units


def remove_units(model: ResidualNet, indices: Iterable[int]) -> ResidualNet:
    """Return a copy of ``model`` without the given units.

    Args:
        model: Source model, left unmodified
        indices: Unit ids to delete

    Returns:
        The shallower model, in the source model's mode

    Raises:
        ArgumentError: If an id does not name a present unit
        CompatibilityError: If a unit has a projection/downsampling shortcut

    """
    requested = set(indices)
    present = set(model.unit_ids)
    missing = sorted(requested - present)
    if missing:
        msg = f"Unit ids out of range: {missing}; present: {sorted(present)}"
        raise ArgumentError(msg)

    blocked = sorted(
        u.index
        for u in enumerate_prunable_units(model)
        if u.index in requested and not u.identity_shortcut
    )
    if blocked:
        msg = (
            f"Units {blocked} change the feature shape and cannot be removed "
            "without breaking the feedforward mapping"
        )
        raise CompatibilityError(msg)

    pruned = copy.deepcopy(model)
    for unit_id in sorted(requested):
        del pruned.units[_unit_key(unit_id)]
    return pruned


def save_checkpoint(model: ResidualNet, path: str | Path) -> None:
    """Write a versioned checkpoint (spec, present unit ids, parameters)."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "unit_ids": model.unit_ids,
        "mode": model.mode,
        "dtype": str(next(model.parameters()).dtype).removeprefix("torch."),
        "state_dict": model.state_dict(),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> ResidualNet:
    """Read a checkpoint written by `save_checkpoint`.

    Raises:
        FormatError: If the file is unreadable, truncated, or of another
            format version

    """
    expected = f"{CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}"
    try:
        payload: dict[str, Any] = torch.load(
            path,
            map_location="cpu",
            weights_only=True,
        )
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as e:
        msg = f"Cannot read checkpoint {path} (expected {expected}): {e}"
        raise FormatError(msg) from e

    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        msg = f"{path} is not a checkpoint (expected {expected})"
        raise FormatError(msg)
    if payload.get("version") != CHECKPOINT_VERSION:
        msg = (
            f"{path} has checkpoint version {payload.get('version')}; "
            f"expected version {CHECKPOINT_VERSION}"
        )
        raise FormatError(msg)

    try:
        spec = NetworkSpec.from_dict(payload["spec"])
        kept = {int(unit_id) for unit_id in payload["unit_ids"]}
        dtype = getattr(torch, payload["dtype"])
        training = payload["mode"] == "train"
        state_dict = payload["state_dict"]
    except (KeyError, TypeError, ValueError, AttributeError, ConfigError) as e:
        msg = f"Malformed checkpoint {path} (expected {expected}): {e!r}"
        raise FormatError(msg) from e
    with torch.random.fork_rng(devices=[]):
        model = ResidualNet(spec)
    for unit_id in list(model.unit_ids):
        if unit_id not in kept:
            del model.units[_unit_key(unit_id)]
    model.to(dtype)
    try:
        model.load_state_dict(state_dict)
    except RuntimeError as e:
        msg = f"Parameters in {path} do not match its spec: {e}"
        raise FormatError(msg) from e
    model.train(training)
    return model


def checkpoint_io(
    model: ResidualNet | None,
    path: str | Path,
    direction: Literal["save", "load"],
) -> ResidualNet | None:
    """Save or load a model, depending on ``direction``.

    Raises:
        ArgumentError: If ``direction`` is unknown or a save has no model

    """
    if direction == "save":
        if model is None:
            msg = "checkpoint_io(save) needs a model"
            raise ArgumentError(msg)
        save_checkpoint(model, path)
        return None
    if direction == "load":
        return load_checkpoint(path)
    msg = f"Unknown checkpoint direction {direction!r}"
    raise ArgumentError(msg)


def from_torchvision(tv_model: nn.Module, input_size: int = 224) -> ResidualNet:
    """Convert a torchvision ResNet into a ``resnet-imagenet`` ResidualNet.

    Args:
        tv_model: A ``torchvision.models.resnet*`` instance
        input_size: Spatial input size recorded in the spec

    Returns:
        The converted model with the same parameters, in eval mode

    """
    layers = [getattr(tv_model, f"layer{i}") for i in range(1, 5)]
    bottleneck = hasattr(layers[0][0], "conv3")
    stages = tuple(
        StageSpec(
            block_count=len(layer),
            channels=layer[0].conv1.out_channels,
            downsample=i > 0,
        )
        for i, layer in enumerate(layers)
    )
    spec = NetworkSpec(
        family="resnet-imagenet",
        stages=stages,
        block_kind="bottleneck" if bottleneck else "basic",
        num_classes=tv_model.fc.out_features,
        input_shape=(3, input_size, input_size),
    )
    with torch.random.fork_rng(devices=[]):
        model = ResidualNet(spec)

    renamed: dict[str, torch.Tensor] = {}
    for key, value in tv_model.state_dict().items():
        renamed[_torchvision_key(key, layers)] = value
    model.load_state_dict(renamed)
    return model.eval()


def _torchvision_key(key: str, layers: list[nn.Module]) -> str:
    parts = key.split(".")
    if parts[0] == "conv1":
        return "stem.0." + ".".join(parts[1:])
    if parts[0] == "bn1":
        return "stem.1." + ".".join(parts[1:])
    if parts[0] == "fc":
        return "classifier." + ".".join(parts[1:])
    layer_index = int(parts[0].removeprefix("layer")) - 1
    unit_id = sum(len(layer) for layer in layers[:layer_index]) + int(parts[1]) + 1
    rest = parts[2:]
    if rest[0] == "downsample":
        rest[0] = "shortcut"
    return ".".join(["units", _unit_key(unit_id), *rest])
