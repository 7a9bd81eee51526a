"""Canonical data model shared by every srprune module."""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Any, Literal, TypeVar, cast

from srprune.errors import ArgumentError, ConfigError

Family = Literal["resnet-cifar", "resnet-imagenet", "tiny-resnet", "residual-mlp"]
BlockKind = Literal["basic", "bottleneck"]
ThresholdSource = Literal["explicit", "suggest"]
T = TypeVar("T")

FAMILIES: tuple[str, ...] = (
    "resnet-cifar",
    "resnet-imagenet",
    "tiny-resnet",
    "residual-mlp",
)
BLOCK_KINDS: tuple[str, ...] = ("basic", "bottleneck")
DROP_TOLERANCE = 1e-9
MIN_CLASSES = 2

# Error messages
ERR_NO_STAGES = "NetworkSpec needs at least one stage"
ERR_BLOCK_COUNT = "block_count must be >= 1"
ERR_CHANNELS = "channels must be > 0"
ERR_INPUT_SHAPE = "input_shape must be three positive ints (channels, height, width)"
ERR_ACCURACY_RANGE = "accuracy must lie in [0, 1]"
ERR_OVERLAP = "selected and skipped_incompatible must be disjoint"


@dataclass(frozen=True)
class StageSpec:
    """One stage of a residual network: a run of blocks at one width."""

    block_count: int
    channels: int  # block width (bottleneck blocks emit 4x this)
    downsample: bool = False  # first block halves the spatial size

    def __post_init__(self) -> None:
        """Validate the stage."""
        if self.block_count < 1:
            msg = f"{ERR_BLOCK_COUNT}, got {self.block_count}"
            raise ConfigError(msg)
        if self.channels <= 0:
            msg = f"{ERR_CHANNELS}, got {self.channels}"
            raise ConfigError(msg)


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description of a composed residual model."""

    family: Family
    stages: tuple[StageSpec, ...]
    block_kind: BlockKind
    num_classes: int
    input_shape: tuple[int, int, int]

    def __post_init__(self) -> None:
        """Validate the spec and coerce list inputs to tuples."""
        object.__setattr__(
            self,
            "stages",
            tuple(
                s if isinstance(s, StageSpec) else StageSpec(*s) for s in self.stages
            ),
        )
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        if self.family not in FAMILIES:
            msg = f"Unknown family {self.family!r}; expected one of {FAMILIES}"
            raise ConfigError(msg)
        if self.block_kind not in BLOCK_KINDS:
            msg = f"Unknown block_kind {self.block_kind!r}; expected {BLOCK_KINDS}"
            raise ConfigError(msg)
        if not self.stages:
            raise ConfigError(ERR_NO_STAGES)
        if self.num_classes < MIN_CLASSES:
            msg = f"num_classes must be >= {MIN_CLASSES}, got {self.num_classes}"
            raise ConfigError(msg)
        shape = self.input_shape
        if len(shape) != 3 or any(int(d) <= 0 for d in shape):  # noqa: PLR2004
            msg = f"{ERR_INPUT_SHAPE}, got {shape}"
            raise ConfigError(msg)

    @property
    def unit_count(self) -> int:
        """Total number of residual blocks."""
        return sum(stage.block_count for stage in self.stages)

    def to_dict(self) -> dict[str, Any]:
        """Plain-data form used by checkpoints and configs."""
        data = asdict(self)
        data["stages"] = [
            [s.block_count, s.channels, s.downsample] for s in self.stages
        ]
        data["input_shape"] = list(self.input_shape)
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "NetworkSpec":
        """Build a spec from its plain-data form.

        Stages may be given as ``[count, channels, downsample]`` lists or as
        mappings with those keys.

        Raises:
            ConfigError: If keys are missing or values are invalid

        """
        try:
            stages = tuple(
                StageSpec(**s) if isinstance(s, dict) else StageSpec(*s)
                for s in data["stages"]
            )
            return cls(
                family=data["family"],
                stages=stages,
                block_kind=data.get("block_kind", "basic"),
                num_classes=int(data["num_classes"]),
                input_shape=tuple(int(d) for d in data["input_shape"]),
            )
        except (KeyError, TypeError) as e:
            msg = f"Malformed network spec: {e}"
            raise ConfigError(msg) from e


@dataclass(frozen=True)
class PrunableUnit:
    """One residual block f_i of a composed model."""

    index: int  # stable 1-based id, survives surgery
    stage_id: int  # 1-based stage number
    identity_shortcut: bool  # input and output shapes match
    feature_dim: int  # fan_in of the block's first weight tensor
    param_count: int

    def __post_init__(self) -> None:
        """Validate the unit."""
        if self.feature_dim <= 0:
            msg = f"feature_dim must be > 0, got {self.feature_dim}"
            raise ArgumentError(msg)

    @property
    def eligible(self) -> bool:
        """Whether the unit may be removed (dimension-compatibility rule)."""
        return self.identity_shortcut


@dataclass(frozen=True)
class UnitDrop:
    """Accuracy drop of one estimation model."""

    unit_id: int
    stage_id: int
    eligible: bool
    est_accuracy: float
    drop: float


@dataclass(frozen=True)
class DropProfile:
    """Per-unit top-1 accuracy drops after stochastic re-initialization."""

    base_accuracy: float
    drops: tuple[UnitDrop, ...]
    dataset_id: str
    sample_count: int
    seeds: tuple[int, ...]

    def __post_init__(self) -> None:
        """Validate bounds and the drop identity for every entry."""
        object.__setattr__(self, "drops", tuple(self.drops))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not 0.0 <= self.base_accuracy <= 1.0:
            msg = f"base {ERR_ACCURACY_RANGE}, got {self.base_accuracy}"
            raise ArgumentError(msg)
        ids = [d.unit_id for d in self.drops]
        if len(ids) != len(set(ids)):
            msg = f"Duplicate unit ids in profile: {ids}"
            raise ArgumentError(msg)
        for entry in self.drops:
            if not 0.0 <= entry.est_accuracy <= 1.0:
                msg = f"unit {entry.unit_id} {ERR_ACCURACY_RANGE}"
                raise ArgumentError(msg)
            expected = self.base_accuracy - entry.est_accuracy
            if abs(entry.drop - expected) > DROP_TOLERANCE:
                msg = (
                    f"unit {entry.unit_id}: drop {entry.drop} != base_accuracy "
                    f"- est_accuracy ({expected})"
                )
                raise ArgumentError(msg)

    @property
    def trials_per_unit(self) -> int:
        """Number of re-initialization draws averaged per unit."""
        return len(self.seeds)

    @property
    def unit_ids(self) -> tuple[int, ...]:
        """Scored unit ids in forward order."""
        return tuple(d.unit_id for d in self.drops)

    @property
    def profile_id(self) -> str:
        """Content hash identifying this profile."""
        digest = hashlib.sha256(to_json(self).encode()).hexdigest()
        return digest[:16]

    def drop_of(self, unit_id: int) -> float:
        """Return the drop recorded for a unit.

        Raises:
            ArgumentError: If the unit was not scored

        """
        for entry in self.drops:
            if entry.unit_id == unit_id:
                return entry.drop
        msg = f"Unit {unit_id} is not part of this profile"
        raise ArgumentError(msg)

    def eligible_drops(self) -> list[float]:
        """Drops of the units that may be removed."""
        return [d.drop for d in self.drops if d.eligible]


@dataclass(frozen=True)
class PruneDecision:
    """Threshold plus the set of units chosen for removal."""

    threshold: float
    selected: frozenset[int]
    skipped_incompatible: frozenset[int]
    retained: frozenset[int] = field(default_factory=frozenset)
    profile_ref: str = ""
    threshold_source: ThresholdSource = "explicit"
    suggested_threshold: float | None = None

    def __post_init__(self) -> None:
        """Normalize set fields and check disjointness."""
        for name in ("selected", "skipped_incompatible", "retained"):
            object.__setattr__(self, name, frozenset(getattr(self, name)))
        if self.selected & self.skipped_incompatible:
            msg = f"{ERR_OVERLAP}: {sorted(self.selected & self.skipped_incompatible)}"
            raise ArgumentError(msg)


@dataclass(frozen=True)
class ModelStats:
    """Accuracy and cost of one model."""

    top1_accuracy: float
    params: int
    flops: int  # multiply-accumulate count for one sample
    input_shape: tuple[int, int, int]

    def __post_init__(self) -> None:
        """Validate counters."""
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        if self.params < 0 or self.flops < 0:
            msg = f"params/flops must be >= 0, got {self.params}/{self.flops}"
            raise ArgumentError(msg)


@dataclass(frozen=True)
class DepthDiagnostic:
    """Mean eligible-unit drop per stage."""

    stage_means: dict[int, float]
    redundancy_at_end: bool | None  # None when first or last stage has no data


@dataclass(frozen=True)
class PruneReport:
    """Baseline versus pruned comparison in the pruning-rate table format."""

    baseline: ModelStats
    pruned: ModelStats
    params_pr: float  # percent
    flops_pr: float  # percent
    accuracy_delta: float  # percentage points, pruned minus baseline
    decision: PruneDecision
    profile: DropProfile
    flop_convention: str = "MAC"
    depth: DepthDiagnostic | None = None


class _SchemaJSONEncoder(json.JSONEncoder):
    """JSON encoder that handles frozensets and tuples of dataclasses."""

    def default(self, obj: object) -> object:
        """Convert frozensets to sorted lists."""
        if isinstance(obj, frozenset | set):
            return sorted(obj)
        return super().default(obj)


def to_dict(obj: object) -> dict[str, Any]:
    """Convert a schema dataclass to plain data."""
    if isinstance(obj, NetworkSpec):
        return obj.to_dict()
    data = asdict(obj)
    return json.loads(json.dumps(data, cls=_SchemaJSONEncoder))


def to_json(obj: object) -> str:
    """Convert a schema dataclass to a JSON string."""
    return json.dumps(to_dict(obj), sort_keys=True)


def _profile_from(data: dict[str, Any]) -> DropProfile:
    return DropProfile(
        base_accuracy=data["base_accuracy"],
        drops=tuple(UnitDrop(**d) for d in data["drops"]),
        dataset_id=data["dataset_id"],
        sample_count=data["sample_count"],
        seeds=tuple(data["seeds"]),
    )


def _decision_from(data: dict[str, Any]) -> PruneDecision:
    return PruneDecision(**data)


def _report_from(data: dict[str, Any]) -> PruneReport:
    depth = data.get("depth")
    return PruneReport(
        baseline=ModelStats(**data["baseline"]),
        pruned=ModelStats(**data["pruned"]),
        params_pr=data["params_pr"],
        flops_pr=data["flops_pr"],
        accuracy_delta=data["accuracy_delta"],
        decision=_decision_from(data["decision"]),
        profile=_profile_from(data["profile"]),
        flop_convention=data.get("flop_convention", "MAC"),
        depth=(
            DepthDiagnostic(
                stage_means={int(k): v for k, v in depth["stage_means"].items()},
                redundancy_at_end=depth["redundancy_at_end"],
            )
            if depth
            else None
        ),
    )


_DECODERS = {
    NetworkSpec: NetworkSpec.from_dict,
    DropProfile: _profile_from,
    PruneDecision: _decision_from,
    PruneReport: _report_from,
}


def from_dict(data: dict[str, Any], cls: type[T]) -> T:
    """Rebuild a schema dataclass from plain data."""
    decoder = _DECODERS.get(cls)
    if decoder is not None:
        return cast("T", decoder(data))
    return cls(**data)


def from_json(json_str: str, cls: type[T]) -> T:
    """Convert a JSON string back to a schema dataclass."""
    return from_dict(json.loads(json_str), cls)
