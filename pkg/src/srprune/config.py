"""Pipeline configuration: YAML tree to validated frozen dataclasses.

Validation is total. Every problem is collected with its dotted key path and
reported in a single ConfigError before anything is computed.
"""

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Literal

import yaml

from srprune.datasets import DATASETS, KNOWN_SHAPES, SplitSpec, synthetic_params
from srprune.errors import ConfigError
from srprune.registry import spec_for
from srprune.schema import NetworkSpec
from srprune.trainer import TrainConfig

DATA_ROOT_ENV = "SRPRUNE_DATA_ROOT"
SUGGEST = "suggest"
EVAL_SPLITS = ("train", "val", "test")
TRAIN_SOURCES = ("scratch", "torchvision")
FIGURE_FORMATS = ("png", "svg", "pdf")
CONFIG_HASH_LENGTH = 12

_TOP_LEVEL_KEYS = (
    "arch",
    "dataset",
    "srinit",
    "train",
    "finetune",
    "interpret",
    "report",
    "output_dir",
    "seed",
)
# Keys that change where or how fast a run happens, never what it produces
_UNHASHED_TRAIN_KEYS = ("device", "seed")

ERR_NOT_MAPPING = "must be a mapping"


@dataclass(frozen=True)
class DatasetSection:
    """Which dataset to load and how to carve it."""

    name: str = "cifar10"
    root: Path | None = None
    val_fraction: float = 0.1
    train_limit: int | None = None
    test_limit: int | None = None
    download: bool = False
    image_size: int = 224
    synthetic: dict[str, Any] = field(default_factory=dict)

    def split_spec(self, split: Literal["train", "val", "test"]) -> SplitSpec:
        """Loader arguments for one split."""
        return SplitSpec(
            split=split,
            val_fraction=self.val_fraction,
            train_limit=self.train_limit,
            test_limit=self.test_limit,
            download=self.download,
            image_size=self.image_size,
            synthetic=dict(self.synthetic),
        )


@dataclass(frozen=True)
class SrinitSection:
    """Scoring and selection settings."""

    t_err: float | Literal["suggest"]
    seeds: tuple[int, ...] = (0,)
    eval_split: Literal["train", "val", "test"] = "val"
    units_parallel: int = 1


@dataclass(frozen=True)
class InterpretSection:
    """Which samples the interpret step explains."""

    samples: int = 4
    target_unit: int | None = None
    top_fraction: float = 0.1


@dataclass(frozen=True)
class PipelineConfig:
    """A validated pipeline configuration."""

    arch_name: str
    spec: NetworkSpec
    dataset: DatasetSection
    srinit: SrinitSection
    train: TrainConfig
    finetune: TrainConfig
    interpret: InterpretSection
    output_dir: Path
    seed: int = 0
    train_source: Literal["scratch", "torchvision"] = "scratch"
    figure_formats: tuple[str, ...] = ("png",)

    def hashed_content(self) -> dict[str, Any]:
        """Everything that determines the artifacts, except the seed.

        Runs that differ only in ``t_err`` share a directory: baseline and
        profile are reused, and prune and later steps overwrite their outputs.
        """
        train = _hashed_train(self.train)
        tune = _hashed_train(self.finetune)
        dataset = asdict(self.dataset)
        dataset.pop("root")
        srinit = asdict(self.srinit)
        srinit.pop("units_parallel")
        srinit.pop("t_err")
        return {
            "arch": self.spec.to_dict(),
            "dataset": dataset,
            "srinit": srinit,
            "train": train,
            "train_source": self.train_source,
            "finetune": tune,
            "interpret": asdict(self.interpret),
        }

    @property
    def config_hash(self) -> str:
        """Short content hash of `hashed_content`."""
        canonical = json.dumps(self.hashed_content(), sort_keys=True, default=list)
        return hashlib.sha256(canonical.encode()).hexdigest()[:CONFIG_HASH_LENGTH]

    @property
    def run_dir(self) -> Path:
        """Directory owning every artifact of this run."""
        return self.output_dir / f"{self.config_hash}-s{self.seed}"


class _Problems:
    """Collects validation problems keyed by dotted path."""

    def __init__(self) -> None:
        self.items: list[str] = []

    def add(self, path: str, message: str) -> None:
        self.items.append(f"{path}: {message}")

    def section(self, raw: dict[str, Any], key: str) -> dict[str, Any]:
        value = raw.get(key, {})
        if value is None:
            return {}
        if not isinstance(value, dict):
            self.add(key, ERR_NOT_MAPPING)
            return {}
        return value

    def unknown(self, path: str, data: dict[str, Any], known: tuple[str, ...]) -> None:
        for key in sorted(set(data) - set(known)):
            self.add(f"{path}.{key}" if path else key, "unknown key")


def _is_int(value: object) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value: object) -> bool:
    return isinstance(value, int | float) and not isinstance(value, bool)


def _typed(value: object, example: object) -> bool:
    if isinstance(example, bool):
        return isinstance(value, bool)
    if isinstance(example, float):
        return _is_number(value)
    if isinstance(example, int):
        return _is_int(value)
    if isinstance(example, str):
        return isinstance(value, str)
    return True


def _hashed_train(config: TrainConfig) -> dict[str, Any]:
    return {
        k: v for k, v in asdict(config).items() if k not in _UNHASHED_TRAIN_KEYS
    }


def _parse_arch(raw: object, problems: _Problems) -> tuple[str, NetworkSpec | None]:
    try:
        if isinstance(raw, str):
            return raw, spec_for(raw)
        if isinstance(raw, dict):
            return "inline", NetworkSpec.from_dict(raw)
    except ConfigError as e:
        problems.add("arch", str(e))
        return str(raw), None
    problems.add("arch", "required: a registry name or a NetworkSpec mapping")
    return "", None


def _parse_dataset(data: dict[str, Any], problems: _Problems) -> DatasetSection:
    known = tuple(f.name for f in fields(DatasetSection))
    problems.unknown("dataset", data, known)
    name = data.get("name", DatasetSection.name)
    if name not in DATASETS:
        problems.add(
            "dataset.name",
            f"unsupported dataset {name!r}, use one of {list(DATASETS)}",
        )

    root = data.get("root") or os.environ.get(DATA_ROOT_ENV)
    download = data.get("download", False)
    if root is None and name != "synthetic":
        problems.add("dataset.root", f"not set and {DATA_ROOT_ENV} is unset")
    elif (
        root is not None
        and not download
        and name != "synthetic"
        and not Path(root).is_dir()
    ):
        problems.add("dataset.root", f"directory {root} does not exist")

    val_fraction = data.get("val_fraction", 0.1)
    if not _is_number(val_fraction) or not 0.0 <= val_fraction < 1.0:
        problems.add(
            "dataset.val_fraction",
            f"must lie in [0, 1), got {val_fraction!r}",
        )
    for key in ("train_limit", "test_limit"):
        limit = data.get(key)
        if limit is not None and (not _is_int(limit) or limit < 1):
            problems.add(f"dataset.{key}", f"must be a positive int, got {limit!r}")
    if not isinstance(download, bool):
        problems.add("dataset.download", f"must be true or false, got {download!r}")
    image_size = data.get("image_size", 224)
    if not _is_int(image_size) or image_size < 1:
        problems.add(
            "dataset.image_size",
            f"must be a positive int, got {image_size!r}",
        )
    synthetic = data.get("synthetic") or {}
    if not isinstance(synthetic, dict):
        problems.add("dataset.synthetic", ERR_NOT_MAPPING)
        synthetic = {}

    return DatasetSection(
        name=name,
        root=Path(root) if root is not None else None,
        val_fraction=val_fraction if _is_number(val_fraction) else 0.1,
        train_limit=data.get("train_limit"),
        test_limit=data.get("test_limit"),
        download=bool(download),
        image_size=image_size if _is_int(image_size) else 224,
        synthetic=synthetic,
    )


def _parse_srinit(data: dict[str, Any], problems: _Problems) -> SrinitSection:
    known = tuple(f.name for f in fields(SrinitSection))
    problems.unknown("srinit", data, known)

    # No default: the threshold is the method's only free knob
    t_err = data.get("t_err")
    if t_err is None:
        problems.add("srinit.t_err", f"required: a number or {SUGGEST!r}")
        t_err = SUGGEST
    elif t_err != SUGGEST and (not _is_number(t_err) or not math.isfinite(t_err)):
        problems.add(
            "srinit.t_err",
            f"must be a finite number or {SUGGEST!r}, got {t_err!r}",
        )
        t_err = SUGGEST

    seeds = data.get("seeds", [0])
    if isinstance(seeds, int) and not isinstance(seeds, bool):
        seeds = [seeds]
    if (
        not isinstance(seeds, list)
        or not seeds
        or not all(_is_int(s) and s >= 0 for s in seeds)
        or len(set(seeds)) != len(seeds)
    ):
        problems.add(
            "srinit.seeds",
            f"must be a non-empty list of distinct ints >= 0, got {seeds!r}",
        )
        seeds = [0]

    eval_split = data.get("eval_split", "val")
    if eval_split not in EVAL_SPLITS:
        problems.add(
            "srinit.eval_split",
            f"must be one of {list(EVAL_SPLITS)}, got {eval_split!r}",
        )
        eval_split = "val"
    units_parallel = data.get("units_parallel", 1)
    if not _is_int(units_parallel) or units_parallel < 1:
        problems.add(
            "srinit.units_parallel",
            f"must be an int >= 1, got {units_parallel!r}",
        )
        units_parallel = 1

    return SrinitSection(
        t_err=float(t_err) if t_err != SUGGEST else SUGGEST,
        seeds=tuple(seeds),
        eval_split=eval_split,
        units_parallel=units_parallel,
    )


def _parse_train(
    path: str,
    recipe: str,
    data: dict[str, Any],
    seed: int,
    problems: _Problems,
) -> TrainConfig:
    defaults = TrainConfig.from_recipe(recipe)
    known = {f.name: getattr(defaults, f.name) for f in fields(TrainConfig)}
    values = {}
    for key, value in data.items():
        if key not in known:
            problems.add(f"{path}.{key}", "unknown key")
        elif not _typed(value, known[key]):
            problems.add(
                f"{path}.{key}",
                f"expected {type(known[key]).__name__}, got {value!r}",
            )
        else:
            values[key] = value
    values["seed"] = seed
    try:
        return TrainConfig.from_recipe(recipe, **values)
    except ConfigError as e:
        for message in str(e).split("; "):
            problems.add(path, message)
        return defaults


def _parse_interpret(data: dict[str, Any], problems: _Problems) -> InterpretSection:
    known = tuple(f.name for f in fields(InterpretSection))
    problems.unknown("interpret", data, known)
    samples = data.get("samples", 4)
    if not _is_int(samples) or samples < 0:
        problems.add("interpret.samples", f"must be an int >= 0, got {samples!r}")
        samples = 4
    target_unit = data.get("target_unit")
    if target_unit is not None and (not _is_int(target_unit) or target_unit < 1):
        problems.add(
            "interpret.target_unit",
            f"must be a unit id >= 1, got {target_unit!r}",
        )
        target_unit = None
    top_fraction = data.get("top_fraction", 0.1)
    if not _is_number(top_fraction) or not 0.0 < top_fraction <= 1.0:
        problems.add(
            "interpret.top_fraction",
            f"must lie in (0, 1], got {top_fraction!r}",
        )
        top_fraction = 0.1
    return InterpretSection(
        samples=samples,
        target_unit=target_unit,
        top_fraction=top_fraction,
    )


def _check_compatible(
    spec: NetworkSpec,
    dataset: DatasetSection,
    problems: _Problems,
) -> None:
    """Class count and sample shape of the dataset must match the network."""
    classes: int | None = None
    shape: tuple[int, ...] | None = None
    classes_key, shape_key = "dataset.name", "dataset.name"
    if dataset.name in KNOWN_SHAPES:
        classes, shape = KNOWN_SHAPES[dataset.name]
    elif dataset.name == "folder":
        shape = (3, dataset.image_size, dataset.image_size)
        shape_key = "dataset.image_size"
    elif dataset.name == "synthetic":
        try:
            params = synthetic_params(dataset.synthetic)
            classes, shape = int(params["classes"]), params["input_shape"]
        except (TypeError, ValueError):
            problems.add("dataset.synthetic", "classes and input_shape must be ints")
            return
        classes_key = "dataset.synthetic.classes"
        shape_key = "dataset.synthetic.input_shape"
    if classes is not None and classes != spec.num_classes:
        problems.add(
            classes_key,
            f"dataset has {classes} classes but arch has {spec.num_classes} outputs",
        )
    if shape is not None and tuple(shape) != tuple(spec.input_shape):
        problems.add(
            shape_key,
            f"samples of shape {list(shape)} do not fit arch input "
            f"{list(spec.input_shape)}",
        )


def parse_config(
    raw: dict[str, Any],
    overrides: dict[str, Any] | None = None,
) -> PipelineConfig:
    """Validate a configuration tree.

    Args:
        raw: Parsed YAML document
        overrides: CLI values replacing ``seed``, ``output_dir``,
            ``srinit.t_err`` and ``srinit.units_parallel``

    Returns:
        The validated configuration

    Raises:
        ConfigError: Listing every problem, one per line with its key path

    """
    if not isinstance(raw, dict):
        msg = "configuration must be a mapping at the top level"
        raise ConfigError(msg)
    raw = dict(raw)
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    srinit_raw = raw.get("srinit")
    srinit_raw = dict(srinit_raw) if isinstance(srinit_raw, dict) else srinit_raw
    for key in ("t_err", "units_parallel"):
        if key in overrides and isinstance(srinit_raw, dict | None):
            srinit_raw = srinit_raw or {}
            srinit_raw[key] = overrides[key]
    raw["srinit"] = srinit_raw
    for key in ("seed", "output_dir"):
        if key in overrides:
            raw[key] = overrides[key]

    problems = _Problems()
    problems.unknown("", raw, _TOP_LEVEL_KEYS)

    seed = raw.get("seed", 0)
    if not _is_int(seed) or seed < 0:
        problems.add("seed", f"must be an int >= 0, got {seed!r}")
        seed = 0
    output_dir = raw.get("output_dir", "runs")
    if not isinstance(output_dir, str | Path):
        problems.add("output_dir", f"must be a path, got {output_dir!r}")
        output_dir = "runs"

    arch_name, spec = _parse_arch(raw.get("arch"), problems)
    dataset = _parse_dataset(problems.section(raw, "dataset"), problems)
    srinit = _parse_srinit(problems.section(raw, "srinit"), problems)

    train_raw = dict(problems.section(raw, "train"))
    train_source = train_raw.pop("source", "scratch")
    if train_source not in TRAIN_SOURCES:
        problems.add(
            "train.source",
            f"must be one of {list(TRAIN_SOURCES)}, got {train_source!r}",
        )
        train_source = "scratch"
    train = _parse_train("train", "baseline", train_raw, seed, problems)
    finetune_raw = problems.section(raw, "finetune")
    finetune = _parse_train("finetune", "finetune", finetune_raw, seed, problems)
    interpret = _parse_interpret(problems.section(raw, "interpret"), problems)

    report = problems.section(raw, "report")
    problems.unknown("report", report, ("formats",))
    formats = report.get("formats", ["png"])
    if (
        not isinstance(formats, list)
        or not formats
        or not set(formats) <= set(FIGURE_FORMATS)
    ):
        problems.add(
            "report.formats",
            f"must be a non-empty subset of {list(FIGURE_FORMATS)}",
        )
        formats = ["png"]

    if spec is not None:
        _check_compatible(spec, dataset, problems)
    imagenet = spec is not None and spec.family == "resnet-imagenet"
    if spec is not None and train_source == "torchvision" and not imagenet:
        problems.add("train.source", "torchvision weights need a resnet-imagenet arch")

    if problems.items:
        raise ConfigError("\n".join(problems.items))
    return PipelineConfig(
        arch_name=arch_name,
        spec=spec,
        dataset=dataset,
        srinit=srinit,
        train=train,
        finetune=finetune,
        interpret=interpret,
        output_dir=Path(output_dir),
        seed=seed,
        train_source=train_source,
        figure_formats=tuple(formats),
    )


def load_config(
    path: str | Path,
    overrides: dict[str, Any] | None = None,
) -> PipelineConfig:
    """Read and validate a YAML configuration file.

    Raises:
        ConfigError: If the file is missing, unparsable or invalid

    """
    try:
        with Path(path).open() as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError as e:
        msg = f"config file {path} not found"
        raise ConfigError(msg) from e
    except yaml.YAMLError as e:
        msg = f"cannot parse config file {path}: {e}"
        raise ConfigError(msg) from e
    return parse_config(raw or {}, overrides)
