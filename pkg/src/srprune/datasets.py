"""Dataset ingestion: CIFAR, image folders and a synthetic separable set.

CIFAR and synthetic splits are held as in-memory tensors; image folders stay
on disk and are decoded per sample. Splits, subsets and the validation
carve-out are deterministic given the seed.
"""

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal, Protocol

import torch
from torch.utils.data import Dataset

from srprune.errors import ArgumentError, IngestionError

logger = logging.getLogger(__name__)

Split = Literal["train", "val", "test"]
DatasetName = Literal["cifar10", "cifar100", "synthetic", "folder"]

NORMALIZATION: dict[str, tuple[tuple[float, ...], tuple[float, ...]]] = {
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "cifar100": ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
    "folder": ((0.485, 0.456, 0.406), (0.229, 0.224, 0.225)),
}
# Class count and sample shape of the fixed-size datasets
KNOWN_SHAPES: dict[str, tuple[int, tuple[int, int, int]]] = {
    "cifar10": (10, (3, 32, 32)),
    "cifar100": (100, (3, 32, 32)),
}
SYNTHETIC_DEFAULTS: dict[str, Any] = {
    "m": 200,
    "classes": 2,
    "input_shape": (2, 1, 1),
    "noise": 0.5,
}
SYNTHETIC_RADIUS = 4.0
CROP_PADDING = 4

ERR_EMPTY = "dataset must contain at least one sample"


@dataclass(frozen=True, eq=False)
class LabeledDataset(Dataset):
    """Labeled samples D = {(x_j, y_j)} held as tensors."""

    x: torch.Tensor  # (m, C, H, W), normalized
    y: torch.Tensor  # (m,), int64 labels
    num_classes: int
    split: Split
    name: str = "dataset"
    mean: tuple[float, ...] = ()
    std: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        """Validate sizes and label range."""
        if self.x.shape[0] == 0:
            raise ArgumentError(ERR_EMPTY)
        if self.x.shape[0] != self.y.shape[0]:
            msg = f"x has {self.x.shape[0]} samples but y has {self.y.shape[0]}"
            raise ArgumentError(msg)
        if int(self.y.min()) < 0 or int(self.y.max()) >= self.num_classes:
            msg = f"labels must lie in [0, {self.num_classes})"
            raise ArgumentError(msg)

    @property
    def m(self) -> int:
        """Number of samples."""
        return int(self.x.shape[0])

    @property
    def sample_shape(self) -> tuple[int, ...]:
        """Shape of one input sample."""
        return tuple(self.x.shape[1:])

    @property
    def dataset_id(self) -> str:
        """Identifier recorded in drop profiles."""
        return f"{self.name}:{self.split}:{self.m}"

    def __len__(self) -> int:
        """Number of samples."""
        return self.m

    def __getitem__(self, index: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Return sample ``index`` as (x_j, y_j)."""
        return self.x[index], self.y[index]

    def subset(
        self,
        indices: torch.Tensor,
        split: Split | None = None,
    ) -> "LabeledDataset":
        """Copy restricted to ``indices``."""
        return LabeledDataset(
            x=self.x[indices],
            y=self.y[indices],
            num_classes=self.num_classes,
            split=split or self.split,
            name=self.name,
            mean=self.mean,
            std=self.std,
        )


@dataclass(frozen=True, eq=False)
class FolderDataset(Dataset):
    """Image-folder samples decoded from disk on access.

    ``indices`` selects files of the underlying ``ImageFolder``, whose
    transform resizes, crops and normalizes every image.
    """

    folder: Any  # torchvision.datasets.ImageFolder
    indices: tuple[int, ...]
    num_classes: int
    split: Split
    sample_shape: tuple[int, ...]
    name: str = "folder"
    mean: tuple[float, ...] = ()
    std: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        """Reject empty selections."""
        if not self.indices:
            raise ArgumentError(ERR_EMPTY)

    @property
    def m(self) -> int:
        """Number of samples."""
        return len(self.indices)

    @property
    def dataset_id(self) -> str:
        """Identifier recorded in drop profiles."""
        return f"{self.name}:{self.split}:{self.m}"

    def __len__(self) -> int:
        """Number of samples."""
        return self.m

    def __getitem__(self, index: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Decode sample ``index``.

        Raises:
            IngestionError: If the image file cannot be read

        """
        file_index = self.indices[index]
        try:
            x, label = self.folder[file_index]
        except OSError as e:
            path = self.folder.samples[file_index][0]
            msg = f"Corrupt image file {path}: {e}"
            raise IngestionError(msg) from e
        return x, torch.tensor(label, dtype=torch.int64)

    def subset(
        self,
        indices: torch.Tensor,
        split: Split | None = None,
    ) -> "FolderDataset":
        """Selection restricted to ``indices`` (positions in this selection)."""
        return FolderDataset(
            folder=self.folder,
            indices=tuple(self.indices[i] for i in indices.tolist()),
            num_classes=self.num_classes,
            split=split or self.split,
            sample_shape=self.sample_shape,
            name=self.name,
            mean=self.mean,
            std=self.std,
        )


SampleSet = LabeledDataset | FolderDataset


@dataclass(frozen=True, eq=False)
class TransformedDataset(Dataset):
    """Applies ``transform`` to the inputs of another dataset."""

    base: Dataset
    transform: Callable[[torch.Tensor], torch.Tensor]

    def __len__(self) -> int:
        """Number of samples of the base dataset."""
        return len(self.base)

    def __getitem__(self, index: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Transformed input and unchanged label."""
        x, y = self.base[index]
        return self.transform(x), y


def is_image(sample_shape: Sequence[int]) -> bool:
    """True for (C, H, W) samples with spatial extent."""
    return len(sample_shape) == 3 and sample_shape[-1] > 1  # noqa: PLR2004


def train_transform(
    sample_shape: Sequence[int],
    padding: int = CROP_PADDING,
) -> Callable[[torch.Tensor], torch.Tensor]:
    """Padded random crop and horizontal flip for (C, H, W) tensors."""
    from torchvision import transforms

    return transforms.Compose(
        [
            transforms.RandomCrop(tuple(sample_shape[1:]), padding=padding),
            transforms.RandomHorizontalFlip(),
        ],
    )


@dataclass(frozen=True)
class SplitSpec:
    """Which split to return and how to carve it."""

    split: Split = "train"
    val_fraction: float = 0.1  # carved from the training pool
    train_limit: int | None = None  # random subset of the training pool
    test_limit: int | None = None
    download: bool = False
    image_size: int = 224  # folder datasets only
    mean: tuple[float, ...] | None = None  # overrides the per-dataset default
    std: tuple[float, ...] | None = None
    synthetic: dict[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        """Validate fractions."""
        if not 0.0 <= self.val_fraction < 1.0:
            msg = f"val_fraction must lie in [0, 1), got {self.val_fraction}"
            raise ArgumentError(msg)


def _normalization(
    name: str,
    channels: int,
    spec: SplitSpec,
) -> tuple[tuple[float, ...], tuple[float, ...]]:
    mean, std = spec.mean, spec.std
    if mean is None or std is None:
        default = NORMALIZATION.get(name, ((0.0,) * channels, (1.0,) * channels))
        mean, std = mean or default[0], std or default[1]
    if len(mean) != channels or len(std) != channels:
        msg = f"normalization needs {channels} channels, got {len(mean)}/{len(std)}"
        raise ArgumentError(msg)
    return tuple(mean), tuple(std)


def _tensor_set(  # noqa: PLR0913
    x: torch.Tensor,
    y: torch.Tensor,
    num_classes: int,
    name: str,
    split: Split,
    spec: SplitSpec,
) -> LabeledDataset:
    mean, std = _normalization(name, x.shape[1], spec)
    shift = torch.tensor(mean).view(1, -1, 1, 1)
    scale = torch.tensor(std).view(1, -1, 1, 1)
    return LabeledDataset(
        x=(x - shift) / scale,
        y=y,
        num_classes=num_classes,
        split=split,
        name=name,
        mean=mean,
        std=std,
    )


class _Loader(Protocol):
    def __call__(
        self,
        root: Path,
        train: bool,  # noqa: FBT001
        spec: SplitSpec,
        seed: int,
    ) -> SampleSet: ...


def _cifar_loader(name: str, dataset_cls_name: str) -> _Loader:
    def _load(
        root: Path,
        train: bool,  # noqa: FBT001
        spec: SplitSpec,
        seed: int,  # noqa: ARG001
    ) -> LabeledDataset:
        from torchvision import datasets

        dataset_cls = getattr(datasets, dataset_cls_name)
        try:
            ds = dataset_cls(str(root), train=train, download=spec.download)
        except RuntimeError as e:
            folder = root / dataset_cls.base_folder
            msg = f"Cannot read {dataset_cls_name} from {folder}: {e}"
            raise IngestionError(msg) from e
        x = torch.from_numpy(ds.data).permute(0, 3, 1, 2).float().div_(255.0)
        y = torch.as_tensor(ds.targets, dtype=torch.int64)
        split = "train" if train else "test"
        return _tensor_set(x, y, len(ds.classes), name, split, spec)

    return _load


def _folder_loader(
    root: Path,
    train: bool,  # noqa: FBT001
    spec: SplitSpec,
    seed: int,  # noqa: ARG001
) -> FolderDataset:
    from torchvision import datasets, transforms

    folder = root / ("train" if train else "val")
    mean, std = _normalization("folder", 3, spec)
    transform = transforms.Compose(
        [
            transforms.Resize(math.ceil(spec.image_size * 8 / 7)),
            transforms.CenterCrop(spec.image_size),
            transforms.ToTensor(),
            transforms.Normalize(mean, std),
        ],
    )
    try:
        ds = datasets.ImageFolder(str(folder), transform=transform)
    except OSError as e:
        msg = f"Cannot read image folder {folder}: {e}"
        raise IngestionError(msg) from e
    return FolderDataset(
        folder=ds,
        indices=tuple(range(len(ds))),
        num_classes=len(ds.classes),
        split="train" if train else "test",
        sample_shape=(3, spec.image_size, spec.image_size),
        mean=mean,
        std=std,
    )


def synthetic_params(params: dict[str, Any]) -> dict[str, Any]:
    """Synthetic dataset parameters with defaults filled in."""
    merged = {**SYNTHETIC_DEFAULTS, **params}
    merged["input_shape"] = tuple(int(d) for d in merged["input_shape"])
    return merged


def _synthetic_loader(
    root: Path,  # noqa: ARG001
    train: bool,  # noqa: FBT001
    spec: SplitSpec,
    seed: int,
) -> LabeledDataset:
    params = synthetic_params(dict(spec.synthetic))
    m = int(params["m"])
    if not train:
        m = spec.test_limit or m
    x, y, classes = synthetic_samples(
        m,
        int(params["classes"]),
        params["input_shape"],
        seed,
        noise=float(params["noise"]),
        offset=0 if train else 1,
    )
    split = "train" if train else "test"
    return _tensor_set(x, y, classes, "synthetic", split, spec)


def synthetic_samples(  # noqa: PLR0913
    m: int,
    classes: int,
    input_shape: tuple[int, ...],
    seed: int,
    *,
    noise: float = 0.5,
    offset: int = 0,
) -> tuple[torch.Tensor, torch.Tensor, int]:
    """Generate a linearly separable classification set.

    Class ``k`` is centred on the signed axis ``(k // 2) mod D`` of the
    flattened input space at distance ``4 * (1 + k // (2D))``, with isotropic
    Gaussian noise. ``offset`` selects an independent sample stream with the
    same class centres (0 for train, 1 for test).

    Returns:
        (x, y, classes)

    """
    dim = math.prod(input_shape)
    centres = torch.zeros(classes, dim)
    for k in range(classes):
        axis = (k // 2) % dim
        sign = 1.0 if k % 2 == 0 else -1.0
        centres[k, axis] = sign * SYNTHETIC_RADIUS * (1 + k // (2 * dim))
    generator = torch.Generator().manual_seed(seed * 2 + offset)
    y = torch.arange(m) % classes
    y = y[torch.randperm(m, generator=generator)]
    x = centres[y] + noise * torch.randn(m, dim, generator=generator)
    return x.reshape(m, *input_shape), y, classes


# Registry of loaders by dataset name
_LOADERS: dict[str, _Loader] = {
    "cifar10": _cifar_loader("cifar10", "CIFAR10"),
    "cifar100": _cifar_loader("cifar100", "CIFAR100"),
    "folder": _folder_loader,
    "synthetic": _synthetic_loader,
}
DATASETS: tuple[str, ...] = tuple(_LOADERS)


def _limit(count: int, limit: int | None, seed: int) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    order = torch.randperm(count, generator=generator)
    if limit is not None and limit < count:
        order = order[:limit]
    return order.sort().values


def load_dataset(
    name: DatasetName,
    root_path: str | Path | None,
    split_spec: SplitSpec,
    seed: int,
) -> SampleSet:
    """Load, normalize and split a dataset.

    The validation split is carved from the (optionally limited) training
    pool by a seeded permutation; ``train`` returns the remainder, so the two
    are disjoint.

    Args:
        name: cifar10, cifar100, synthetic or folder
        root_path: Dataset root directory (ignored for synthetic)
        split_spec: Split selection and carving parameters
        seed: Seed for subsets, carving and synthetic generation

    Returns:
        The requested split

    Raises:
        ArgumentError: If the dataset name is unknown
        IngestionError: If files are missing or corrupt

    """
    if name not in _LOADERS:
        supported = ", ".join(_LOADERS)
        msg = f"Unsupported dataset: {name}. Supported datasets: {supported}"
        raise ArgumentError(msg)
    root = Path(root_path) if root_path is not None else Path()
    train_pool = split_spec.split in ("train", "val")
    full = _LOADERS[name](root, train_pool, split_spec, seed)
    if not train_pool:
        return full.subset(_limit(full.m, split_spec.test_limit, seed), "test")

    pool = full.subset(_limit(full.m, split_spec.train_limit, seed))
    n_val = round(pool.m * split_spec.val_fraction)
    order = torch.randperm(pool.m, generator=torch.Generator().manual_seed(seed + 1))
    if split_spec.split == "val":
        if n_val == 0:
            msg = "val split requested but val_fraction is 0"
            raise ArgumentError(msg)
        return pool.subset(order[:n_val].sort().values, "val")
    dataset = pool.subset(order[n_val:].sort().values, "train")
    logger.info("Loaded %s: %d samples", dataset.dataset_id, dataset.m)
    return dataset
