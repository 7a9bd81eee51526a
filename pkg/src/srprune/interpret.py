"""Grad-CAM and guided backpropagation for comparing model variants.

Both maps are computed with ``torch.autograd.grad`` against the activation
(or input) only, so parameters and their ``.grad`` fields are left as they
were.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import matplotlib as mpl

mpl.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
import torch.nn.functional as F  # noqa: E402
from torch import nn  # noqa: E402

from srprune.errors import ArgumentError  # noqa: E402
from srprune.netcore import ResidualNet  # noqa: E402
from srprune.schema import DropProfile  # noqa: E402
from srprune.srinit import rebuild_with, reinit_unit  # noqa: E402

logger = logging.getLogger(__name__)

DEFAULT_TOP_FRACTION = 0.1
VARIANTS = ("original", "low_drop", "high_drop")
CAM_ALPHA = 0.45
CAM_COLORMAP = "jet"

ERR_PANEL_LENGTHS = "images, cams, saliencies and captions must have equal lengths"


@dataclass(frozen=True, eq=False)
class CamMap:
    """Class activation map with values in [0, 1]."""

    values: np.ndarray  # (H, W)
    target_layer: int
    target_class: int
    source_image: str = ""


@dataclass(frozen=True, eq=False)
class SaliencyMap:
    """Guided-backprop input gradient, shaped like the image."""

    values: np.ndarray  # (C, H, W)
    target_class: int

    def magnitude(self) -> np.ndarray:
        """Per-pixel max absolute gradient over channels, shape (H, W)."""
        return np.abs(self.values).max(axis=0)


def normalize_map(cam: torch.Tensor) -> torch.Tensor:
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    low, high = cam.min(), cam.max()
    if not high > low:
        return torch.zeros_like(cam)
    return (cam - low) / (high - low)


def cam_from_tensors(activations: torch.Tensor, gradients: torch.Tensor) -> np.ndarray:
    """Grad-CAM of one sample from (C, H, W) activations and their gradients.

    Channel weights are the spatial means of the gradients; the weighted
    channel sum is rectified and then normalized.
    """
    if activations.dim() != 3 or activations.shape != gradients.shape:  # noqa: PLR2004
        msg = (
            "activations and gradients must both be (C, H, W), got "
            f"{tuple(activations.shape)} and {tuple(gradients.shape)}"
        )
        raise ArgumentError(msg)
    weights = gradients.mean(dim=(1, 2))
    cam = F.relu((weights[:, None, None] * activations).sum(dim=0))
    return normalize_map(cam).detach().cpu().numpy()


def _check_image(model: nn.Module, image: torch.Tensor) -> torch.Tensor:
    spec = getattr(model, "spec", None)
    if spec is not None and tuple(image.shape) != spec.input_shape:
        msg = f"image has shape {tuple(image.shape)}, model expects {spec.input_shape}"
        raise ArgumentError(msg)
    param = next(model.parameters())
    return image.detach().to(param.device, param.dtype).unsqueeze(0)


def grad_cam(
    model: ResidualNet,
    image: torch.Tensor,
    target_class: int,
    target_unit: int | None = None,
    *,
    upsample: bool = True,
    source_image: str = "",
) -> CamMap:
    """Grad-CAM of ``target_class`` on the output of one unit.

    Args:
        model: Model to explain (evaluated in eval mode, then restored)
        image: One sample, (C, H, W)
        target_class: Class whose logit is explained
        target_unit: Unit whose output is used; defaults to the last unit
        upsample: Bilinear upsampling to the image size (renormalized)
        source_image: Identifier stored on the map

    Returns:
        The normalized map

    Raises:
        ArgumentError: If the target unit's output is not spatial, or the
            image or class does not fit the model

    """
    unit_id = model.unit_ids[-1] if target_unit is None else target_unit
    block = model.unit(unit_id)
    x = _check_image(model, image)
    captured: list[torch.Tensor] = []
    handle = block.register_forward_hook(lambda _m, _i, out: captured.append(out))
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            logits = model(x)
            if not 0 <= target_class < logits.shape[1]:
                msg = f"target_class {target_class} outside [0, {logits.shape[1]})"
                raise ArgumentError(msg)
            activation = captured[0]
            if activation.dim() != 4:  # noqa: PLR2004
                msg = f"unit {unit_id} output is not spatial: {tuple(activation.shape)}"
                raise ArgumentError(msg)
            (gradients,) = torch.autograd.grad(logits[0, target_class], activation)
    finally:
        handle.remove()
        model.train(was_training)

    values = torch.from_numpy(cam_from_tensors(activation[0].detach(), gradients[0]))
    if upsample and values.shape != x.shape[-2:]:
        values = F.interpolate(
            values[None, None],
            size=tuple(x.shape[-2:]),
            mode="bilinear",
            align_corners=False,
        )[0, 0]
        values = normalize_map(values)
    return CamMap(
        values=values.numpy(),
        target_layer=unit_id,
        target_class=target_class,
        source_image=source_image,
    )


def _guided_relu_hook(
    _module: nn.Module,
    grad_input: tuple[torch.Tensor, ...],
    _grad_output: tuple[torch.Tensor, ...],
) -> tuple[torch.Tensor, ...]:
    # ReLU's own backward already zeroes positions with a non-positive input
    return (torch.clamp(grad_input[0], min=0.0),)


def guided_backprop(
    model: nn.Module,
    image: torch.Tensor,
    target_class: int,
) -> SaliencyMap:
    """Input gradient of the class logit with guided ReLU backward passes.

    The backward signal through every ``nn.ReLU`` is zeroed where the forward
    input or the incoming gradient is negative. Without ReLU modules this is
    the plain input gradient.

    Raises:
        ArgumentError: If the image or class does not fit the model

    """
    x = _check_image(model, image).requires_grad_(True)
    relus = [m for m in model.modules() if isinstance(m, nn.ReLU)]
    handles = [m.register_full_backward_hook(_guided_relu_hook) for m in relus]
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            logits = model(x)
            if not 0 <= target_class < logits.shape[1]:
                msg = f"target_class {target_class} outside [0, {logits.shape[1]})"
                raise ArgumentError(msg)
            (gradient,) = torch.autograd.grad(logits[0, target_class], x)
    finally:
        for handle in handles:
            handle.remove()
        model.train(was_training)
    values = gradient[0].detach().cpu().numpy()
    return SaliencyMap(values=values, target_class=target_class)


def cam_iou(a: CamMap, b: CamMap, top_fraction: float = DEFAULT_TOP_FRACTION) -> float:
    """Intersection over union of the top ``top_fraction`` pixels of two maps.

    Ties are broken by pixel order, so the top set always holds exactly
    ``ceil(top_fraction * pixels)`` pixels.
    """
    if a.values.shape != b.values.shape:
        msg = f"map shapes differ: {a.values.shape} vs {b.values.shape}"
        raise ArgumentError(msg)
    if not 0.0 < top_fraction <= 1.0:
        msg = f"top_fraction must lie in (0, 1], got {top_fraction}"
        raise ArgumentError(msg)
    count = max(1, math.ceil(top_fraction * a.values.size))

    def _top(values: np.ndarray) -> set[int]:
        order = np.argsort(-values.ravel(), kind="stable")
        return set(order[:count].tolist())

    top_a, top_b = _top(a.values), _top(b.values)
    return len(top_a & top_b) / len(top_a | top_b)


@dataclass(frozen=True)
class VariantComparison:
    """Maps of the original model and its lowest/highest-drop estimation models."""

    unit_ids: dict[str, int | None]  # re-initialized unit per variant
    accuracies: dict[str, float]
    cams: dict[str, CamMap]
    saliencies: dict[str, SaliencyMap]

    def iou(self, variant: str, top_fraction: float = DEFAULT_TOP_FRACTION) -> float:
        """CAM agreement between the original model and ``variant``."""
        return cam_iou(self.cams["original"], self.cams[variant], top_fraction)

    def captions(self) -> list[str]:
        """One caption per variant, in `VARIANTS` order."""
        captions = []
        for name in VARIANTS:
            unit = self.unit_ids[name]
            label = name if unit is None else f"{name} (unit {unit})"
            captions.append(f"{label}: {100 * self.accuracies[name]:.2f}%")
        return captions


def compare_variants(  # noqa: PLR0913
    model: ResidualNet,
    profile: DropProfile,
    image: torch.Tensor,
    target_class: int,
    seed: int,
    target_unit: int | None = None,
) -> VariantComparison:
    """Explain the original model and the estimation models at both drop extremes.

    The lowest- and highest-drop units are taken over every unit of the
    profile (ties go to the lowest id); their estimation models are rebuilt
    with the same seed that produced the profile.
    """
    low = min(profile.drops, key=lambda d: (d.drop, d.unit_id))
    high = min(profile.drops, key=lambda d: (-d.drop, d.unit_id))

    def _estimation(unit_id: int) -> ResidualNet:
        return rebuild_with(model, unit_id, reinit_unit(model.unit(unit_id), seed))

    models = {
        "original": model,
        "low_drop": _estimation(low.unit_id),
        "high_drop": _estimation(high.unit_id),
    }
    cams = {
        name: grad_cam(variant, image, target_class, target_unit, source_image=name)
        for name, variant in models.items()
    }
    saliencies = {
        name: guided_backprop(variant, image, target_class)
        for name, variant in models.items()
    }
    logger.debug("low-drop unit %d, high-drop unit %d", low.unit_id, high.unit_id)
    return VariantComparison(
        unit_ids={"original": None, "low_drop": low.unit_id, "high_drop": high.unit_id},
        accuracies={
            "original": profile.base_accuracy,
            "low_drop": low.est_accuracy,
            "high_drop": high.est_accuracy,
        },
        cams=cams,
        saliencies=saliencies,
    )


def export_map_csv(values: np.ndarray, path: str | Path) -> None:
    """Write a 2-D map as comma-separated rows of full-precision floats."""
    values = np.asarray(values)
    if values.ndim != 2:  # noqa: PLR2004
        msg = f"only 2-D maps can be exported, got shape {values.shape}"
        raise ArgumentError(msg)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, values, delimiter=",", fmt="%.17g")


def _display_image(image: torch.Tensor | np.ndarray) -> np.ndarray:
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu()
    array = np.asarray(image)
    array = array.astype(np.float64)
    low, high = array.min(), array.max()
    array = (array - low) / (high - low) if high > low else np.zeros_like(array)
    if array.ndim == 3:  # noqa: PLR2004
        array = array[0] if array.shape[0] == 1 else np.transpose(array, (1, 2, 0))
    return array


def render_panel(
    images: list[torch.Tensor],
    cams: list[CamMap],
    saliencies: list[SaliencyMap | None],
    captions: list[str],
    out_path: str | Path,
) -> Path:
    """Save a grid with one column per variant.

    The first row overlays each CAM on its image, the second shows the
    guided-backprop magnitude (omitted when every saliency is None).

    Raises:
        ArgumentError: If the lists differ in length or are empty

    """
    if not images or not len(images) == len(cams) == len(saliencies) == len(captions):
        raise ArgumentError(ERR_PANEL_LENGTHS)
    with_saliency = any(s is not None for s in saliencies)
    rows, cols = (2 if with_saliency else 1), len(images)
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 3 * rows), squeeze=False)
    for col, (image, cam, saliency, caption) in enumerate(
        zip(images, cams, saliencies, captions, strict=True),
    ):
        background = _display_image(image)
        ax = axes[0][col]
        cmap = "gray" if background.ndim == 2 else None  # noqa: PLR2004
        ax.imshow(background, cmap=cmap)
        ax.imshow(cam.values, cmap=CAM_COLORMAP, alpha=CAM_ALPHA, vmin=0.0, vmax=1.0)
        ax.set_title(caption, fontsize=9)
        ax.axis("off")
        if with_saliency:
            ax = axes[1][col]
            if saliency is not None:
                ax.imshow(_display_image(saliency.magnitude()), cmap="gray")
            ax.axis("off")
    axes[0][0].set_ylabel("Grad-CAM")
    if with_saliency:
        axes[1][0].set_ylabel("Guided backprop")
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path
