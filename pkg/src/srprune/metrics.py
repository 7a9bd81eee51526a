"""Parameter/FLOP accounting, pruning rates and result reports.

FLOPs are counted as multiply-accumulates (one multiply-add = 1) for a
single input sample:

- Conv2d: ``out_c * (in_c / groups) * k_h * k_w * out_h * out_w``
- Linear: ``in_features * out_features``

Normalization, activation, pooling and residual additions are excluded
unless ``include_elementwise`` is set, in which case batch norm counts
``2 * numel(output)``, ReLU ``numel(output)`` and pooling ``numel(input)``.
Bias additions are never counted.
"""

import math
from collections import defaultdict
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import torch
import yaml
from torch import nn

from srprune.datasets import SampleSet
from srprune.errors import ArgumentError
from srprune.schema import (
    DepthDiagnostic,
    DropProfile,
    ModelStats,
    PruneDecision,
    PruneReport,
    from_json,
    to_json,
)
from srprune.srinit import predict_top1, write_profile_csv

FLOP_CONVENTION = "MAC"
_POOL_TYPES = (nn.MaxPool2d, nn.AvgPool2d, nn.AdaptiveAvgPool2d)
_NORM_TYPES = (nn.BatchNorm1d, nn.BatchNorm2d)


def count_params(model: nn.Module) -> int:
    """Number of trainable scalars, norm affine parameters and biases included."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def _module_macs(
    module: nn.Module,
    inputs: tuple[torch.Tensor, ...],
    output: torch.Tensor,
    *,
    include_elementwise: bool,
) -> int:
    if isinstance(module, nn.Conv2d):
        out_c, out_h, out_w = output.shape[1:]
        k_h, k_w = module.kernel_size
        in_per_group = module.in_channels // module.groups
        return out_c * in_per_group * k_h * k_w * out_h * out_w
    if isinstance(module, nn.Linear):
        return module.in_features * module.out_features
    if not include_elementwise:
        return 0
    if isinstance(module, _NORM_TYPES):
        return 2 * output[0].numel()
    if isinstance(module, nn.ReLU):
        return output[0].numel()
    if isinstance(module, _POOL_TYPES):
        return inputs[0][0].numel()
    return 0


def _owner_map(model: nn.Module) -> dict[nn.Module, int | None]:
    owners: dict[nn.Module, int | None] = {}
    units = getattr(model, "units", None)
    if isinstance(units, nn.ModuleDict):
        for block in units.values():
            for sub in block.modules():
                owners[sub] = block.unit_id
    return owners


def _count_macs(
    model: nn.Module,
    input_shape: tuple[int, ...],
    *,
    include_elementwise: bool,
) -> dict[int | None, int]:
    if len(input_shape) != 3 or any(d <= 0 for d in input_shape):  # noqa: PLR2004
        msg = f"input_shape must be (channels, height, width), got {input_shape}"
        raise ArgumentError(msg)
    owners = _owner_map(model)
    totals: dict[int | None, int] = defaultdict(int)

    def _hook(module: nn.Module, inputs: tuple, output: torch.Tensor) -> None:
        totals[owners.get(module)] += _module_macs(
            module,
            inputs,
            output,
            include_elementwise=include_elementwise,
        )

    leaves = [m for m in model.modules() if not list(m.children())]
    handles = [m.register_forward_hook(_hook) for m in leaves]
    param = next(model.parameters())
    was_training = model.training
    try:
        model.eval()
        with torch.no_grad():
            zeros = torch.zeros(
                (1, *input_shape), dtype=param.dtype, device=param.device
            )
            model(zeros)
    except RuntimeError as e:
        msg = f"Input shape {input_shape} is incompatible with the model: {e}"
        raise ArgumentError(msg) from e
    finally:
        for handle in handles:
            handle.remove()
        model.train(was_training)
    return dict(totals)


def count_flops(
    model: nn.Module,
    input_shape: tuple[int, ...],
    *,
    include_elementwise: bool = False,
) -> int:
    """Multiply-accumulate count of one forward pass on one sample.

    Raises:
        ArgumentError: If ``input_shape`` cannot be fed to the model

    """
    totals = _count_macs(model, input_shape, include_elementwise=include_elementwise)
    return sum(totals.values())


def unit_costs(
    model: nn.Module,
    input_shape: tuple[int, ...],
    *,
    include_elementwise: bool = False,
) -> dict[int, tuple[int, int]]:
    """Closed-form (params, MACs) of every present unit."""
    totals = _count_macs(model, input_shape, include_elementwise=include_elementwise)
    return {
        block.unit_id: (count_params(block), totals.get(block.unit_id, 0))
        for block in model.units.values()
    }


def model_stats(
    model: nn.Module,
    input_shape: tuple[int, int, int],
    dataset: SampleSet | None = None,
    *,
    accuracy: float | None = None,
) -> ModelStats:
    """Accuracy (on ``dataset`` unless given) plus parameter and MAC counts."""
    if accuracy is None:
        accuracy = predict_top1(model, dataset)[0] if dataset is not None else 0.0
    return ModelStats(
        top1_accuracy=accuracy,
        params=count_params(model),
        flops=count_flops(model, input_shape),
        input_shape=input_shape,
    )


def pruning_rates(baseline: ModelStats, pruned: ModelStats) -> tuple[float, float]:
    """Percentage reduction of parameters and FLOPs relative to the baseline.

    Raises:
        ArgumentError: If the baseline has zero parameters or FLOPs

    """
    if baseline.params <= 0 or baseline.flops <= 0:
        msg = "baseline params and flops must be > 0 to compute pruning rates"
        raise ArgumentError(msg)
    params_pr = 100.0 * (1.0 - pruned.params / baseline.params)
    flops_pr = 100.0 * (1.0 - pruned.flops / baseline.flops)
    return params_pr, flops_pr


def depth_diagnostic(profile: DropProfile) -> DepthDiagnostic:
    """Mean drop of eligible units per stage.

    ``redundancy_at_end`` tells whether the last stage's eligible units drop
    less on average than the first stage's.
    """
    per_stage: dict[int, list[float]] = defaultdict(list)
    for entry in profile.drops:
        if entry.eligible:
            per_stage[entry.stage_id].append(entry.drop)
    means = {stage: math.fsum(v) / len(v) for stage, v in sorted(per_stage.items())}
    stages = sorted({d.stage_id for d in profile.drops})
    first, last = stages[0], stages[-1]
    if first == last or first not in means or last not in means:
        return DepthDiagnostic(stage_means=means, redundancy_at_end=None)
    return DepthDiagnostic(
        stage_means=means,
        redundancy_at_end=means[last] < means[first],
    )


def build_report(
    profile: DropProfile,
    decision: PruneDecision,
    baseline: ModelStats,
    pruned: ModelStats,
) -> PruneReport:
    """Assemble the report object without writing anything."""
    params_pr, flops_pr = pruning_rates(baseline, pruned)
    return PruneReport(
        baseline=baseline,
        pruned=pruned,
        params_pr=params_pr,
        flops_pr=flops_pr,
        accuracy_delta=100.0 * (pruned.top1_accuracy - baseline.top1_accuracy),
        decision=decision,
        profile=profile,
        flop_convention=FLOP_CONVENTION,
        depth=depth_diagnostic(profile),
    )


def report_document(report: PruneReport) -> dict[str, Any]:
    """Fixed-field summary written as the report document."""
    depth = report.depth
    return {
        "baseline_acc": report.baseline.top1_accuracy,
        "pruned_acc": report.pruned.top1_accuracy,
        "accuracy_delta": report.accuracy_delta,
        "params": {"baseline": report.baseline.params, "pruned": report.pruned.params},
        "flops": {"baseline": report.baseline.flops, "pruned": report.pruned.flops},
        "params_pr": report.params_pr,
        "flops_pr": report.flops_pr,
        "flop_convention": report.flop_convention,
        "input_shape": list(report.baseline.input_shape),
        "threshold": report.decision.threshold,
        "threshold_source": report.decision.threshold_source,
        "suggested_threshold": report.decision.suggested_threshold,
        "pruned_units": sorted(report.decision.selected),
        "skipped_incompatible": sorted(report.decision.skipped_incompatible),
        "base_accuracy_on_scoring_set": report.profile.base_accuracy,
        "profile_id": report.profile.profile_id,
        "depth_stage_means": dict(depth.stage_means) if depth else {},
        "redundancy_at_end": depth.redundancy_at_end if depth else None,
    }


def emit_report(  # noqa: PLR0913
    profile: DropProfile,
    decision: PruneDecision,
    baseline: ModelStats,
    pruned: ModelStats,
    out_path: str | Path,
    *,
    extra: Mapping[str, Any] | None = None,
) -> PruneReport:
    """Write the report document, its full JSON form and the profile CSV.

    Files written next to ``out_path`` (``report.yaml`` for instance):
    ``report.yaml`` (fixed-field summary), ``report.json`` (complete
    report, readable with `read_report`) and ``report_profile.csv``.

    Raises:
        OSError: If the location is not writable

    """
    report = build_report(profile, decision, baseline, pruned)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    document = report_document(report)
    if extra:
        document.update(extra)
    with out_path.open("w") as f:
        yaml.safe_dump(document, f, sort_keys=False)
    out_path.with_suffix(".json").write_text(to_json(report))
    write_profile_csv(profile, out_path.with_name(f"{out_path.stem}_profile.csv"))
    return report


def read_report(path: str | Path) -> PruneReport:
    """Read the JSON form written by `emit_report`."""
    return from_json(Path(path).with_suffix(".json").read_text(), PruneReport)
