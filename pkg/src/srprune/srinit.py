"""Layer redundancy scoring by stochastic re-initialization.

For every unit f_i of a trained model, resample its parameters from the
Kaiming distribution, rebuild the model around the resampled unit, and
record how much top-1 accuracy the estimation model loses. Units whose
drop stays under the threshold t_err are candidates for removal.
"""

import copy
import csv
import logging
import math
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from itertools import pairwise
from pathlib import Path
from typing import Any

import numpy as np
import torch
import yaml
from torch import nn
from torch.utils.data import DataLoader

from srprune.datasets import SampleSet
from srprune.errors import ArgumentError, FormatError, InsufficientDataError
from srprune.netcore import ResidualNet, enumerate_prunable_units, kaiming_reset_
from srprune.schema import (
    DropProfile,
    PrunableUnit,
    PruneDecision,
    ThresholdSource,
    UnitDrop,
    from_dict,
    to_dict,
)

logger = logging.getLogger(__name__)

Bundle = dict[str, torch.Tensor]
ReinitFn = Callable[[nn.Module, int], Bundle]

PROFILE_CSV_FIELDS = ("unit_id", "stage", "eligible", "est_accuracy", "drop")
EVAL_BATCH_SIZE = 512
MIN_ELIGIBLE_FOR_SUGGESTION = 2


def unit_generator(seed: int, unit_id: int) -> torch.Generator:
    """RNG stream for one (seed, unit) pair.

    The stream depends only on the pair, never on evaluation order, so a
    profile is identical whether units are scored serially or in parallel.
    """
    if seed < 0 or unit_id < 0:
        msg = f"seed and unit_id must be >= 0, got {seed}/{unit_id}"
        raise ArgumentError(msg)
    state = np.random.SeedSequence([seed, unit_id]).generate_state(1, dtype=np.uint64)
    return torch.Generator().manual_seed(int(state[0]))


def reinit_unit(block: nn.Module, seed: int) -> Bundle:
    """Return a Kaiming re-initialized copy of a unit's parameter bundle.

    Weight tensors are drawn from N(0, 2 / fan_in) of that tensor; norm
    scale/shift are reset to 1/0, running statistics to mean 0 / variance 1,
    biases to 0. The source block is not modified.

    Args:
        block: A unit of a ResidualNet (carries ``unit_id``)
        seed: Draw seed

    Returns:
        The re-initialized state dict (empty for a parameterless unit)

    """
    fresh = copy.deepcopy(block)
    kaiming_reset_(fresh, unit_generator(seed, getattr(block, "unit_id", 0)))
    return fresh.state_dict()


def identity_reinit(block: nn.Module, seed: int) -> Bundle:  # noqa: ARG001
    """Substitute the unit's own parameters; every drop becomes 0."""
    return copy.deepcopy(block.state_dict())


def rebuild_with(model: ResidualNet, unit_id: int, bundle: Bundle) -> ResidualNet:
    """Build the estimation model: ``model`` with one unit's parameters replaced.

    Args:
        model: Source model, left unmodified
        unit_id: Unit to replace
        bundle: State dict for that unit

    Returns:
        An independent copy carrying ``bundle`` in unit ``unit_id``

    Raises:
        ArgumentError: If ``unit_id`` is not present in the model

    """
    model.unit(unit_id)  # raises on unknown ids before paying for the copy
    estimation = copy.deepcopy(model)
    estimation.unit(unit_id).load_state_dict(bundle)
    return estimation


@torch.no_grad()
def predict_top1(
    model: nn.Module,
    dataset: SampleSet,
    batch_size: int = EVAL_BATCH_SIZE,
) -> tuple[float, list[int]]:
    """Top-1 accuracy and predicted labels, evaluated in eval mode.

    Ties in argmax resolve to the lowest class index.

    Raises:
        ArgumentError: If sample shapes do not match the model's input shape

    """
    spec = getattr(model, "spec", None)
    if spec is not None and tuple(dataset.sample_shape) != spec.input_shape:
        msg = (
            f"Dataset samples have shape {tuple(dataset.sample_shape)}, "
            f"model expects {spec.input_shape}"
        )
        raise ArgumentError(msg)
    param = next(model.parameters())
    was_training = model.training
    model.eval()
    predictions: list[int] = []
    correct = 0
    try:
        for x_batch, y_batch in DataLoader(dataset, batch_size=batch_size):
            x = x_batch.to(param.device, param.dtype)
            predicted = model(x).argmax(dim=1).cpu()
            correct += int((predicted == y_batch).sum())
            predictions.extend(predicted.tolist())
    finally:
        model.train(was_training)
    return correct / len(dataset), predictions


def drop_profile(  # noqa: PLR0913
    model: ResidualNet,
    dataset: SampleSet,
    seeds: Sequence[int],
    *,
    units_parallel: int = 1,
    reinit: ReinitFn = reinit_unit,
    on_unit_done: Callable[[int], None] | None = None,
) -> DropProfile:
    """Score every unit by the accuracy drop of its estimation model.

    Args:
        model: Trained model, left bit-identical
        dataset: Evaluation set D
        seeds: One re-initialization draw per seed; estimation accuracies
            are averaged over draws
        units_parallel: Worker threads scoring units concurrently
        reinit: Bundle factory; `identity_reinit` turns scoring into a no-op
        on_unit_done: Called with each unit id once it is scored

    Returns:
        The drop profile covering every present unit

    Raises:
        ArgumentError: If ``seeds`` is empty or ``units_parallel`` < 1

    """
    if not seeds:
        msg = "drop_profile needs at least one seed"
        raise ArgumentError(msg)
    if units_parallel < 1:
        msg = f"units_parallel must be >= 1, got {units_parallel}"
        raise ArgumentError(msg)

    base_accuracy, _ = predict_top1(model, dataset)
    units = enumerate_prunable_units(model)
    model_mode = model.training
    model.eval()

    def _score(unit: PrunableUnit) -> UnitDrop:
        accuracies = []
        for seed in seeds:
            bundle = reinit(model.unit(unit.index), seed)
            estimation = rebuild_with(model, unit.index, bundle)
            accuracies.append(predict_top1(estimation, dataset)[0])
        est_accuracy = math.fsum(accuracies) / len(accuracies)
        if on_unit_done is not None:
            on_unit_done(unit.index)
        logger.debug("unit %d: est_accuracy=%.4f", unit.index, est_accuracy)
        return UnitDrop(
            unit_id=unit.index,
            stage_id=unit.stage_id,
            eligible=unit.identity_shortcut,
            est_accuracy=est_accuracy,
            drop=base_accuracy - est_accuracy,
        )

    try:
        if units_parallel == 1:
            drops = [_score(unit) for unit in units]
        else:
            with ThreadPoolExecutor(max_workers=units_parallel) as pool:
                drops = list(pool.map(_score, units))
    finally:
        model.train(model_mode)

    return DropProfile(
        base_accuracy=base_accuracy,
        drops=tuple(drops),
        dataset_id=dataset.dataset_id,
        sample_count=dataset.m,
        seeds=tuple(seeds),
    )


def select_layers(
    profile: DropProfile,
    t_err: float,
    units: Iterable[PrunableUnit],
    *,
    threshold_source: ThresholdSource = "explicit",
    suggested_threshold: float | None = None,
) -> PruneDecision:
    """Choose units whose drop is strictly below ``t_err``.

    Only identity-shortcut units can be selected; the others are reported in
    ``skipped_incompatible`` whatever their drop.

    Raises:
        ArgumentError: If ``t_err`` is not finite or the profile does not
            cover exactly the given units

    """
    if not math.isfinite(t_err):
        msg = f"t_err must be finite, got {t_err}"
        raise ArgumentError(msg)
    units = list(units)
    unit_ids = {u.index for u in units}
    if unit_ids != set(profile.unit_ids):
        msg = (
            f"Profile covers units {sorted(profile.unit_ids)} "
            f"but the model has {sorted(unit_ids)}"
        )
        raise ArgumentError(msg)

    selected, retained, skipped = set(), set(), set()
    for unit in units:
        if not unit.identity_shortcut:
            skipped.add(unit.index)
        elif profile.drop_of(unit.index) < t_err:
            selected.add(unit.index)
        else:
            retained.add(unit.index)
    return PruneDecision(
        threshold=t_err,
        selected=frozenset(selected),
        skipped_incompatible=frozenset(skipped),
        retained=frozenset(retained),
        profile_ref=profile.profile_id,
        threshold_source=threshold_source,
        suggested_threshold=suggested_threshold,
    )


def suggest_threshold(profile: DropProfile) -> float:
    """Advisory t_err: midpoint of the largest gap between sorted eligible drops.

    When all eligible drops are equal the gap is 0 and that common value is
    returned. The suggestion is never applied automatically.

    Raises:
        InsufficientDataError: If fewer than two units are eligible

    """
    values = sorted(profile.eligible_drops())
    if len(values) < MIN_ELIGIBLE_FOR_SUGGESTION:
        msg = (
            f"Need at least {MIN_ELIGIBLE_FOR_SUGGESTION} eligible units to "
            f"suggest a threshold, got {len(values)}"
        )
        raise InsufficientDataError(msg)
    gaps = [(b - a, i) for i, (a, b) in enumerate(pairwise(values))]
    _, at = max(gaps, key=lambda g: (g[0], -g[1]))
    return (values[at] + values[at + 1]) / 2


def write_profile_csv(profile: DropProfile, path: str | Path) -> None:
    """Write one CSV record per unit (unit_id, stage, eligible, est_accuracy, drop)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with Path(path).open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(PROFILE_CSV_FIELDS)
        for d in profile.drops:
            writer.writerow(
                [
                    d.unit_id,
                    d.stage_id,
                    int(d.eligible),
                    repr(d.est_accuracy),
                    repr(d.drop),
                ],
            )


def read_profile_csv(path: str | Path) -> list[UnitDrop]:
    """Read the per-unit records written by `write_profile_csv`."""
    with Path(path).open(newline="") as f:
        reader = csv.DictReader(f)
        return [
            UnitDrop(
                unit_id=int(row["unit_id"]),
                stage_id=int(row["stage"]),
                eligible=bool(int(row["eligible"])),
                est_accuracy=float(row["est_accuracy"]),
                drop=float(row["drop"]),
            )
            for row in reader
        ]


def _write_yaml(data: dict[str, Any], path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with Path(path).open("w") as f:
        yaml.safe_dump(data, f, sort_keys=False)


def _read_yaml(path: str | Path, kind: str) -> dict[str, Any]:
    try:
        with Path(path).open() as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        msg = f"Cannot parse {kind} file {path}: {e}"
        raise FormatError(msg) from e
    if not isinstance(data, dict):
        msg = f"{path} is not a {kind} file"
        raise FormatError(msg)
    return data


def write_profile(profile: DropProfile, path: str | Path) -> None:
    """Write the structured text form of a profile (metadata + unit records)."""
    data = to_dict(profile)
    data["profile_id"] = profile.profile_id
    data["trials_per_unit"] = profile.trials_per_unit
    _write_yaml(data, path)


def read_profile(path: str | Path) -> DropProfile:
    """Read a profile written by `write_profile`."""
    data = _read_yaml(path, "profile")
    data.pop("profile_id", None)
    data.pop("trials_per_unit", None)
    try:
        return from_dict(data, DropProfile)
    except (KeyError, TypeError) as e:
        msg = f"Malformed profile file {path}: {e}"
        raise FormatError(msg) from e


def write_decision(decision: PruneDecision, path: str | Path) -> None:
    """Write a pruning decision record."""
    _write_yaml(to_dict(decision), path)


def read_decision(path: str | Path) -> PruneDecision:
    """Read a decision written by `write_decision`."""
    data = _read_yaml(path, "decision")
    try:
        return from_dict(data, PruneDecision)
    except (KeyError, TypeError) as e:
        msg = f"Malformed decision file {path}: {e}"
        raise FormatError(msg) from e
