"""Restartable pipeline steps: train, score, prune, finetune, report, interpret.

Each step reads its inputs from and writes its outputs to the run directory
``output_dir/<config_hash>-s<seed>/``, so any step can be rerun on its own
once its upstream artifacts exist.
"""

import logging
import math
from collections.abc import Callable
from pathlib import Path
from typing import Any

import torch
import yaml
from tqdm import tqdm

from srprune.charts import plot_estimation_accuracy, plot_profile
from srprune.config import SUGGEST, PipelineConfig
from srprune.datasets import SampleSet, load_dataset
from srprune.db import init_db, save_report, save_run, save_unit_drops
from srprune.errors import DependencyError, InsufficientDataError
from srprune.interpret import compare_variants, export_map_csv, render_panel
from srprune.metrics import emit_report, model_stats
from srprune.netcore import (
    ResidualNet,
    build_model,
    enumerate_prunable_units,
    from_torchvision,
    load_checkpoint,
    remove_units,
    save_checkpoint,
)
from srprune.schema import DropProfile, PruneDecision
from srprune.srinit import (
    drop_profile,
    read_decision,
    read_profile,
    select_layers,
    suggest_threshold,
    write_decision,
    write_profile,
    write_profile_csv,
)
from srprune.trainer import EpochRecord, finetune, train, write_history_csv

logger = logging.getLogger(__name__)

STEPS = ("train", "score", "prune", "finetune", "report", "interpret")

ARTIFACTS = {
    "config": "config.yaml",
    "baseline": "baseline.pt",
    "history_train": "history_train.csv",
    "profile": "profile.yaml",
    "profile_csv": "profile.csv",
    "decision": "decision.yaml",
    "pruned": "pruned.pt",
    "finetuned": "finetuned.pt",
    "history_finetune": "history_finetune.csv",
    "report": "report.yaml",
    "interpret": "interpret.yaml",
    "figures": "figures",
}

# Which step writes each artifact a later step depends on
PRODUCED_BY = {
    "baseline": "train",
    "profile": "score",
    "decision": "prune",
    "pruned": "prune",
    "finetuned": "finetune",
}

# Base accuracy below this multiple of chance level is flagged in reports
NEAR_CHANCE_FACTOR = 1.5


class Pipeline:
    """Runs pipeline steps for one validated configuration."""

    def __init__(
        self,
        config: PipelineConfig,
        *,
        progress: bool = False,
        ledger: bool = True,
    ) -> None:
        """Bind a configuration.

        Args:
            config: Validated configuration
            progress: Show tqdm bars for epochs and scored units
            ledger: Record score/prune/report results in the run ledger

        """
        self.config = config
        self.run_dir = config.run_dir
        self.progress = progress
        self.ledger = ledger
        self._datasets: dict[str, SampleSet] = {}
        if ledger:
            init_db()

    @property
    def run_key(self) -> str:
        """Ledger key of this run (the run directory name)."""
        return self.run_dir.name

    def path(self, artifact: str) -> Path:
        """Location of an artifact inside the run directory."""
        return self.run_dir / ARTIFACTS[artifact]

    def require(self, artifact: str) -> Path:
        """Location of an upstream artifact.

        Raises:
            DependencyError: If the artifact has not been produced yet

        """
        path = self.path(artifact)
        if not path.exists():
            raise DependencyError(path, PRODUCED_BY[artifact])
        return path

    def dataset(self, split: str) -> SampleSet:
        """Load (once) one split of the configured dataset."""
        if split not in self._datasets:
            section = self.config.dataset
            self._datasets[split] = load_dataset(
                section.name,
                section.root,
                section.split_spec(split),
                self.config.seed,
            )
        return self._datasets[split]

    def _val_dataset(self) -> SampleSet | None:
        return self.dataset("val") if self.config.dataset.val_fraction > 0 else None

    def _epoch_callback(self, label: str, epochs: int) -> tuple[Callable, Callable]:
        bar = tqdm(total=epochs, desc=label, unit="epoch", disable=not self.progress)

        def _on_epoch(record: EpochRecord) -> None:
            bar.set_postfix(
                loss=f"{record.train_loss:.3f}",
                acc=f"{record.train_acc:.3f}",
            )
            bar.update(1)

        return _on_epoch, bar.close

    def _write_config_snapshot(self) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        snapshot = self.config.hashed_content()
        snapshot["seed"] = self.config.seed
        snapshot["config_hash"] = self.config.config_hash
        with self.path("config").open("w") as f:
            yaml.safe_dump(snapshot, f, sort_keys=False)

    def _figure_paths(self, stem: str) -> list[Path]:
        figures = self.path("figures")
        return [figures / f"{stem}.{fmt}" for fmt in self.config.figure_formats]

    def step_train(self) -> ResidualNet:
        """Train (or import) the baseline model and save its checkpoint."""
        self._write_config_snapshot()
        config = self.config
        if config.train_source == "torchvision":
            from torchvision.models import ResNet50_Weights, resnet50

            tv_model = resnet50(weights=ResNet50_Weights.DEFAULT)
            model = from_torchvision(tv_model, input_size=config.spec.input_shape[1])
            history: list[EpochRecord] = []
        else:
            model = build_model(config.spec, config.seed)
            on_epoch, close = self._epoch_callback("train", config.train.epochs)
            try:
                model, history = train(
                    model,
                    self.dataset("train"),
                    config.train,
                    val_dataset=self._val_dataset(),
                    on_epoch=on_epoch,
                )
            finally:
                close()
        save_checkpoint(model, self.path("baseline"))
        write_history_csv(history, self.path("history_train"))
        logger.info("Baseline saved to %s", self.path("baseline"))
        return model

    def step_score(self) -> DropProfile:
        """Compute and save the drop profile of the baseline."""
        model = load_checkpoint(self.require("baseline"))
        dataset = self.dataset(self.config.srinit.eval_split)
        bar = tqdm(total=model.n, desc="score", unit="unit", disable=not self.progress)
        try:
            profile = drop_profile(
                model,
                dataset,
                self.config.srinit.seeds,
                units_parallel=self.config.srinit.units_parallel,
                on_unit_done=lambda _unit: bar.update(1),
            )
        finally:
            bar.close()
        if self.near_chance(profile.base_accuracy):
            logger.warning(
                "Base accuracy %.4f is near chance for %d classes",
                profile.base_accuracy,
                self.config.spec.num_classes,
            )
        write_profile(profile, self.path("profile"))
        write_profile_csv(profile, self.path("profile_csv"))
        t_err = self.config.srinit.t_err
        for out in self._figure_paths("profile"):
            plot_profile(profile, None if t_err == SUGGEST else t_err, out)
        for out in self._figure_paths("estimation_accuracy"):
            plot_estimation_accuracy(profile, out)
        if self.ledger:
            save_run(
                run_key=self.run_key,
                arch=self.config.arch_name,
                dataset=profile.dataset_id,
                seed=self.config.seed,
                base_accuracy=profile.base_accuracy,
            )
            save_unit_drops(self.run_key, profile)
        return profile

    def near_chance(self, accuracy: float) -> bool:
        """Whether ``accuracy`` is within `NEAR_CHANCE_FACTOR` of chance level."""
        return accuracy < NEAR_CHANCE_FACTOR / self.config.spec.num_classes

    def _threshold(self, profile: DropProfile) -> tuple[float, str, float | None]:
        t_err = self.config.srinit.t_err
        if t_err == SUGGEST:
            suggested = suggest_threshold(profile)
            return suggested, "suggest", suggested
        try:
            suggested = suggest_threshold(profile)
        except InsufficientDataError:
            suggested = None
        return float(t_err), "explicit", suggested

    def step_prune(self) -> PruneDecision:
        """Select units under the threshold and remove them from the baseline."""
        profile = read_profile(self.require("profile"))
        model = load_checkpoint(self.require("baseline"))
        t_err, source, suggested = self._threshold(profile)
        decision = select_layers(
            profile,
            t_err,
            enumerate_prunable_units(model),
            threshold_source=source,
            suggested_threshold=suggested,
        )
        pruned = remove_units(model, decision.selected)
        save_checkpoint(pruned, self.path("pruned"))
        write_decision(decision, self.path("decision"))
        for out in self._figure_paths("profile"):
            plot_profile(profile, t_err, out)
        logger.info(
            "t_err=%.4f (%s): pruning units %s, %d left",
            t_err,
            source,
            sorted(decision.selected),
            pruned.n,
        )
        if self.ledger:
            save_run(
                run_key=self.run_key,
                arch=self.config.arch_name,
                dataset=profile.dataset_id,
                seed=self.config.seed,
                base_accuracy=profile.base_accuracy,
                t_err=t_err,
            )
            save_unit_drops(self.run_key, profile, decision.selected)
        return decision

    def step_finetune(self) -> ResidualNet:
        """Fine-tune the pruned model and save it."""
        pruned = load_checkpoint(self.require("pruned"))
        on_epoch, close = self._epoch_callback("finetune", self.config.finetune.epochs)
        try:
            tuned, history = finetune(
                pruned,
                self.dataset("train"),
                self.config.finetune,
                val_dataset=self._val_dataset(),
                on_epoch=on_epoch,
            )
        finally:
            close()
        save_checkpoint(tuned, self.path("finetuned"))
        write_history_csv(history, self.path("history_finetune"))
        return tuned

    def step_report(self) -> dict[str, Any]:
        """Compare the baseline and the fine-tuned model on the test split."""
        profile = read_profile(self.require("profile"))
        decision = read_decision(self.require("decision"))
        baseline = load_checkpoint(self.require("baseline"))
        tuned = load_checkpoint(self.require("finetuned"))
        test = self.dataset("test")
        input_shape = self.config.spec.input_shape
        baseline_stats = model_stats(baseline, input_shape, test)
        pruned_stats = model_stats(tuned, input_shape, test)
        extra = {
            "arch": self.config.arch_name,
            "config_hash": self.config.config_hash,
            "seed": self.config.seed,
            "eval_dataset": profile.dataset_id,
            "test_dataset": test.dataset_id,
            "base_accuracy_near_chance": self.near_chance(profile.base_accuracy),
        }
        report = emit_report(
            profile,
            decision,
            baseline_stats,
            pruned_stats,
            self.path("report"),
            extra=extra,
        )
        if self.ledger:
            save_report(self.run_key, report)
        logger.info(
            "params PR %.2f%%, FLOPs PR %.2f%%, accuracy %+.2f points",
            report.params_pr,
            report.flops_pr,
            report.accuracy_delta,
        )
        with self.path("report").open() as f:
            return yaml.safe_load(f)

    def step_interpret(self) -> dict[str, Any]:
        """Grad-CAM and guided backprop of the original and extreme-drop variants."""
        profile = read_profile(self.require("profile"))
        model = load_checkpoint(self.require("baseline"))
        test = self.dataset("test")
        section = self.config.interpret
        figures = self.path("figures")
        samples = []
        for index in range(min(section.samples, test.m)):
            image, label = test[index]
            comparison = compare_variants(
                model,
                profile,
                image,
                int(label),
                profile.seeds[0],
                section.target_unit,
            )
            names = list(comparison.cams)
            for out in self._figure_paths(f"interpret_{index}"):
                render_panel(
                    [image] * len(names),
                    [comparison.cams[n] for n in names],
                    [comparison.saliencies[n] for n in names],
                    comparison.captions(),
                    out,
                )
            for name in names:
                export_map_csv(
                    comparison.cams[name].values,
                    figures / f"cam_{index}_{name}.csv",
                )
            samples.append(
                {
                    "index": index,
                    "label": int(label),
                    "low_drop_unit": comparison.unit_ids["low_drop"],
                    "high_drop_unit": comparison.unit_ids["high_drop"],
                    "iou_low": comparison.iou("low_drop", section.top_fraction),
                    "iou_high": comparison.iou("high_drop", section.top_fraction),
                },
            )
        summary = {
            "top_fraction": section.top_fraction,
            "samples": samples,
            "mean_iou_low": _mean([s["iou_low"] for s in samples]),
            "mean_iou_high": _mean([s["iou_high"] for s in samples]),
        }
        self.run_dir.mkdir(parents=True, exist_ok=True)
        with self.path("interpret").open("w") as f:
            yaml.safe_dump(summary, f, sort_keys=False)
        return summary

    def run(self, step: str) -> None:
        """Run one step, or every step in order for ``all``."""
        steps = STEPS if step == "all" else (step,)
        handlers = {name: getattr(self, f"step_{name}") for name in STEPS}
        for name in steps:
            logger.info("Running %s in %s", name, self.run_dir)
            with torch.random.fork_rng(devices=[]):
                handlers[name]()


def _mean(values: list[float]) -> float | None:
    return math.fsum(values) / len(values) if values else None
