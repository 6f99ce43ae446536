"""
Experiment orchestration
Fine-tuning data assembly, multi-seed aggregation, the class-weight sweep and
the loss-regime comparison
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel

from highfm import config
from highfm.datapipe.container import Manifest
from highfm.datapipe.sampling import build_multi_timestep_set, fire_train_filter
from highfm.datapipe.scenes import PatchSample
from highfm.errors import ContractError
from highfm.harness.trainer import EvalReport, RunConfig, evaluate, fit
from highfm.mae.checkpoint import encoder_state, load_checkpoint
from highfm.mae.mae_model import ModelConfig
from highfm.metrics import format_mean_std, mean_std
from highfm.segmentation.seg_head import SegConfig, create_segmentation_model

logger = logging.getLogger(__name__)

Splits = Dict[str, List[PatchSample]]


def load_splits(manifest: Union[str, Path], timesteps: int = 1, task: str = "fire", build_seed: int = 0) -> Splits:
    """
    Verified samples per split.

    For T=3 one same-hour triple per location is drawn with build_seed; the
    fire task keeps only positive-containing training samples.
    """
    m = Manifest.read(manifest)
    splits: Splits = {}
    for index, name in enumerate(sorted(m.splits)):
        samples = m.load(name)
        if timesteps == 3:
            samples = build_multi_timestep_set(samples, np.random.default_rng([build_seed, index]))
        if task == "fire" and all(s.label is not None for s in samples):
            samples = fire_train_filter(samples, name)
        splits[name] = samples
        logger.info(f"split {name}: {len(samples)} samples")
    return splits


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


class AggregateRow(BaseModel):
    metric: str
    mean: float
    std: Optional[float]
    n: int

    @property
    def formatted(self) -> str:
        return format_mean_std(self.mean, self.std)


class AggregateTable(BaseModel):
    labels: Dict[str, str] = {}
    rows: List[AggregateRow]

    def row(self, metric: str) -> AggregateRow:
        return next(r for r in self.rows if r.metric == metric)

    def table_rows(self) -> List[Dict[str, Any]]:
        return [{**self.labels, "metric": r.metric, "value": r.formatted, "n": r.n} for r in self.rows]

    def records(self) -> List[Dict[str, Any]]:
        return [{**self.labels, "metric": r.metric, "mean": r.mean, "std": r.std, "n": r.n} for r in self.rows]


def aggregate_runs(
    reports: Sequence[Union[EvalReport, Mapping[str, float]]],
    labels: Optional[Mapping[str, str]] = None,
) -> AggregateTable:
    """Mean and sample std (n-1) of every metric across runs."""
    if not reports:
        raise ContractError("no reports to aggregate")
    metric_maps = [r.metrics if isinstance(r, EvalReport) else dict(r) for r in reports]
    names = list(metric_maps[0])
    for m in metric_maps[1:]:
        if set(m) != set(names):
            raise ContractError(f"reports disagree on metrics: {sorted(names)} vs {sorted(m)}")
    rows = []
    for name in names:
        mean, std = mean_std([m[name] for m in metric_maps])
        rows.append(AggregateRow(metric=name, mean=mean, std=std, n=len(metric_maps)))
    return AggregateTable(labels=dict(labels or {}), rows=rows)


# ---------------------------------------------------------------------------
# Seed runs
# ---------------------------------------------------------------------------


class RunTask(BaseModel):
    """Everything one fine-tuning run needs; picklable for worker processes."""

    run: RunConfig
    model: ModelConfig
    seg: SegConfig = SegConfig()
    ckpt: Optional[str] = None
    manifest: Optional[str] = None
    task: str = "fire"


class RunOutcome(BaseModel):
    seed: int
    class_weights: Tuple[float, float]
    loss_kind: str
    best_epoch: int
    val: EvalReport
    test: Optional[EvalReport] = None


def run_task(task: RunTask, splits: Optional[Splits] = None) -> RunOutcome:
    """Fine-tune one seed, restore its best checkpoint and evaluate validation and test."""
    if splits is None:
        if task.manifest is None:
            raise ContractError("a run needs either loaded splits or a manifest")
        splits = load_splits(task.manifest, task.model.timesteps, task.task)
    state = None
    if task.ckpt and task.ckpt != "none":
        state = encoder_state(load_checkpoint(task.ckpt)[0])
    seg = SegConfig(**{**task.seg.model_dump(), "loss_kind": task.run.loss_kind, "monitor_metric": None})
    model = create_segmentation_model(task.model, seg, state, seed=task.run.seed)
    result = fit(task.run, model, splits["train"], splits["validation"])
    model.load_state_dict(result.best_state)
    test = splits.get("test")
    return RunOutcome(
        seed=task.run.seed,
        class_weights=task.run.class_weights,
        loss_kind=task.run.loss_kind,
        best_epoch=result.best_epoch,
        val=evaluate(model, splits["validation"], task.run.batch_size),
        test=evaluate(model, test, task.run.batch_size) if test else None,
    )


def run_seeds(
    base: RunTask,
    seeds: Sequence[int],
    splits: Optional[Splits] = None,
    workers: int = 1,
    **overrides: Any,
) -> List[RunOutcome]:
    """Independent runs that differ only by seed; worker processes reload data from the manifest."""
    tasks = []
    for s in seeds:
        values = {**base.run.model_dump(), "seed": s, **overrides}
        if "loss_kind" in overrides:
            values["monitor"] = None
        tasks.append(base.model_copy(update={"run": RunConfig(**values)}))
    if workers > 1:
        if base.manifest is None:
            raise ContractError("parallel runs need a manifest to load data from")
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run_task, tasks))
    return [run_task(t, splits) for t in tasks]


class SweepResult(BaseModel):
    outcomes: List[RunOutcome]
    by_weight: Dict[str, AggregateTable]
    selected: Tuple[float, float]
    test: Optional[AggregateTable] = None


def _weight_key(weights: Tuple[float, float]) -> str:
    return f"{weights[0]:g}:{weights[1]:g}"


def sweep(
    base: RunTask,
    weight_grid: Sequence[Tuple[float, float]] = tuple(config.CLASS_WEIGHT_GRID),
    seeds: Sequence[int] = tuple(config.SEEDS),
    splits: Optional[Splits] = None,
    workers: int = 1,
) -> SweepResult:
    """
    Weighted-CE runs over the class-weight grid x seeds.

    The weight pair with the best mean validation monitor is selected and its
    test reports are aggregated.
    """
    outcomes: List[RunOutcome] = []
    by_weight: Dict[str, AggregateTable] = {}
    monitor_key = "balanced_accuracy"
    best: Optional[Tuple[float, Tuple[float, float]]] = None
    for weights in weight_grid:
        runs = run_seeds(base, seeds, splits, workers, loss_kind="weighted_ce", class_weights=tuple(weights))
        outcomes.extend(runs)
        labels = {"loss": "wce", "weights": _weight_key(weights), "split": "validation"}
        table = aggregate_runs([r.val for r in runs], labels)
        by_weight[_weight_key(weights)] = table
        score = table.row(monitor_key).mean
        logger.info(f"weights {weights}: validation {monitor_key} {table.row(monitor_key).formatted}")
        if best is None or score > best[0]:
            best = (score, tuple(weights))

    selected = best[1]
    chosen = [r for r in outcomes if tuple(r.class_weights) == selected and r.test is not None]
    test = None
    if chosen:
        labels = {"loss": "wce", "weights": _weight_key(selected), "split": "test"}
        test = aggregate_runs([r.test for r in chosen], labels)
    return SweepResult(outcomes=outcomes, by_weight=by_weight, selected=selected, test=test)


def compare_loss_regimes(
    base: RunTask,
    seeds: Sequence[int] = tuple(config.SEEDS),
    ce_weights: Tuple[float, float] = (1.0, 1000.0),
    splits: Optional[Splits] = None,
    workers: int = 1,
    split: str = "test",
) -> Dict[str, AggregateTable]:
    """Weighted CE vs Dice over the same seeds: recall-oriented vs overlap-oriented training."""
    tables = {}
    for loss_kind, weights, label in (("weighted_ce", ce_weights, "wce"), ("dice", (1.0, 1.0), "dice")):
        runs = run_seeds(base, seeds, splits, workers, loss_kind=loss_kind, class_weights=weights)
        reports = [getattr(r, "test" if split == "test" else "val") for r in runs]
        tables[loss_kind] = aggregate_runs(reports, {"loss": label, "split": split})
    return tables
