"""
Training harness: optimization, training loops and experiment orchestration
"""

from highfm.harness.gradchecks import model_grad_checks
from highfm.harness.optim import Adam, AdamConfig, AdamState, adam_step, cosine_lr
from highfm.harness.runs import (
    AggregateTable,
    RunOutcome,
    RunTask,
    SweepResult,
    aggregate_runs,
    compare_loss_regimes,
    load_splits,
    run_seeds,
    run_task,
    sweep,
)
from highfm.harness.trainer import (
    EvalReport,
    FitResult,
    PretrainResult,
    RunConfig,
    evaluate,
    fit,
    pretrain,
    validation_recon_loss,
)

__all__ = [
    "Adam",
    "AdamConfig",
    "AdamState",
    "AggregateTable",
    "EvalReport",
    "FitResult",
    "PretrainResult",
    "RunConfig",
    "RunOutcome",
    "RunTask",
    "SweepResult",
    "adam_step",
    "aggregate_runs",
    "compare_loss_regimes",
    "cosine_lr",
    "evaluate",
    "fit",
    "load_splits",
    "model_grad_checks",
    "pretrain",
    "run_seeds",
    "run_task",
    "sweep",
    "validation_recon_loss",
]
