"""
Evaluation metrics and reporting
"""

from highfm.metrics.confusion import (
    METRICS,
    MONITOR_ALIASES,
    ConfusionMatrix,
    SplitStats,
    balanced_accuracy,
    compute_metrics,
    confusion,
    dataset_stats,
    iou,
    mean_std,
    recall,
    split_stats_table,
)
from highfm.metrics.report import format_mean_std, read_jsonl, render_table, to_jsonl, write_jsonl

__all__ = [
    "METRICS",
    "MONITOR_ALIASES",
    "ConfusionMatrix",
    "SplitStats",
    "balanced_accuracy",
    "compute_metrics",
    "confusion",
    "dataset_stats",
    "format_mean_std",
    "iou",
    "mean_std",
    "read_jsonl",
    "recall",
    "render_table",
    "split_stats_table",
    "to_jsonl",
    "write_jsonl",
]
