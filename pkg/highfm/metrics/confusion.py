"""
Pixel-level segmentation metrics
Confusion counts, balanced accuracy, per-class IoU / recall and split statistics
"""

import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, model_validator

from highfm.errors import ShapeError, UndefinedMetricError

ClassName = Literal["pos", "neg"]


@dataclass(frozen=True)
class ConfusionMatrix:
    """Binary pixel counts; accumulation is exact integer addition."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(
            tp=self.tp + other.tp,
            fp=self.fp + other.fp,
            fn=self.fn + other.fn,
            tn=self.tn + other.tn,
        )

    __add__ = merge

    def transposed(self) -> "ConfusionMatrix":
        """Counts with prediction and target swapped."""
        return ConfusionMatrix(tp=self.tp, fp=self.fn, fn=self.fp, tn=self.tn)

    def to_dict(self) -> Dict[str, int]:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}

    @classmethod
    def total_of(cls, matrices: Iterable["ConfusionMatrix"]) -> "ConfusionMatrix":
        out = cls()
        for cm in matrices:
            out = out + cm
        return out


def confusion(pred: np.ndarray, target: np.ndarray) -> ConfusionMatrix:
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    if not (np.isin(pred, (0, 1)).all() and np.isin(target, (0, 1)).all()):
        raise ValueError("confusion counts need binary masks")
    p = pred.astype(bool)
    t = target.astype(bool)
    return ConfusionMatrix(
        tp=int(np.count_nonzero(p & t)),
        fp=int(np.count_nonzero(p & ~t)),
        fn=int(np.count_nonzero(~p & t)),
        tn=int(np.count_nonzero(~p & ~t)),
    )


def _ratio(num: int, den: int, what: str) -> float:
    if den == 0:
        raise UndefinedMetricError(f"{what} is undefined: zero denominator")
    return num / den


def recall(cm: ConfusionMatrix, cls: ClassName = "pos") -> float:
    if cls == "pos":
        return _ratio(cm.tp, cm.tp + cm.fn, "positive recall (no positive pixels)")
    return _ratio(cm.tn, cm.tn + cm.fp, "negative recall (no negative pixels)")


def iou(cm: ConfusionMatrix, cls: ClassName = "pos") -> float:
    if cls == "pos":
        return _ratio(cm.tp, cm.tp + cm.fp + cm.fn, "positive IoU")
    return _ratio(cm.tn, cm.tn + cm.fn + cm.fp, "negative IoU")


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    return (recall(cm, "pos") + recall(cm, "neg")) / 2.0


METRICS = {
    "balanced_accuracy": balanced_accuracy,
    "iou_pos": lambda cm: iou(cm, "pos"),
    "iou_neg": lambda cm: iou(cm, "neg"),
    "recall_pos": lambda cm: recall(cm, "pos"),
    "recall_neg": lambda cm: recall(cm, "neg"),
}

# Names used when selecting checkpoints
MONITOR_ALIASES = {"balanced_accuracy": "balanced_accuracy", "positive_iou": "iou_pos"}


def compute_metrics(cm: ConfusionMatrix, names: Optional[Sequence[str]] = None) -> Dict[str, float]:
    return {name: METRICS[name](cm) for name in (names or METRICS)}


def mean_std(values: Sequence[float]) -> Tuple[float, Optional[float]]:
    """Mean and sample standard deviation (n-1); std is None for a single value."""
    if not values:
        raise ValueError("mean_std of an empty sequence")
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 1:
        return float(arr[0]), None
    return float(arr.mean()), float(arr.std(ddof=1))


class SplitStats(BaseModel):
    images: int
    background_pixels: int
    target_pixels: int
    target_ratio: float

    @model_validator(mode="after")
    def _consistent_ratio(self) -> "SplitStats":
        total = self.background_pixels + self.target_pixels
        expected = self.target_pixels / total if total else 0.0
        if not 0.0 <= self.target_ratio <= 1.0 or not math.isclose(self.target_ratio, expected, abs_tol=1e-6):
            raise ValueError(f"target_ratio {self.target_ratio} does not match counts (expected {expected})")
        return self

    @classmethod
    def from_counts(cls, images: int, background_pixels: int, target_pixels: int) -> "SplitStats":
        total = background_pixels + target_pixels
        return cls(
            images=images,
            background_pixels=background_pixels,
            target_pixels=target_pixels,
            target_ratio=target_pixels / total if total else 0.0,
        )


def dataset_stats(samples: Iterable) -> SplitStats:
    """Exact pixel counts over labeled samples (anything with a `.label` mask)."""
    images = background = target = 0
    for sample in samples:
        if sample.label is None:
            raise ValueError(f"unlabeled sample {getattr(sample, 'location', '?')} in a labeled split")
        positives = int(np.count_nonzero(sample.label))
        images += 1
        target += positives
        background += int(sample.label.size) - positives
    return SplitStats.from_counts(images, background, target)


def split_stats_table(stats: Dict[str, SplitStats]) -> List[Dict[str, object]]:
    """Rows of the per-split dataset statistics report."""
    return [
        {
            "split": name,
            "images": s.images,
            "background_pixels": s.background_pixels,
            "target_pixels": s.target_pixels,
            "target_ratio": round(s.target_ratio, 6),
        }
        for name, s in stats.items()
    ]
