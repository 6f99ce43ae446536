"""
Temporal splits and label collocation
"""

import bisect
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Hashable, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
from pydantic import BaseModel, field_validator, model_validator

from highfm import config
from highfm.encodings import Timestamp
from highfm.errors import CollocationError, ConfigError, SplitError

logger = logging.getLogger(__name__)

ImageRef = TypeVar("ImageRef")
LabelRef = TypeVar("LabelRef")


class YearRange(BaseModel):
    """Inclusive year range, optionally restricted to some months (empty = all)."""

    first: int
    last: int
    months: Tuple[int, ...] = ()

    @model_validator(mode="after")
    def _ordered(self) -> "YearRange":
        if self.first > self.last:
            raise ConfigError(f"year range {self.first}-{self.last} is reversed")
        if any(not 1 <= m <= 12 for m in self.months):
            raise ConfigError(f"invalid months {self.months}")
        return self

    def covers(self, t: Timestamp) -> bool:
        return self.first <= t.year <= self.last and (not self.months or t.month in self.months)

    def overlaps(self, other: "YearRange") -> bool:
        if self.last < other.first or other.last < self.first:
            return False
        if not self.months or not other.months:
            return True
        return bool(set(self.months) & set(other.months))


class SplitRules(BaseModel):
    """Split name -> year ranges. Ranges of different splits may not overlap."""

    rules: Dict[str, List[YearRange]]

    @field_validator("rules")
    @classmethod
    def _non_empty(cls, value: Dict[str, List[YearRange]]) -> Dict[str, List[YearRange]]:
        if not value:
            raise ConfigError("split rules are empty")
        return value

    @model_validator(mode="after")
    def _disjoint(self) -> "SplitRules":
        items = [(name, r) for name, ranges in self.rules.items() for r in ranges]
        for i, (name_a, a) in enumerate(items):
            for name_b, b in items[i + 1 :]:
                if name_a != name_b and a.overlaps(b):
                    raise ConfigError(f"splits '{name_a}' and '{name_b}' overlap ({a} / {b})")
        return self

    @classmethod
    def from_table(cls, table: Dict[str, Tuple[int, int, Tuple[int, ...]]]) -> "SplitRules":
        return cls(rules={name: [YearRange(first=f, last=l, months=m)] for name, (f, l, m) in table.items()})

    @classmethod
    def pretrain(cls, first: Optional[int] = None, last: Optional[int] = None) -> "SplitRules":
        """Pretraining rules; a custom train range moves evaluation to the following year."""
        if first is None and last is None:
            return cls.from_table(config.PRETRAIN_SPLITS)
        first = first if first is not None else config.PRETRAIN_SPLITS["train"][0]
        last = last if last is not None else config.PRETRAIN_SPLITS["train"][1]
        eval_year = last + 1
        return cls.from_table(
            {
                "train": (first, last, ()),
                "validation": (eval_year, eval_year, config.PRETRAIN_SPLITS["validation"][2]),
                "test": (eval_year, eval_year, config.PRETRAIN_SPLITS["test"][2]),
            }
        )

    @classmethod
    def finetune(cls) -> "SplitRules":
        return cls.from_table(config.FINETUNE_SPLITS)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "SplitRules":
        """
        JSON object: split name -> list of [first, last] or [first, last, [months]].
        """
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        rules = {}
        for name, ranges in raw.items():
            rules[name] = [
                YearRange(first=r[0], last=r[1], months=tuple(r[2]) if len(r) > 2 else ()) for r in ranges
            ]
        return cls(rules=rules)

    @property
    def years(self) -> List[int]:
        return sorted({y for ranges in self.rules.values() for r in ranges for y in range(r.first, r.last + 1)})


def assign_split(t: Timestamp, rules: SplitRules) -> str:
    for name, ranges in rules.rules.items():
        if any(r.covers(t) for r in ranges):
            return name
    raise SplitError(f"no split covers {t.isoformat()}")


def in_season(t: Timestamp, months: Sequence[int] = config.SEASON_MONTHS) -> bool:
    return t.month in months


def _check_sorted(items: Sequence[Tuple[Timestamp, object]], what: str) -> List[int]:
    epochs = [t.epoch_seconds for t, _ in items]
    if any(a > b for a, b in zip(epochs, epochs[1:])):
        raise CollocationError(f"{what} are not sorted by timestamp")
    return epochs


def collocate_labels(
    images: Sequence[Tuple[Timestamp, ImageRef]],
    labels: Sequence[Tuple[Timestamp, LabelRef]],
    tolerance_s: int = config.COLLOCATION_TOLERANCE_S,
) -> List[Tuple[ImageRef, LabelRef]]:
    """
    Pair each image with the nearest label within tolerance_s seconds.

    Unmatched images are dropped; a label may serve several images; equal
    distances on both sides go to the earlier label.
    """
    _check_sorted(images, "images")
    label_epochs = _check_sorted(labels, "labels")
    pairs = []
    for t, image_ref in images:
        k = bisect.bisect_left(label_epochs, t.epoch_seconds)
        best: Optional[int] = None
        for j in (k - 1, k):
            if 0 <= j < len(label_epochs):
                gap = abs(label_epochs[j] - t.epoch_seconds)
                if gap <= tolerance_s and (best is None or gap < abs(label_epochs[best] - t.epoch_seconds)):
                    best = j
        if best is not None:
            pairs.append((image_ref, labels[best][1]))
    logger.info(f"collocated {len(pairs)}/{len(images)} images within {tolerance_s}s")
    return pairs


@dataclass
class LabelProduct:
    """Full-scene reference masks for one region at one time."""

    timestamp: Timestamp
    scene_id: str
    masks: Dict[str, np.ndarray] = field(default_factory=dict)


def save_label_product(path: Union[str, Path], product: LabelProduct) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        np.savez(
            f,
            scene_id=np.asarray(product.scene_id),
            epoch_seconds=np.asarray(product.timestamp.epoch_seconds, dtype=np.int64),
            **{f"mask_{name}": mask.astype(np.uint8) for name, mask in product.masks.items()},
        )
    return path


def load_label_product(path: Union[str, Path]) -> LabelProduct:
    with np.load(Path(path)) as f:
        return LabelProduct(
            timestamp=Timestamp.from_epoch(int(f["epoch_seconds"])),
            scene_id=str(f["scene_id"]),
            masks={name[len("mask_") :]: f[name] for name in f.files if name.startswith("mask_")},
        )


def group_by(items: Sequence, key) -> Dict[Hashable, List]:
    groups: Dict[Hashable, List] = {}
    for item in items:
        groups.setdefault(key(item), []).append(item)
    return groups
