"""
Batch assembly
Collation of patch samples and an order-preserving bounded prefetch queue
"""

import logging
import queue
import threading
from dataclasses import dataclass
from typing import Generic, Iterable, Iterator, List, Optional, Sequence, TypeVar

import numpy as np

from highfm import config
from highfm.datapipe.scenes import PatchSample
from highfm.encodings import Timestamp
from highfm.errors import ShapeError

logger = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass
class Batch:
    inputs: np.ndarray  # [B, T, C, H, W]
    timestamps: List[List[Timestamp]]
    labels: Optional[np.ndarray] = None  # [B, H, W]

    def __len__(self) -> int:
        return self.inputs.shape[0]


def collate(samples: Sequence[PatchSample]) -> Batch:
    if not samples:
        raise ValueError("cannot collate an empty batch")
    shapes = {s.data.shape for s in samples}
    if len(shapes) != 1:
        raise ShapeError(f"samples of mixed shapes in one batch: {sorted(shapes)}")
    labeled = [s.label is not None for s in samples]
    if any(labeled) and not all(labeled):
        raise ValueError("batch mixes labeled and unlabeled samples")
    return Batch(
        inputs=np.stack([s.data for s in samples]),
        timestamps=[list(s.timestamps) for s in samples],
        labels=np.stack([s.label for s in samples]) if all(labeled) else None,
    )


def iterate_batches(
    samples: Sequence[PatchSample],
    batch_size: int = config.BATCH_SIZE,
    rng: Optional[np.random.Generator] = None,
    drop_last: bool = False,
) -> Iterator[Batch]:
    """Batches in order, or in a seeded shuffled order when rng is given."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(len(samples)) if rng is not None else np.arange(len(samples))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        if drop_last and len(idx) < batch_size:
            break
        yield collate([samples[i] for i in idx])


_DONE = object()


class Prefetcher(Generic[T]):
    """
    Runs an iterable on a background thread, holding at most `capacity` items.

    Items come out in production order; an exception raised by the producer
    is re-raised in the consumer.
    """

    def __init__(self, source: Iterable[T], capacity: int = config.PREFETCH_BATCHES):
        if capacity < 1:
            raise ValueError("prefetch capacity must be >= 1")
        self._queue: "queue.Queue" = queue.Queue(maxsize=capacity)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._produce, args=(iter(source),), daemon=True)
        self._thread.start()

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _produce(self, source: Iterator[T]) -> None:
        try:
            for item in source:
                if not self._put(item):
                    return
        except BaseException as e:  # handed to the consumer
            self._put(e)
            return
        self._put(_DONE)

    def __iter__(self) -> Iterator[T]:
        try:
            while True:
                item = self._queue.get()
                if item is _DONE:
                    return
                if isinstance(item, BaseException):
                    raise item
                yield item
        finally:
            self.close()

    def close(self) -> None:
        self._stop.set()
        self._thread.join(timeout=1.0)
