"""
Multi-timestep sampling and the fire training filter
"""

import logging
from typing import Dict, List, Sequence

import numpy as np

from highfm.datapipe.scenes import Location, PatchSample
from highfm.datapipe.splits import group_by
from highfm.errors import ContractError, SampleUnavailableError

logger = logging.getLogger(__name__)


def sample_multi_timestep(acquisitions: Sequence[PatchSample], rng: np.random.Generator, k: int = 3) -> PatchSample:
    """
    Draw k same-clock-hour acquisitions of one location.

    A qualifying hour bucket (>= k acquisitions) is chosen uniformly, then k
    distinct acquisitions within it; the result is sorted by time and carries
    the label of its latest acquisition.
    """
    if any(s.timesteps != 1 for s in acquisitions):
        raise ContractError("multi-timestep sampling takes single-acquisition patches")
    locations = {s.location for s in acquisitions}
    if len(locations) > 1:
        raise ContractError(f"acquisitions from several locations: {sorted(map(str, locations))[:3]}")

    buckets: Dict[int, List[PatchSample]] = {}
    for s in acquisitions:
        buckets.setdefault(s.latest.hour_bucket, []).append(s)
    qualifying = [hour for hour in sorted(buckets) if len(buckets[hour]) >= k]
    if not qualifying:
        raise SampleUnavailableError(f"no clock hour holds {k} acquisitions at {next(iter(locations), None)}")

    bucket = buckets[qualifying[int(rng.integers(len(qualifying)))]]
    picked = sorted((bucket[i] for i in rng.choice(len(bucket), size=k, replace=False)), key=lambda s: s.latest)
    return PatchSample(
        data=np.concatenate([s.data for s in picked]),
        timestamps=[s.latest for s in picked],
        label=picked[-1].label,
        location=picked[-1].location,
    )


def build_multi_timestep_set(samples: Sequence[PatchSample], rng: np.random.Generator) -> List[PatchSample]:
    """One triple per location, locations visited in sorted order; locations without one are skipped."""
    by_location: Dict[Location, List[PatchSample]] = group_by(samples, lambda s: s.location)
    out = []
    skipped = 0
    for location in sorted(by_location, key=str):
        series = sorted(by_location[location], key=lambda s: s.latest)
        try:
            out.append(sample_multi_timestep(series, rng))
        except SampleUnavailableError:
            skipped += 1
    logger.info(f"built {len(out)} multi-timestep samples ({skipped} locations without a same-hour triple)")
    return out


def fire_train_filter(samples: Sequence[PatchSample], split: str) -> List[PatchSample]:
    """Training keeps only samples with a positive pixel; other splits pass through."""
    if any(s.label is None for s in samples):
        raise ContractError("fire filtering needs labeled samples")
    if split != "train":
        return list(samples)
    return [s for s in samples if int(s.label.sum()) >= 1]
