"""
Scenes and patch samples
Tiling of full scenes into non-overlapping patches and the ocean / cloud filter
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from highfm.encodings import Timestamp
from highfm.errors import ContractError, ShapeError

logger = logging.getLogger(__name__)

Location = Tuple[str, int, int]


@dataclass
class Scene:
    """One acquisition of a region: [C, H, W] radiances plus masks."""

    data: np.ndarray
    timestamp: Timestamp
    land_mask: np.ndarray
    scene_id: str
    cloud_mask: Optional[np.ndarray] = None
    labels: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ShapeError(f"scene data must be [C, H, W], got {self.data.shape}")
        spatial = self.data.shape[1:]
        for name, mask in [("land_mask", self.land_mask), ("cloud_mask", self.cloud_mask), *self.labels.items()]:
            if mask is not None and np.shape(mask) != spatial:
                raise ShapeError(f"{name} of shape {np.shape(mask)} does not match scene extents {spatial}")

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class PatchSample:
    """
    A patch over T acquisitions of one location.

    data is [T, C, H, W]. T is 1 or 3; T=0 with a label is a mask-only
    payload (exported predictions).
    """

    data: np.ndarray
    timestamps: List[Timestamp]
    label: Optional[np.ndarray] = None
    location: Optional[Location] = None
    land_sub: Optional[np.ndarray] = None
    cloud_sub: Optional[np.ndarray] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ShapeError(f"patch data must be [T, C, H, W], got {self.data.shape}")
        t = self.data.shape[0]
        if t not in (1, 3) and not (t == 0 and self.label is not None):
            raise ContractError(f"a patch holds 1 or 3 acquisitions, got {t}")
        if len(self.timestamps) != t:
            raise ShapeError(f"{len(self.timestamps)} timestamps for {t} acquisitions")
        if t == 3:
            if any(a >= b for a, b in zip(self.timestamps, self.timestamps[1:])):
                raise ContractError("multi-timestep timestamps must be strictly increasing")
            if not all(self.timestamps[0].same_hour(ts) for ts in self.timestamps[1:]):
                raise ContractError("multi-timestep timestamps must share a clock hour")
        if self.label is not None:
            self.label = np.asarray(self.label, dtype=np.uint8)
            if self.label.shape != self.data.shape[2:] and t > 0:
                raise ShapeError(f"label {self.label.shape} does not match patch extents {self.data.shape[2:]}")
            if not np.isin(self.label, (0, 1)).all():
                raise ContractError("labels must be binary")

    @property
    def timesteps(self) -> int:
        return self.data.shape[0]

    @property
    def latest(self) -> Timestamp:
        return self.timestamps[-1]

    def with_label(self, label: Optional[np.ndarray]) -> "PatchSample":
        return PatchSample(self.data, list(self.timestamps), label, self.location, self.land_sub, self.cloud_sub)


def iter_tiles(height: int, width: int, tile: int) -> Iterator[Tuple[int, int]]:
    """Row-major (row, col) indices of every full tile; partial strips are skipped."""
    for i in range(height // tile):
        for j in range(width // tile):
            yield i, j


def tile_scene(scene: Scene, tile_size: int = 32, task: Optional[str] = None) -> List[PatchSample]:
    """
    Cut a scene into non-overlapping tile_size patches at offsets (tile*i, tile*j).

    Samples are T=1 and carry their land / cloud sub-masks; with `task`
    the matching scene label is attached as well.
    """
    if scene.height < tile_size or scene.width < tile_size:
        raise ShapeError(f"scene {scene.height}x{scene.width} is smaller than one {tile_size} tile")
    label_map = scene.labels.get(task) if task else None
    if task and label_map is None:
        raise KeyError(f"scene {scene.scene_id} has no '{task}' label")
    samples = []
    for i, j in iter_tiles(scene.height, scene.width, tile_size):
        window = (slice(i * tile_size, (i + 1) * tile_size), slice(j * tile_size, (j + 1) * tile_size))
        samples.append(
            PatchSample(
                data=scene.data[(slice(None),) + window][None],
                timestamps=[scene.timestamp],
                label=None if label_map is None else label_map[window],
                location=(scene.scene_id, i, j),
                land_sub=scene.land_mask[window],
                cloud_sub=None if scene.cloud_mask is None else scene.cloud_mask[window],
            )
        )
    return samples


def filter_patch(
    patch: Optional[PatchSample],
    land_sub: np.ndarray,
    cloud_sub: Optional[np.ndarray] = None,
    min_land: int = 1,
    drop_full_cloud: bool = True,
) -> bool:
    """Keep patches with some land that are not entirely cloud covered."""
    if int(np.count_nonzero(land_sub)) < min_land:
        return False
    if drop_full_cloud and cloud_sub is not None and np.min(cloud_sub) == 1:
        return False
    return True


def keep_tiles(samples: List[PatchSample], min_land: int = 1, drop_full_cloud: bool = True) -> List[PatchSample]:
    kept = [s for s in samples if filter_patch(s, s.land_sub, s.cloud_sub, min_land, drop_full_cloud)]
    logger.debug(f"kept {len(kept)}/{len(samples)} tiles")
    return kept


# Scenes on disk are intermediate products of the synthetic generator.


def save_scene(path: Union[str, Path], scene: Scene) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {"data": scene.data, "land_mask": scene.land_mask}
    if scene.cloud_mask is not None:
        arrays["cloud_mask"] = scene.cloud_mask
    with path.open("wb") as f:
        np.savez(
            f,
            scene_id=np.asarray(scene.scene_id),
            epoch_seconds=np.asarray(scene.timestamp.epoch_seconds, dtype=np.int64),
            **arrays,
        )
    return path


def load_scene(path: Union[str, Path]) -> Scene:
    with np.load(Path(path)) as f:
        return Scene(
            data=f["data"],
            timestamp=Timestamp.from_epoch(int(f["epoch_seconds"])),
            land_mask=f["land_mask"],
            scene_id=str(f["scene_id"]),
            cloud_mask=f["cloud_mask"] if "cloud_mask" in f.files else None,
        )
