"""
On-disk dataset steps: synthetic scenes -> tiles -> labeled tiles -> split manifests
"""

import logging
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from highfm import config
from highfm.datapipe.container import Manifest, ManifestEntry, container_name, read_container, write_container
from highfm.datapipe.scenes import keep_tiles, load_scene, save_scene, tile_scene
from highfm.datapipe.splits import (
    LabelProduct,
    SplitRules,
    assign_split,
    collocate_labels,
    group_by,
    in_season,
    load_label_product,
    save_label_product,
)
from highfm.datapipe.synth import SynthConfig, synth_generate
from highfm.encodings import Timestamp

logger = logging.getLogger(__name__)

UNASSIGNED = "unassigned"
MANIFEST_NAME = "manifest.tsv"

PathLike = Union[str, Path]


def write_synthetic(cfg: SynthConfig, out_dir: PathLike) -> List[Path]:
    """Scenes go to out/scenes, label products (time-jittered) to out/labels."""
    out = Path(out_dir)
    rng = np.random.default_rng([cfg.seed, 1])
    written = []
    for scene in synth_generate(cfg):
        stem = f"{scene.scene_id}__{scene.timestamp.epoch_seconds}"
        written.append(save_scene(out / "scenes" / f"{stem}.npz", scene))
        jitter = int(rng.integers(-cfg.label_jitter_s, cfg.label_jitter_s + 1)) if cfg.label_jitter_s else 0
        when = Timestamp.from_epoch(scene.timestamp.epoch_seconds + jitter)
        product = LabelProduct(when, scene.scene_id, scene.labels)
        save_label_product(out / "labels" / f"{stem}.npz", product)
    logger.info(f"wrote {len(written)} scenes to {out}")
    return written


def write_tiles(scenes_dir: PathLike, out_dir: PathLike, min_land: int = 1, drop_full_cloud: bool = True) -> Manifest:
    """Tile every scene, filter, and write unlabeled containers plus a manifest."""
    out = Path(out_dir)
    entries = []
    for path in sorted(Path(scenes_dir).glob("*.npz")):
        scene = load_scene(path)
        for sample in keep_tiles(tile_scene(scene), min_land, drop_full_cloud):
            name = container_name(sample)
            digest = write_container(out / name, sample)
            entries.append(ManifestEntry(name, digest, sample.latest.year, UNASSIGNED))
    manifest = Manifest(entries, root=out)
    manifest.write(out / MANIFEST_NAME)
    return manifest


def collocate_dir(
    images_dir: PathLike,
    labels_dir: PathLike,
    out_manifest: PathLike,
    task: str = "fire",
    tolerance_s: int = config.COLLOCATION_TOLERANCE_S,
) -> Manifest:
    """
    Attach the nearest label product (same region, within tolerance) to every tile.

    Labeled containers are written next to the output manifest under `task/`.
    """
    out_manifest = Path(out_manifest)
    root = out_manifest.parent
    tiles = [(read_container(p), p) for p in sorted(Path(images_dir).glob("*.hfmp"))]
    products = [load_label_product(p) for p in sorted(Path(labels_dir).glob("*.npz"))]

    tiles_by_region = group_by(tiles, lambda item: item[0].location[0] if item[0].location else "")
    products_by_region = group_by(products, lambda p: p.scene_id)

    entries: List[ManifestEntry] = []
    for region in sorted(tiles_by_region):
        images = sorted(((s.latest, (s, p)) for s, p in tiles_by_region[region]), key=lambda x: (x[0], str(x[1][1])))
        labels = sorted(((lp.timestamp, lp) for lp in products_by_region.get(region, [])), key=lambda x: x[0])
        for (sample, _), product in collocate_labels(images, labels, tolerance_s):
            if task not in product.masks:
                raise KeyError(f"label product for {region} has no '{task}' mask")
            _, row, col = sample.location
            size = sample.data.shape[-1]
            window = product.masks[task][row * size : (row + 1) * size, col * size : (col + 1) * size]
            labeled = sample.with_label(window)
            name = f"{task}/{container_name(labeled)}"
            digest = write_container(root / name, labeled)
            entries.append(ManifestEntry(name, digest, labeled.latest.year, UNASSIGNED))
    manifest = Manifest(entries, root=root)
    manifest.write(out_manifest)
    return manifest


def assign_manifest_splits(
    manifest_path: PathLike,
    rules: SplitRules,
    out_path: Optional[PathLike] = None,
    season_only: bool = False,
) -> Manifest:
    """
    Rewrite every entry's split from its acquisition timestamp under `rules`.

    With season_only, entries acquired outside the fire season (config.SEASON_MONTHS)
    are dropped from the rewritten manifest.
    """
    manifest = Manifest.read(manifest_path)
    entries = []
    for e in manifest.entries:
        sample = read_container(manifest.root / e.path, expected_digest=e.digest)
        if season_only and not in_season(sample.latest):
            continue
        entries.append(ManifestEntry(e.path, e.digest, e.year, assign_split(sample.latest, rules)))
    if season_only:
        logger.info(f"kept {len(entries)}/{len(manifest.entries)} in-season entries")
    out = Manifest(entries, root=manifest.root)
    out.write(out_path or manifest_path)
    return out
