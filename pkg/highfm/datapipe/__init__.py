"""
Dataset mechanics: tiling, filtering, collocation, splits, sampling, containers
"""

from highfm.datapipe.container import (
    Manifest,
    ManifestEntry,
    decode_container,
    encode_container,
    fnv1a64,
    read_container,
    write_container,
)
from highfm.datapipe.loader import Batch, Prefetcher, collate, iterate_batches
from highfm.datapipe.sampling import build_multi_timestep_set, fire_train_filter, sample_multi_timestep
from highfm.datapipe.scenes import PatchSample, Scene, filter_patch, keep_tiles, tile_scene
from highfm.datapipe.splits import SplitRules, YearRange, assign_split, collocate_labels, in_season
from highfm.datapipe.synth import SynthConfig, synth_generate

__all__ = [
    "Batch",
    "Manifest",
    "ManifestEntry",
    "PatchSample",
    "Prefetcher",
    "Scene",
    "SplitRules",
    "SynthConfig",
    "YearRange",
    "assign_split",
    "build_multi_timestep_set",
    "collate",
    "collocate_labels",
    "decode_container",
    "encode_container",
    "filter_patch",
    "fire_train_filter",
    "fnv1a64",
    "in_season",
    "iterate_batches",
    "keep_tiles",
    "read_container",
    "sample_multi_timestep",
    "synth_generate",
    "tile_scene",
    "write_container",
]
