"""
Synthetic geostationary scenes
Smooth multi-band backgrounds, land/ocean split, cloud blobs and small fire
clusters with exact ground truth, for desk-scale training runs
"""

import logging
from datetime import timedelta
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from highfm import config
from highfm.datapipe.scenes import Scene
from highfm.encodings import Timestamp
from highfm.errors import ConfigError

logger = logging.getLogger(__name__)


class SynthConfig(BaseModel):
    """
    Generator settings.

    fire_density is the expected fraction of fire pixels per scene;
    cloud_density the expected number of cloud blobs per 32x32 area.
    Acquisitions of a region are spaced by cadence_s, cycling over `years`.
    """

    seed: int = 0
    n_scenes: int = 8
    height: int = 64
    width: int = 64
    bands: int = config.BANDS
    regions: int = 1
    fire_density: float = Field(default=0.003, ge=0.0, le=0.2)
    cloud_density: float = Field(default=0.2, ge=0.0)
    land_fraction: float = Field(default=0.7, gt=0.0, le=1.0)
    fire_intensity: float = 4.0
    cloud_intensity: float = 2.5
    years: Tuple[int, ...] = (2020,)
    start_day: int = 152
    start_minute: int = 600
    cadence_s: int = config.ACQUISITION_CADENCE_S
    label_jitter_s: int = 120

    @model_validator(mode="after")
    def _check(self) -> "SynthConfig":
        if self.height < 32 or self.width < 32:
            raise ConfigError(f"scenes must be at least 32x32, got {self.height}x{self.width}")
        if self.n_scenes < 1 or self.regions < 1 or not self.years:
            raise ConfigError("need at least one scene, one region and one year")
        if max(config.FIRE_BANDS + config.CLOUD_BANDS) >= self.bands:
            raise ConfigError(f"{self.bands} bands do not cover the fire/cloud band roles")
        return self


def _smooth_field(rng: np.random.Generator, h: int, w: int, waves: int = 4, phase_shift: float = 0.0) -> np.ndarray:
    """Sum of random plane waves, roughly unit variance."""
    ys, xs = np.mgrid[0:h, 0:w]
    out = np.zeros((h, w))
    for _ in range(waves):
        cycles = rng.uniform(0.5, 3.0)
        angle = rng.uniform(0.0, 2 * np.pi)
        phase = rng.uniform(0.0, 2 * np.pi)
        k = 2 * np.pi * cycles / max(h, w)
        out += np.sin(k * (np.cos(angle) * xs + np.sin(angle) * ys) + phase + phase_shift)
    return out * np.sqrt(2.0 / waves)


def _land_mask(rng: np.random.Generator, h: int, w: int, fraction: float) -> np.ndarray:
    if fraction >= 1.0:
        return np.ones((h, w), dtype=np.uint8)
    field = _smooth_field(rng, h, w, waves=3)
    return (field >= np.quantile(field, 1.0 - fraction)).astype(np.uint8)


def _cloud_field(rng: np.random.Generator, h: int, w: int, density: float) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    out = np.zeros((h, w))
    for _ in range(rng.poisson(density * h * w / 1024.0)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        radius = rng.uniform(3.0, 8.0)
        out = np.maximum(out, np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * radius**2)))
    return out


_NEIGHBOURS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def _fire_mask(rng: np.random.Generator, land: np.ndarray, density: float) -> np.ndarray:
    """Clusters of 1-4 pixels on land; cluster count set so the expected pixel rate is `density`."""
    h, w = land.shape
    fire = np.zeros((h, w), dtype=np.uint8)
    land_pixels = np.argwhere(land == 1)
    if density <= 0 or len(land_pixels) == 0:
        return fire
    for _ in range(rng.poisson(density * h * w / 2.5)):
        y, x = land_pixels[rng.integers(len(land_pixels))]
        cluster = {(int(y), int(x))}
        target = int(rng.integers(1, 5))
        while len(cluster) < target:
            frontier = sorted(
                {
                    (cy + dy, cx + dx)
                    for cy, cx in cluster
                    for dy, dx in _NEIGHBOURS
                    if 0 <= cy + dy < h and 0 <= cx + dx < w and land[cy + dy, cx + dx]
                }
                - cluster
            )
            if not frontier:
                break
            cluster.add(frontier[int(rng.integers(len(frontier)))])
        for cy, cx in cluster:
            fire[cy, cx] = 1
    return fire


def acquisition_time(cfg: SynthConfig, index: int) -> Timestamp:
    """Acquisition `index` of a region: cycles over years, then steps by cadence_s."""
    year = cfg.years[index % len(cfg.years)]
    slot = index // len(cfg.years)
    start = Timestamp.from_calendar(year, cfg.start_day, cfg.start_minute)
    return Timestamp.from_datetime(start.to_datetime() + timedelta(seconds=slot * cfg.cadence_s))


def synth_generate(cfg: SynthConfig) -> List[Scene]:
    """
    Generate cfg.n_scenes acquisitions, assigned round-robin to regions.

    Each region keeps its land mask and background pattern; backgrounds drift
    slowly between acquisitions while clouds and fires are redrawn. Labels
    ('fire', 'cloud') come straight from generation.
    """
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.height, cfg.width
    regions = []
    for r in range(cfg.regions):
        region_rng = np.random.default_rng([cfg.seed, r])
        land = _land_mask(region_rng, h, w, cfg.land_fraction)
        wave_seeds = region_rng.integers(0, 2**31, size=cfg.bands)
        offsets = region_rng.normal(0.0, 0.5, size=cfg.bands)
        regions.append((land, wave_seeds, offsets))

    scenes = []
    for k in range(cfg.n_scenes):
        region, index = k % cfg.regions, k // cfg.regions
        land, wave_seeds, offsets = regions[region]
        drift = 0.05 * index
        data = np.stack(
            [
                _smooth_field(np.random.default_rng(int(s)), h, w, phase_shift=drift) + offsets[b]
                for b, s in enumerate(wave_seeds)
            ]
        )
        data[3:7] += 0.5 * land
        data += rng.normal(0.0, 0.05, size=data.shape)

        cloud_field = _cloud_field(rng, h, w, cfg.cloud_density)
        cloud = (cloud_field > 0.5).astype(np.uint8)
        data[list(config.CLOUD_BANDS)] += cfg.cloud_intensity * cloud_field

        fire = _fire_mask(rng, land, cfg.fire_density)
        data[list(config.FIRE_BANDS)] += cfg.fire_intensity * fire

        scenes.append(
            Scene(
                data=data.astype(np.float32),
                timestamp=acquisition_time(cfg, index),
                land_mask=land,
                scene_id=f"region{region:03d}",
                cloud_mask=cloud,
                labels={"fire": fire, "cloud": cloud},
            )
        )
    total = sum(s.labels["fire"].sum() for s in scenes)
    logger.info(f"generated {len(scenes)} scenes, fire pixel rate {total / (len(scenes) * h * w):.5f}")
    return scenes
