"""
Shared pytest fixtures for HighFM
"""

from typing import Callable, List

import numpy as np
import pytest

from highfm.datapipe.scenes import PatchSample
from highfm.encodings import Timestamp
from highfm.mae.mae_model import ModelConfig
from highfm.numerics.tensor import precision


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale training tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training run, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


START = Timestamp.from_calendar(2020, 200, 600)


def acquisition_times(timesteps: int = 1, offset_s: int = 0) -> List[Timestamp]:
    """Same-hour acquisitions 15 minutes apart."""
    return [Timestamp.from_epoch(START.epoch_seconds + offset_s + 900 * t) for t in range(timesteps)]


@pytest.fixture
def toy_cfg() -> ModelConfig:
    return ModelConfig.toy()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture
def float64():
    with precision("float64"):
        yield


@pytest.fixture
def make_samples() -> Callable[..., List[PatchSample]]:
    """
    Labeled toy patches (3 bands, 8x8): band 0 is bright where the label is positive,
    so the target is learnable from the input.
    """

    def _make(n: int = 8, timesteps: int = 1, seed: int = 0, size: int = 8, bands: int = 3, positive: float = 0.15):
        gen = np.random.default_rng(seed)
        samples = []
        for k in range(n):
            label = (gen.random((size, size)) < positive).astype(np.uint8)
            label[gen.integers(size), gen.integers(size)] = 1
            data = gen.normal(0.0, 0.3, size=(timesteps, bands, size, size)).astype(np.float32)
            data[:, 0] += 2.0 * label
            samples.append(
                PatchSample(
                    data=data,
                    timestamps=acquisition_times(timesteps, offset_s=86400 * k),
                    label=label,
                    location=("region000", k, 0),
                )
            )
        return samples

    return _make
