"""
Configuration file for the HighFM toolkit
Environment-driven defaults shared by every component
"""

import os
from typing import Dict, List, Tuple

from dotenv import load_dotenv

# Load environment variables
load_dotenv()


def _flag(name: str, default: str) -> bool:
    return os.getenv(name, default).lower() == "true"


# App Configuration
APP_NAME = "highfm"
LOG_LEVEL = os.getenv("HIGHFM_LOG_LEVEL", "INFO")
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# Numerics
DEBUG = _flag("HIGHFM_DEBUG", "false")

# Encodings
REFERENCE_YEAR = int(os.getenv("HIGHFM_REFERENCE_YEAR", "2014"))
ENCODING_BASE = 10000.0

# Model geometry
IMAGE_SIZE = 32
TOKEN_SIZE = 4
BANDS = 11
EMBED_DIM = 768
DEPTH = 12
HEADS = 12
MLP_RATIO = 4
DECODER_DIM = 512
DECODER_DEPTH = 4
DECODER_HEADS = 8
MASK_RATIO = float(os.getenv("HIGHFM_MASK_RATIO", "0.75"))
INIT_STD = 0.02

# Fine-tuning
DECODER_CHANNELS: Tuple[int, ...] = (256, 128)
DICE_EPS = 1.0

# Training
BATCH_SIZE = int(os.getenv("HIGHFM_BATCH_SIZE", "64"))
LEARNING_RATE = float(os.getenv("HIGHFM_LR", "1e-4"))
MAX_EPOCHS = int(os.getenv("HIGHFM_MAX_EPOCHS", "150"))
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
PREFETCH_BATCHES = int(os.getenv("HIGHFM_PREFETCH", "4"))
SEEDS: List[int] = [int(s) for s in os.getenv("HIGHFM_SEEDS", "0,1,2,3,4").split(",") if s.strip()]

# Class-weight search space (w_neg, w_pos)
CLASS_WEIGHT_GRID: List[Tuple[float, float]] = [
    (1.0, 1.0),
    (1.0, 500.0),
    (1.0, 1000.0),
    (1.0, 2000.0),
    (1.0, 5000.0),
    (1.0, 10000.0),
]

# Temporal splits: name -> (first_year, last_year, months or None)
PRETRAIN_SPLITS: Dict[str, Tuple[int, int, Tuple[int, ...]]] = {
    "train": (2014, 2018, ()),
    "validation": (2019, 2019, (5, 6, 7)),
    "test": (2019, 2019, (8, 9)),
}
FINETUNE_SPLITS: Dict[str, Tuple[int, int, Tuple[int, ...]]] = {
    "train": (2020, 2021, ()),
    "validation": (2022, 2022, ()),
    "test": (2023, 2024, ()),
}

# Fire season used when ingesting real archives
SEASON_MONTHS: Tuple[int, ...] = (5, 6, 7, 8, 9)

# Label collocation
COLLOCATION_TOLERANCE_S = 600

# Synthetic scenes: which bands respond to clouds and hotspots
CLOUD_BANDS: Tuple[int, ...] = (0, 1, 2)
FIRE_BANDS: Tuple[int, ...] = (7, 8, 9, 10)
ACQUISITION_CADENCE_S = 900
