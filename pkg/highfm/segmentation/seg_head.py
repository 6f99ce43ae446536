"""
Segmentation head
Token-grid extraction and the transposed-convolution residual decoder that
turns encoder tokens into two-class per-pixel logits
"""

import logging
import math
from typing import Dict, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, field_validator, model_validator

from highfm import config
from highfm.encodings import Timestamp
from highfm.errors import ConfigError, ShapeError
from highfm.mae.mae_model import ModelConfig, ViTEncoder
from highfm.numerics import ops
from highfm.numerics.layers import Conv2d, ConvTranspose2d, Module
from highfm.numerics.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

LossKind = Literal["weighted_ce", "dice"]
MonitorMetric = Literal["balanced_accuracy", "positive_iou"]

MONITOR_FOR_LOSS: Dict[str, str] = {"weighted_ce": "balanced_accuracy", "dice": "positive_iou"}


class SegConfig(BaseModel):
    """Segmentation head geometry and training objective."""

    n_classes: int = 2
    decoder_channels: Tuple[int, ...] = config.DECODER_CHANNELS
    residual_blocks_per_stage: int = 1
    class_weights: Tuple[float, float] = (1.0, 1.0)
    dice_eps: float = config.DICE_EPS
    loss_kind: LossKind = "weighted_ce"
    monitor_metric: Optional[MonitorMetric] = None

    @field_validator("n_classes")
    @classmethod
    def _binary_only(cls, value: int) -> int:
        if value != 2:
            raise ConfigError("only binary segmentation (n_classes=2) is supported")
        return value

    @field_validator("class_weights")
    @classmethod
    def _positive_weights(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        if min(value) <= 0:
            raise ConfigError(f"class weights must be positive, got {value}")
        return value

    @model_validator(mode="after")
    def _pair_loss_and_monitor(self) -> "SegConfig":
        if not self.decoder_channels or min(self.decoder_channels) < 1:
            raise ConfigError("decoder_channels must be a non-empty sequence of positive widths")
        if self.residual_blocks_per_stage < 0:
            raise ConfigError("residual_blocks_per_stage must be >= 0")
        if self.dice_eps <= 0:
            raise ConfigError("dice_eps must be positive")
        expected = MONITOR_FOR_LOSS[self.loss_kind]
        if self.monitor_metric is None:
            self.monitor_metric = expected
        elif self.monitor_metric != expected:
            raise ConfigError(f"loss {self.loss_kind} is monitored with {expected}, not {self.monitor_metric}")
        return self


def tokens_to_grid(encoder_out: Tensor, cfg: ModelConfig) -> Tensor:
    """
    [B, 1 + T*G*h*w, d] -> [B, d, h, w] from the last timestep's tokens.

    The cls token is dropped; spectral groups of the same cell are averaged.
    """
    b, n, d = encoder_out.shape
    if n != 1 + cfg.n_tokens:
        raise ShapeError(f"encoder output has {n} tokens, expected 1 + {cfg.n_tokens} (no masking)")
    h, w = cfg.grid
    last = encoder_out[:, 1 + (cfg.timesteps - 1) * cfg.tokens_per_step :]
    if cfg.spectral_groups > 1:
        last = last.reshape(b, cfg.spectral_groups, h * w, d).mean(axis=1)
    return last.transpose(0, 2, 1).reshape(b, d, h, w)


class ResidualBlock(Module):
    """x + conv(gelu(conv(x))) with 3x3 same-padded convolutions."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.conv2 = Conv2d(channels, channels, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(ops.gelu(self.conv1(x)))


class UpsampleStage(Module):
    def __init__(self, in_channels: int, out_channels: int, n_blocks: int, rng: np.random.Generator):
        self.up = ConvTranspose2d(in_channels, out_channels, 2, 2, rng)
        self.blocks = [ResidualBlock(out_channels, rng) for _ in range(n_blocks)]

    def forward(self, x: Tensor) -> Tensor:
        x = ops.gelu(self.up(x))
        for block in self.blocks:
            x = block(x)
        return x


class SegDecoder(Module):
    """1x1 projection, one doubling stage per decoder channel width, 1x1 classifier."""

    def __init__(self, embed_dim: int, model_cfg: ModelConfig, seg_cfg: SegConfig, rng: np.random.Generator):
        stages = int(round(math.log2(model_cfg.token_size)))
        if 2**stages != model_cfg.token_size or stages != len(seg_cfg.decoder_channels):
            raise ConfigError(
                f"{len(seg_cfg.decoder_channels)} decoder stages cannot upsample by token size {model_cfg.token_size}"
            )
        self.grid = model_cfg.grid
        channels = seg_cfg.decoder_channels
        self.proj = Conv2d(embed_dim, channels[0], 1, rng)
        self.stages = [
            UpsampleStage(channels[max(i - 1, 0)], c, seg_cfg.residual_blocks_per_stage, rng)
            for i, c in enumerate(channels)
        ]
        self.classifier = Conv2d(channels[-1], seg_cfg.n_classes, 1, rng)

    def forward(self, grid: Tensor) -> Tensor:
        if grid.ndim != 4 or grid.shape[2:] != self.grid:
            raise ShapeError(f"decoder expects a [B, d, {self.grid[0]}, {self.grid[1]}] grid, got {grid.shape}")
        x = self.proj(grid)
        for stage in self.stages:
            x = stage(x)
        return self.classifier(x)


def predict_mask(logits) -> np.ndarray:
    """Per-pixel argmax over [B, 2, H, W]; exact ties go to class 0."""
    values = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if values.ndim != 4 or values.shape[1] != 2:
        raise ShapeError(f"expected [B, 2, H, W] logits, got {values.shape}")
    return (values[:, 1] > values[:, 0]).astype(np.uint8)


class SegmentationModel(Module):
    """ViT encoder (pretrained or scratch) + segmentation decoder, trained end to end."""

    def __init__(self, model_cfg: ModelConfig, seg_cfg: SegConfig, rng: np.random.Generator):
        self.model_cfg = model_cfg
        self.seg_cfg = seg_cfg
        self.encoder = ViTEncoder(model_cfg, rng)
        self.head = SegDecoder(model_cfg.embed_dim, model_cfg, seg_cfg, rng)

    def forward(self, inputs: np.ndarray, timestamps: Sequence[Sequence[Timestamp]]) -> Tensor:
        latent = self.encoder(inputs, timestamps)
        return self.head(tokens_to_grid(latent, self.model_cfg))

    def predict(self, inputs: np.ndarray, timestamps: Sequence[Sequence[Timestamp]]) -> np.ndarray:
        with no_grad():
            return predict_mask(self.forward(inputs, timestamps))


def create_segmentation_model(
    model_cfg: Optional[ModelConfig] = None,
    seg_cfg: Optional[SegConfig] = None,
    encoder_state: Optional[Dict[str, np.ndarray]] = None,
    seed: int = 0,
) -> SegmentationModel:
    """
    Factory function to create a segmentation model.

    With encoder_state the encoder starts from pretrained weights; without it
    the whole network is trained from scratch.
    """
    model_cfg = model_cfg or ModelConfig()
    seg_cfg = seg_cfg or SegConfig()
    model = SegmentationModel(model_cfg, seg_cfg, np.random.default_rng(seed))
    if encoder_state is not None:
        loaded = model.encoder.load_state_dict(encoder_state, strict=True)
        logger.info(f"loaded {len(loaded)} pretrained encoder tensors")
    else:
        logger.info("encoder initialized from scratch")
    return model
