"""
Fine-tuning for binary segmentation
"""

from highfm.segmentation.augment import augment_batch, augment_pair
from highfm.segmentation.export import export_predictions
from highfm.segmentation.losses import dice_loss, segmentation_loss, weighted_ce
from highfm.segmentation.seg_head import (
    SegConfig,
    SegDecoder,
    SegmentationModel,
    create_segmentation_model,
    predict_mask,
    tokens_to_grid,
)

__all__ = [
    "SegConfig",
    "SegDecoder",
    "SegmentationModel",
    "augment_batch",
    "augment_pair",
    "create_segmentation_model",
    "dice_loss",
    "export_predictions",
    "predict_mask",
    "segmentation_loss",
    "tokens_to_grid",
    "weighted_ce",
]
