"""
Masked-autoencoder pretraining model
"""

from highfm.mae.checkpoint import encoder_state, load_checkpoint, save_checkpoint
from highfm.mae.mae_model import (
    MAEDecoder,
    MaskedAutoencoder,
    MaskPlan,
    ModelConfig,
    PretrainBatch,
    ViTEncoder,
    create_mae_model,
    detokenize,
    draw_plans,
    encoder_parameter_count,
    encoder_parameter_shapes,
    make_pretrain_batch,
    patchify,
    pretrain_step,
    random_mask,
    recon_loss,
    tokenize,
    unpatchify,
)

__all__ = [
    "MAEDecoder",
    "MaskPlan",
    "MaskedAutoencoder",
    "ModelConfig",
    "PretrainBatch",
    "ViTEncoder",
    "create_mae_model",
    "detokenize",
    "draw_plans",
    "encoder_parameter_count",
    "encoder_parameter_shapes",
    "encoder_state",
    "load_checkpoint",
    "make_pretrain_batch",
    "patchify",
    "pretrain_step",
    "random_mask",
    "recon_loss",
    "save_checkpoint",
    "tokenize",
    "unpatchify",
]
