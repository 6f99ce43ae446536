"""
Model-level gradient checks
Pretraining loss and both fine-tuning losses on a toy geometry in 64-bit mode
"""

import logging
from typing import Dict, Optional

import numpy as np

from highfm.encodings import Timestamp
from highfm.mae.mae_model import ModelConfig, create_mae_model, make_pretrain_batch
from highfm.numerics.gradcheck import GradCheckReport, grad_check
from highfm.numerics.tensor import precision
from highfm.segmentation.losses import dice_loss, weighted_ce
from highfm.segmentation.seg_head import SegConfig, create_segmentation_model

logger = logging.getLogger(__name__)

TOY_DECODER_CHANNELS = (8, 8)


def _toy_inputs(cfg: ModelConfig, batch: int, rng: np.random.Generator):
    shape = (batch, cfg.timesteps, cfg.bands, cfg.image_size, cfg.image_size)
    patches = rng.normal(size=shape)
    start = Timestamp.from_calendar(2020, 200, 600).epoch_seconds
    timestamps = [[Timestamp.from_epoch(start + 900 * t) for t in range(cfg.timesteps)] for _ in range(batch)]
    return patches, timestamps


def model_grad_checks(
    cfg: Optional[ModelConfig] = None,
    tol: float = 1e-4,
    h: float = 1e-3,
    seed: int = 0,
    batch: int = 2,
    max_coords_per_param: Optional[int] = 4,
) -> Dict[str, GradCheckReport]:
    """
    Finite-difference check of every parameter's gradient under the three training losses.

    Returns:
        {"pretrain": ..., "weighted_ce": ..., "dice": ...}
    """
    cfg = cfg or ModelConfig.toy()
    rng = np.random.default_rng(seed)
    reports: Dict[str, GradCheckReport] = {}
    with precision("float64"):
        patches, timestamps = _toy_inputs(cfg, batch, rng)

        mae = create_mae_model(cfg, seed=seed)
        pb = make_pretrain_batch(patches, timestamps, cfg, rng)
        reports["pretrain"] = grad_check(
            lambda: mae.forward_loss(pb)[0],
            dict(mae.named_parameters()),
            h=h,
            tol=tol,
            max_coords_per_param=max_coords_per_param,
            seed=seed,
        )

        # Both classes present so the losses are not degenerate.
        target = (rng.random((batch, cfg.image_size, cfg.image_size)) < 0.3).astype(np.uint8)
        target[:, 0, 0] = 1
        target[:, -1, -1] = 0
        for name, loss_fn in (
            ("weighted_ce", lambda logits: weighted_ce(logits, target, (1.0, 5.0))),
            ("dice", lambda logits: dice_loss(logits, target)),
        ):
            seg_cfg = SegConfig(decoder_channels=TOY_DECODER_CHANNELS, loss_kind=name)
            model = create_segmentation_model(cfg, seg_cfg, seed=seed)
            reports[name] = grad_check(
                lambda model=model, loss_fn=loss_fn: loss_fn(model(patches, timestamps)),
                dict(model.named_parameters()),
                h=h,
                tol=tol,
                max_coords_per_param=max_coords_per_param,
                seed=seed,
            )
    for name, report in reports.items():
        logger.info(f"grad check {name}: max rel error {report.max_rel_error:.2e} over {report.checked} coordinates")
    return reports
