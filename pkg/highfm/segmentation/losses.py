"""
Segmentation objectives
Class-weighted cross-entropy (recall-oriented) and foreground soft Dice (precision-oriented)
"""

from typing import Tuple

import numpy as np

from highfm import config
from highfm.errors import ContractError, ShapeError
from highfm.numerics import ops
from highfm.numerics.tensor import Tensor


def _check_target(logits: Tensor, target: np.ndarray) -> np.ndarray:
    target = np.asarray(target)
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise ShapeError(f"expected [B, 2, H, W] logits, got {logits.shape}")
    if target.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"target {target.shape} does not match logits {logits.shape}")
    if not np.isin(target, (0, 1)).all():
        raise ContractError("segmentation targets must be exactly 0 or 1")
    return target.astype(np.int64)


def weighted_ce(logits: Tensor, target: np.ndarray, weights: Tuple[float, float] = (1.0, 1.0)) -> Tensor:
    """sum(w[t_i] * -log softmax(logits_i)[t_i]) / sum(w[t_i])"""
    w_neg, w_pos = float(weights[0]), float(weights[1])
    if w_neg <= 0 or w_pos <= 0:
        raise ValueError(f"class weights must be positive, got {weights}")
    target = _check_target(logits, target)

    log_probs = ops.log_softmax_lastdim(logits.transpose(0, 2, 3, 1))
    onehot = np.eye(2)[target]
    nll = -(log_probs * onehot).sum(axis=-1)
    pixel_weights = np.where(target == 1, w_pos, w_neg)
    return (nll * pixel_weights).sum() * (1.0 / float(pixel_weights.sum()))


def dice_loss(logits: Tensor, target: np.ndarray, eps: float = config.DICE_EPS) -> Tensor:
    """1 - (2 * sum(p * t) + eps) / (sum(p) + sum(t) + eps) on the positive-class probability."""
    if eps <= 0:
        raise ValueError("dice eps must be positive")
    target = _check_target(logits, target)
    probs = ops.softmax_lastdim(logits.transpose(0, 2, 3, 1))[..., 1]
    t = target.astype(np.float64)
    overlap = (probs * t).sum()
    score = (overlap * 2.0 + eps) / (probs.sum() + float(t.sum()) + eps)
    return 1.0 - score


def segmentation_loss(logits: Tensor, target: np.ndarray, loss_kind: str, weights=(1.0, 1.0), eps=config.DICE_EPS):
    if loss_kind == "weighted_ce":
        return weighted_ce(logits, target, weights)
    if loss_kind == "dice":
        return dice_loss(logits, target, eps)
    raise ValueError(f"unknown loss kind: {loss_kind}")
