"""
Joint input/mask augmentation for fine-tuning
"""

from typing import Tuple

import numpy as np


def augment_pair(
    inputs: np.ndarray,
    mask: np.ndarray,
    rng: np.random.Generator,
    p: float = 0.5,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Random horizontal flip, vertical flip and 90 degree rotation, each with probability p.

    inputs is [..., H, W] and mask [H, W]; both receive the same transform.
    """
    if rng.random() < p:
        inputs, mask = inputs[..., :, ::-1], mask[:, ::-1]
    if rng.random() < p:
        inputs, mask = inputs[..., ::-1, :], mask[::-1, :]
    if rng.random() < p:
        inputs, mask = np.rot90(inputs, axes=(-2, -1)), np.rot90(mask)
    return np.ascontiguousarray(inputs), np.ascontiguousarray(mask)


def augment_batch(inputs: np.ndarray, masks: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Independent transforms per sample of [B, T, C, H, W] inputs and [B, H, W] masks."""
    pairs = [augment_pair(x, m, rng) for x, m in zip(inputs, masks)]
    return np.stack([x for x, _ in pairs]), np.stack([m for _, m in pairs])
