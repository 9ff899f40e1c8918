"""Training objective: soft Dice plus cross-entropy, equally weighted.

Both losses consume voxel-wise class probabilities of shape
``(num_classes, W, H, D)`` and a target given either as an integer label
volume ``(W, H, D)`` or as a one-hot array/tensor matching the probability
shape. Targets are treated as constants; only the probabilities receive
gradients.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

DICE_EPS = 1e-5
LOG_FLOOR = 1e-12


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(W, H, D) class indices -> (num_classes, W, H, D) indicator array."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ShapeError(
            f"one_hot: label values outside [0, {num_classes}) present")
    out = np.zeros((num_classes,) + labels.shape, dtype=dtype)
    for k in range(num_classes):
        out[k] = labels == k
    return out


def _as_target(target, probs: Tensor) -> Tensor:
    if isinstance(target, Tensor):
        arr = target.data
    else:
        arr = np.asarray(target)
    if np.issubdtype(arr.dtype, np.integer):
        arr = one_hot(arr, probs.shape[0], dtype=probs.data.dtype)
    if arr.shape != probs.shape:
        raise ShapeError(
            f"loss target shape {arr.shape} does not match probs {probs.shape}")
    return ad.constant(arr.astype(probs.data.dtype, copy=False))


def dice_loss(probs: Tensor, target) -> Tensor:
    """1 - mean over classes of (2 sum(p*g) + eps) / (sum(p) + sum(g) + eps)."""
    if probs.ndim != 4:
        raise ShapeError(f"dice_loss: probs must be (K, W, H, D), got {probs.shape}")
    g = _as_target(target, probs)
    spatial = (1, 2, 3)
    inter = ad.sum_(ad.mul(probs, g), axes=spatial)
    denom = ad.shift(ad.add(ad.sum_(probs, axes=spatial), ad.sum_(g, axes=spatial)),
                     DICE_EPS)
    dice_per_class = ad.div(ad.shift(ad.scale(inter, 2.0), DICE_EPS), denom)
    return ad.shift(ad.neg(ad.mean(dice_per_class)), 1.0)


def cross_entropy_loss(probs: Tensor, target) -> Tensor:
    """-mean over voxels of log p(true class), probabilities floored at 1e-12."""
    if probs.ndim != 4:
        raise ShapeError(
            f"cross_entropy_loss: probs must be (K, W, H, D), got {probs.shape}")
    g = _as_target(target, probs)
    p_true = ad.sum_(ad.mul(probs, g), axes=0)
    return ad.neg(ad.mean(ad.log(ad.clamp_min(p_true, LOG_FLOOR))))


def combined_loss(probs: Tensor, target) -> Tensor:
    """dice_loss + cross_entropy_loss with equal weights."""
    return ad.add(dice_loss(probs, target), cross_entropy_loss(probs, target))
