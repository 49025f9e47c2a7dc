"""Training losses: smoothed Dice plus summed binary cross entropy.

Dice operates on probabilities; BCE is evaluated on the pre-sigmoid
logits in the numerically stable form. Both sum over all voxels, and
the composite is their plain unweighted sum.
"""

from __future__ import annotations

import numpy as np

from . import functional as F
from .tensor import Tensor

DICE_EPS = 1e-5


def dice_loss(probs: Tensor, target: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)."""
    if probs.data.shape != target.shape:
        raise ValueError(f"shape mismatch: probs {probs.data.shape}, target {target.shape}")
    t = Tensor(np.asarray(target, dtype=probs.dtype))
    intersection = (probs * t).sum()
    denom = probs.sum() + float(target.sum())
    return 1.0 - (2.0 * intersection + eps) / (denom + eps)


def bce_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Voxel-summed binary cross entropy on logits."""
    return F.bce_with_logits_sum(logits, np.asarray(target))


def dice_bce_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """dice_loss(sigmoid(logits)) + bce_loss(logits), unweighted."""
    return dice_loss(F.sigmoid(logits), target) + bce_loss(logits, target)
