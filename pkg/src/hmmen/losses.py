"""Training losses computed from logits.

Binary cross-entropy is evaluated in log-space (log-sigmoid) so saturated
logits stay finite; the Dice term carries an epsilon guard so empty masks do
not divide by zero.  Dice is computed over the whole batch, not averaged per
image, which matters under heavy class imbalance.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ContractViolation


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    epsilon: float = 1e-7

    def __post_init__(self):
        if self.lam < 0:
            raise ContractViolation("lambda must be nonnegative")
        if not 0 < self.epsilon < 1e-3:
            raise ContractViolation("epsilon must lie in (0, 1e-3)")


def _check(logits: torch.Tensor, gt_mask: torch.Tensor) -> None:
    if logits.shape != gt_mask.shape:
        raise ContractViolation(
            f"logits {tuple(logits.shape)} and mask {tuple(gt_mask.shape)} differ")
    bad = (gt_mask != 0) & (gt_mask != 1)
    if bool(bad.any()):
        raise ContractViolation("ground truth mask must be strictly binary")


def bce_loss(logits: torch.Tensor, gt_mask: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over all pixels in the batch."""
    _check(logits, gt_mask)
    g = gt_mask.to(logits.dtype)
    # log p = logsigmoid(z), log(1-p) = logsigmoid(-z)
    per_pixel = g * F.logsigmoid(logits) + (1 - g) * F.logsigmoid(-logits)
    return -per_pixel.mean()


def dice_loss(logits: torch.Tensor, gt_mask: torch.Tensor,
              epsilon: float = 1e-7) -> torch.Tensor:
    """1 - (2*sum(g*p)+eps) / (sum(g^2)+sum(p^2)+eps), p = sigmoid(logits)."""
    _check(logits, gt_mask)
    g = gt_mask.to(logits.dtype)
    p = torch.sigmoid(logits)
    num = 2 * (g * p).sum() + epsilon
    den = (g * g).sum() + (p * p).sum() + epsilon
    return 1 - num / den


def total_loss(logits: torch.Tensor, gt_mask: torch.Tensor,
               config: LossConfig = LossConfig()) -> torch.Tensor:
    return bce_loss(logits, gt_mask) + config.lam * dice_loss(
        logits, gt_mask, config.epsilon)
