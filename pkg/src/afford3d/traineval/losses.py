"""Segmentation and routing losses on autodiff tensors."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .. import autodiff as ad
from ..autodiff import Tensor

DICE_EPS = 1e-6
BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 1.0
    lambda_b: float = 1.0
    lambda_d: float = 1.0

    def __post_init__(self):
        ws = (self.lambda_c, self.lambda_b, self.lambda_d)
        if any(w < 0 for w in ws) or not any(w > 0 for w in ws):
            raise ValueError(f"loss weights must be non-negative with at least one > 0, got {ws}")


def _check(pred: Tensor, gt: Tensor, name: str) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"{name}: prediction shape {pred.shape} != ground truth {gt.shape}")


def dice_loss(pred, gt) -> Tensor:
    pred, gt = ad.as_tensor(pred), ad.as_tensor(gt)
    _check(pred, gt, "dice_loss")
    inter = ad.sum_(pred * gt)
    return 1.0 - (2.0 * inter + DICE_EPS) / (ad.sum_(pred) + ad.sum_(gt) + DICE_EPS)


def bce_loss(pred, gt) -> Tensor:
    pred, gt = ad.as_tensor(pred), ad.as_tensor(gt)
    _check(pred, gt, "bce_loss")
    p = ad.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -ad.mean(gt * ad.log(p) + (1.0 - gt) * ad.log(1.0 - p))


def text_loss(logits, gt_len: int) -> Tensor:
    """Softmax cross-entropy of the routing logits against the true slot count."""
    logits = ad.as_tensor(logits)
    s_max = logits.shape[-1]
    if not 1 <= gt_len <= s_max:
        raise ValueError(f"text_loss: ground-truth length {gt_len} outside 1..{s_max}")
    return -ad.reshape(ad.log_softmax(ad.reshape(logits, (1, s_max)))[0, gt_len - 1], ())


def total_loss(weights: LossWeights, bce_terms: Sequence[Tensor], dice_terms: Sequence[Tensor],
               l_c) -> Tensor:
    if len(bce_terms) != len(dice_terms) or not bce_terms:
        raise ValueError(f"total_loss: {len(bce_terms)} BCE terms vs {len(dice_terms)} Dice terms")
    l_b = ad.sum_(ad.concat([ad.reshape(t, (1,)) for t in bce_terms])) * (1.0 / len(bce_terms))
    l_d = ad.sum_(ad.concat([ad.reshape(t, (1,)) for t in dice_terms])) * (1.0 / len(dice_terms))
    return weights.lambda_c * ad.as_tensor(l_c) + weights.lambda_b * l_b + weights.lambda_d * l_d
