"""
Training objectives. Probability maps are [..., H, W] tensors in [0, 1]; reductions are over the last two axes.
"""
from dataclasses import dataclass
from typing import Tuple

import torch

from dpersona.common import ContractViolation, ConfigurationError

DICE_EPS = 1e-6


def dice_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """
    1 - (2 sum(p t) + eps) / (sum p + sum t + eps), per map. Returns a tensor of the leading shape
    (a scalar for a single [H, W] map).
    """
    if pred.shape != target.shape:
        raise ContractViolation(f"dice_loss shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    target = target.to(pred.dtype)
    inter = (pred * target).sum(dim=(-2, -1))
    total = pred.sum(dim=(-2, -1)) + target.sum(dim=(-2, -1))
    return 1 - (2 * inter + eps) / (total + eps)


@dataclass
class BoundTargets:
    intersection: torch.Tensor
    union: torch.Tensor


def bound_targets(annotations: torch.Tensor) -> BoundTargets:
    """Pixelwise AND / OR over the rater axis (-3) of [..., R, H, W] binary annotations."""
    if annotations.dim() < 3 or annotations.shape[-3] < 1:
        raise ContractViolation(f"bound_targets needs [..., R, H, W] with R >= 1, got {tuple(annotations.shape)}")
    a = annotations > 0.5
    return BoundTargets(a.all(dim=-3).to(annotations.dtype), a.any(dim=-3).to(annotations.dtype))


def bound_predictions(preds: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Soft intersection (min) and union (max) of K predictions stacked on axis -3: [..., K, H, W].
    """
    if preds.dim() < 3 or preds.shape[-3] < 2:
        raise ContractViolation(f"bound_predictions needs K >= 2 maps, got {tuple(preds.shape)}")
    return preds.amin(dim=-3), preds.amax(dim=-3)


def loss_bound(soft_inter: torch.Tensor, soft_union: torch.Tensor, targets: BoundTargets) -> torch.Tensor:
    return dice_loss(soft_inter, targets.intersection) + dice_loss(soft_union, targets.union)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.5
    l2: float = 1e-5

    def __post_init__(self):
        for name in ("alpha", "beta", "l2"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"Loss weight {name} must be nonnegative, got {getattr(self, name)}")


def loss_stage1(kl: torch.Tensor, seg_rand: torch.Tensor, bound: torch.Tensor, w: LossWeights = LossWeights()):
    """kl + alpha * seg_rand + beta * bound. The L2 term is applied by the optimizer as weight decay."""
    return kl + w.alpha * seg_rand + w.beta * bound


def loss_stage2(preds: torch.Tensor, annotations: torch.Tensor) -> torch.Tensor:
    """
    Sum over raters of dice_loss(preds[..., i, :, :], annotations[..., i, :, :]) for [..., R, H, W] inputs.
    """
    if preds.shape[-3] != annotations.shape[-3]:
        raise ContractViolation(f"{preds.shape[-3]} personalized predictions for {annotations.shape[-3]} raters")
    return dice_loss(preds, annotations).sum(dim=-1)
