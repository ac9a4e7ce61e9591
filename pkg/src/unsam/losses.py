"""Segmentation objective: focal + dice mixed by lambda, plus the token BCE."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .errors import ShapeError, ValidationError
from .spgen import spgen_loss

__all__ = ["LossReport", "focal_loss", "dice_loss", "seg_loss", "spgen_loss"]

_PROB_EPS = 1e-6


@dataclass
class LossReport:
    focal: float
    dice: float
    seg: float
    spgen: float
    total: float
    retained: int = 0   # self-prompt tokens kept by the gate

    def as_dict(self):
        return asdict(self)


def _check(prob, gt):
    if prob.shape != gt.shape:
        raise ShapeError(f"prediction {tuple(prob.shape)} vs target {tuple(gt.shape)}")
    return gt.to(prob.dtype)


def focal_loss(prob: torch.Tensor, gt: torch.Tensor, gamma: float = 2.0,
               alpha: float = 0.25) -> torch.Tensor:
    """Pixel mean of ``-alpha_t (1 - p_t)^gamma log p_t``."""
    gt = _check(prob, gt)
    prob = prob.clamp(_PROB_EPS, 1 - _PROB_EPS)
    p_t = prob * gt + (1 - prob) * (1 - gt)
    alpha_t = alpha * gt + (1 - alpha) * (1 - gt)
    return (-alpha_t * (1 - p_t) ** gamma * torch.log(p_t)).mean()


def dice_loss(prob: torch.Tensor, gt: torch.Tensor, eps: float = 1.0) -> torch.Tensor:
    """Soft dice over the last two axes, averaged over any leading ones."""
    gt = _check(prob, gt)
    inter = (prob * gt).sum(dim=(-2, -1))
    denom = prob.sum(dim=(-2, -1)) + gt.sum(dim=(-2, -1))
    return (1 - (2 * inter + eps) / (denom + eps)).mean()


def seg_loss(prob, gt, lam: float = 0.8, gamma: float = 2.0, alpha: float = 0.25,
             eps: float = 1.0, return_terms: bool = False):
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"lambda must lie in [0, 1], got {lam}")
    focal = focal_loss(prob, gt, gamma, alpha)
    dice = dice_loss(prob, gt, eps)
    seg = lam * focal + (1 - lam) * dice
    if return_terms:
        return seg, focal, dice
    return seg
