"""Total training objective: supervised Dice + contrastive + mutual consistency."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional

import torch
import torch.nn.functional as F

from ._registry import differentiable
from .contrastive import ContrastiveTerms, ShapeError
from .model import DualOutput, sharpen

DICE_EPS = 1e-5
ADDITIVITY_TOL = 1e-6


@dataclass
class LossTerms:
    """Named scalar loss components of one step; tensors keep the graph."""

    dice: torch.Tensor
    pos_f: torch.Tensor
    pos_b: torch.Tensor
    neg: torch.Tensor
    contra: torch.Tensor
    consist: torch.Tensor
    total: torch.Tensor
    lambda_contra: float = 1.0
    lambda_consist: float = 1.0
    dice_defined: bool = True
    pos_defined: bool = True

    SCALARS = ("dice", "pos_f", "pos_b", "neg", "contra", "consist", "total")

    def as_dict(self) -> Dict[str, float]:
        out = {name: float(torch.as_tensor(getattr(self, name)).detach()) for name in self.SCALARS}
        out["lambda_contra"] = float(self.lambda_contra)
        out["lambda_consist"] = float(self.lambda_consist)
        return out

    def additivity_error(self) -> float:
        d = self.as_dict()
        expected = d["dice"] + d["lambda_contra"] * d["contra"] + d["lambda_consist"] * d["consist"]
        return abs(d["total"] - expected)

    def check_additivity(self, tol: float = ADDITIVITY_TOL) -> bool:
        return self.additivity_error() <= tol

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_dict().values())


def _check_pair(prob: torch.Tensor, label: torch.Tensor) -> None:
    if prob.shape != label.shape:
        raise ShapeError(f"prob shape {tuple(prob.shape)} does not match label shape {tuple(label.shape)}")


@differentiable
def dice_loss(prob: torch.Tensor, label: torch.Tensor, include_background: bool = True) -> torch.Tensor:
    """Soft Dice loss ``1 - (2*sum(pq) + eps) / (sum(p) + sum(q) + eps)``.

    ``prob`` and the one-hot ``label`` are (n, K, *spatial); the score is
    computed per sample and class, then averaged.
    """
    _check_pair(prob, label)
    label = label.to(prob.dtype)
    if not include_background:
        prob, label = prob[:, 1:], label[:, 1:]
    spatial = tuple(range(2, prob.dim()))
    inter = (prob * label).sum(dim=spatial)
    denom = prob.sum(dim=spatial) + label.sum(dim=spatial)
    return (1.0 - (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)).mean()


@differentiable
def consistency_loss(prob1: torch.Tensor, prob2: torch.Tensor) -> torch.Tensor:
    """Cross pseudo-label MSE between the two decoders.

    Each decoder regresses onto the other's sharpened map; the targets are
    constants.
    """
    _check_pair(prob1, prob2)
    return F.mse_loss(prob1, sharpen(prob2)) + F.mse_loss(prob2, sharpen(prob1))


def one_hot(label: torch.Tensor, num_channels: int) -> torch.Tensor:
    """(n, *spatial) integer labels -> (n, K, *spatial) float one-hot."""
    oh = F.one_hot(label.long(), num_channels)
    return oh.movedim(-1, 1).to(torch.get_default_dtype())


def ramp_weight(iteration: int, length: int = 1000, kind: str = "gaussian") -> float:
    """Ramp-up factor in [0, 1]; ``exp(-5 (1 - t/length)^2)`` for the Gaussian ramp."""
    if kind == "none" or length <= 0:
        return 1.0
    if kind != "gaussian":
        raise ValueError(f"unknown ramp {kind!r}")
    t = min(max(iteration, 0), length) / length
    return float(math.exp(-5.0 * (1.0 - t) ** 2))


@differentiable
def total_loss(
    out: DualOutput,
    label_onehot: Optional[torch.Tensor],
    labeled: torch.Tensor,
    contra: Optional[ContrastiveTerms] = None,
    lambda_contra: float = 1.0,
    lambda_consist: float = 1.0,
) -> LossTerms:
    """Combine the three objective terms for one mixed batch.

    Dice is averaged over both decoders on the labeled rows only
    (``labeled`` is a boolean (n,) vector); consistency and the contrastive
    terms (computed by the caller) cover the whole batch.
    """
    zero = out.prob1.new_zeros(())
    dice_defined = bool(labeled.any())
    if dice_defined:
        lab = label_onehot[labeled]
        dice = 0.5 * (dice_loss(out.prob1[labeled], lab) + dice_loss(out.prob2[labeled], lab))
    else:
        dice = zero
    consist = consistency_loss(out.prob1, out.prob2)
    if contra is None:
        contra = ContrastiveTerms(zero, zero, zero, pos_defined=False)
    contra_value = contra.contra
    # composed in float64 so the logged total matches its parts to 1e-6 even at |total| >> 1
    total = (dice.double() + lambda_contra * contra_value.double()
             + lambda_consist * consist.double())
    return LossTerms(
        dice=dice, pos_f=contra.pos_f, pos_b=contra.pos_b, neg=contra.neg,
        contra=contra_value, consist=consist, total=total,
        lambda_contra=lambda_contra, lambda_consist=lambda_consist,
        dice_defined=dice_defined, pos_defined=contra.pos_defined,
    )

