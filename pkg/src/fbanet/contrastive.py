"""Foreground/background contrastive module.

Masked feature maps are pooled into one foreground and one background
vector per sample, projected onto the unit sphere and contrasted:
same-role pairs across the batch are pulled together, foreground/background
pairs are pushed apart. Pair terms are re-weighted by ``exp(-alpha * rank)``
where the rank is taken jointly over the batch similarity set.

The module only needs a feature map and a soft mask, so it can be bolted
onto any backbone that exposes intermediate features.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from ._registry import differentiable

EPS = 1e-8
DEFAULT_ALPHA = 0.25

RankMode = Literal["positive", "negative"]
RankDirection = Literal["hard_first", "easy_first"]


class ShapeError(ValueError):
    """Raised when feature and mask spatial dimensions disagree."""


class SoftMask:
    """Foreground probabilities with an exact, lazy complement.

    ``1 - (1 - m)`` is not bit-identical to ``m`` in floating point, so the
    complement only flips which side is materialised.
    """

    __slots__ = ("_values", "_inverted")

    def __init__(self, values: torch.Tensor, inverted: bool = False):
        if isinstance(values, SoftMask):
            inverted = values._inverted != inverted
            values = values._values
        self._values = values
        self._inverted = inverted

    @property
    def foreground(self) -> torch.Tensor:
        return 1.0 - self._values if self._inverted else self._values

    @property
    def background(self) -> torch.Tensor:
        return self._values if self._inverted else 1.0 - self._values

    def complement(self) -> "SoftMask":
        return SoftMask(self._values, not self._inverted)

    @property
    def shape(self) -> torch.Size:
        return self._values.shape

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SoftMask):
            return NotImplemented
        return torch.equal(self.foreground, other.foreground)

    __hash__ = None  # type: ignore[assignment]


def complement(mask: Union[torch.Tensor, SoftMask]) -> SoftMask:
    return SoftMask(mask).complement()


@dataclass
class ReprPair:
    """Per-sample foreground/background embeddings, each of shape (n, d)."""

    z_f: torch.Tensor
    z_b: torch.Tensor
    degenerate_f: torch.Tensor
    degenerate_b: torch.Tensor

    @property
    def n(self) -> int:
        return self.z_f.shape[0]

    @property
    def valid(self) -> torch.Tensor:
        return ~(self.degenerate_f | self.degenerate_b)

    def select(self, index: torch.Tensor) -> "ReprPair":
        return ReprPair(self.z_f[index], self.z_b[index],
                        self.degenerate_f[index], self.degenerate_b[index])

    def swapped(self) -> "ReprPair":
        return ReprPair(self.z_b, self.z_f, self.degenerate_b, self.degenerate_f)


@dataclass
class ContrastiveTerms:
    pos_f: torch.Tensor
    pos_b: torch.Tensor
    neg: torch.Tensor
    pos_defined: bool = True
    infonce: Optional[torch.Tensor] = None

    @property
    def pos(self) -> torch.Tensor:
        return self.pos_f + self.pos_b

    @property
    def contra(self) -> torch.Tensor:
        if self.infonce is not None:
            return self.infonce
        return self.pos + self.neg


# --------------------------------------------------------------------------
# pooling and projection


@differentiable
def masked_pool(features: torch.Tensor, mask: Union[torch.Tensor, SoftMask]) -> torch.Tensor:
    """Mask-weighted spatial mean of ``features``.

    Args:
      features: (n, C, *spatial).
      mask: (n, *spatial) with entries in [0, 1].

    Returns:
      (n, C) tensor ``sum(f * m) / (sum(m) + 1e-8)``; an all-zero mask pools to zeros.
    """
    m = mask.foreground if isinstance(mask, SoftMask) else mask
    if features.dim() < 3 or m.shape != features.shape[:1] + features.shape[2:]:
        raise ShapeError(
            f"mask shape {tuple(m.shape)} does not match feature shape "
            f"{tuple(features.shape)} (expected mask (n, *spatial))"
        )
    m = m.to(features.dtype)
    spatial = tuple(range(2, features.dim()))
    num = (features * m.unsqueeze(1)).sum(dim=spatial)
    den = m.sum(dim=tuple(range(1, m.dim()))).unsqueeze(1)
    return num / (den + EPS)


class ProjectionHead(nn.Module):
    """Two-layer MLP: ``Linear(C, d) -> ReLU -> Linear(d, d)``."""

    def __init__(self, in_channels: int, proj_dim: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_channels, proj_dim),
            nn.ReLU(inplace=True),
            nn.Linear(proj_dim, proj_dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def _safe_norm(x: torch.Tensor) -> torch.Tensor:
    # zero rows would give NaN gradients through sqrt(0)
    sq = (x * x).sum(dim=-1, keepdim=True)
    zero = sq == 0
    return torch.where(zero, torch.zeros_like(sq), torch.sqrt(torch.where(zero, torch.ones_like(sq), sq)))


@differentiable
def project(pooled: torch.Tensor, head: Optional[nn.Module] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Map pooled vectors to unit-norm embeddings.

    Returns ``(z, degenerate)``. Rows whose head output is exactly zero stay
    zero and are flagged in the boolean ``degenerate`` vector.
    """
    if not torch.isfinite(pooled).all():
        raise ValueError("project: pooled input contains non-finite values")
    out = pooled if head is None else head(pooled)
    norm = _safe_norm(out)
    degenerate = (norm == 0).squeeze(-1)
    z = out / torch.where(norm == 0, torch.ones_like(norm), norm)
    return z, degenerate


def extract_reprs(
    features: torch.Tensor,
    mask: Union[torch.Tensor, SoftMask],
    head: Optional[nn.Module] = None,
) -> ReprPair:
    """Foreground and background embeddings for every sample.

    A side whose mask is empty (sum <= 1e-8) yields the zero vector and is
    flagged degenerate, independently of the head's bias.
    """
    mask = SoftMask(mask)
    spatial = tuple(range(1, len(mask.shape)))
    out = []
    for side in (mask.foreground, mask.background):
        z, degenerate = project(masked_pool(features, side), head)
        empty = side.sum(dim=spatial) <= EPS
        z = torch.where(empty.unsqueeze(-1), torch.zeros_like(z), z)
        out.append((z, degenerate | empty))
    (z_f, deg_f), (z_b, deg_b) = out
    return ReprPair(z_f, z_b, deg_f, deg_b)


# --------------------------------------------------------------------------
# similarities and rank weights


@differentiable
def cosine_sim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity along the last axis, ``a.b / (|a||b| + 1e-8)``."""
    return (a * b).sum(-1) / (_safe_norm(a).squeeze(-1) * _safe_norm(b).squeeze(-1) + EPS)


def similarity_matrix(a: torch.Tensor, b: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Pairwise cosine similarities ``s[i, j] = sim(a_i, b_j)``.

    With ``b`` omitted the result is exactly symmetric.
    """
    symmetric = b is None
    b = a if b is None else b
    s = (a @ b.transpose(0, 1)) / (_safe_norm(a) * _safe_norm(b).transpose(0, 1) + EPS)
    if symmetric:
        s = 0.5 * (s + s.transpose(0, 1))
    return s


def tie_tolerance(dtype: torch.dtype) -> float:
    return 8.0 * torch.finfo(dtype).eps


def rank_weights(
    sims: torch.Tensor,
    alpha: float = DEFAULT_ALPHA,
    mode: RankMode = "positive",
    direction: RankDirection = "hard_first",
) -> torch.Tensor:
    """Ranking weights ``exp(-alpha * rank)`` over a similarity matrix.

    Ranks are computed jointly over every eligible entry (the off-diagonal
    for ``positive`` mode, all entries for ``negative``). With
    ``hard_first`` rank 0 is the hardest pair: the least similar positive or
    the most similar negative. Entries closer than a few ulps tie and share
    the lower rank. Ineligible entries get weight 0. The result is detached.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if mode not in ("positive", "negative"):
        raise ValueError(f"unknown rank mode {mode!r}")
    if direction not in ("hard_first", "easy_first"):
        raise ValueError(f"unknown rank direction {direction!r}")
    sims = sims.detach()
    n, m = sims.shape
    eligible = torch.ones_like(sims, dtype=torch.bool)
    if mode == "positive":
        eligible &= ~torch.eye(n, m, dtype=torch.bool, device=sims.device)
    weights = torch.zeros_like(sims)
    vals = sims[eligible]
    if vals.numel() == 0:
        return weights
    # rank 0 goes to the smallest key
    low_first = (mode == "positive") == (direction == "hard_first")
    key = vals if low_first else -vals
    tol = tie_tolerance(sims.dtype)
    ranks = (key.unsqueeze(0) < key.unsqueeze(1) - tol).sum(dim=1)
    weights[eligible] = torch.exp(-alpha * ranks.to(sims.dtype))
    return weights


# --------------------------------------------------------------------------
# losses


@differentiable
def pos_loss(z: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Rank-weighted positive loss over same-role pairs ``i != j``.

    Returns 0 when fewer than two samples are given.
    """
    n = z.shape[0]
    if n < 2:
        return z.new_zeros(())
    s = similarity_matrix(z)
    off = ~torch.eye(n, dtype=torch.bool, device=z.device)
    arg = (weights * s)[off].clamp_min(EPS)
    return -arg.log().sum() / (n * (n - 1))


@differentiable
def neg_loss(z_f: torch.Tensor, z_b: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Rank-weighted negative loss over all ``n**2`` foreground/background pairs."""
    if z_f.shape != z_b.shape:
        raise ShapeError(f"z_f {tuple(z_f.shape)} and z_b {tuple(z_b.shape)} differ")
    n = z_f.shape[0]
    s = similarity_matrix(z_f, z_b)
    arg = (weights * (1.0 - s)).clamp_min(EPS)
    return -arg.log().sum() / (n * n)


def pair_weights(
    z_f: torch.Tensor,
    z_b: torch.Tensor,
    alpha: float = DEFAULT_ALPHA,
    direction: RankDirection = "hard_first",
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Rank weights for the fg-fg, bg-bg and fg-bg similarity matrices."""
    with torch.no_grad():
        w_ff = rank_weights(similarity_matrix(z_f), alpha, "positive", direction)
        w_bb = rank_weights(similarity_matrix(z_b), alpha, "positive", direction)
        w_fb = rank_weights(similarity_matrix(z_f, z_b), alpha, "negative", direction)
    return w_ff, w_bb, w_fb


@differentiable
def contrastive_loss(
    z_f: torch.Tensor,
    z_b: torch.Tensor,
    alpha: float = DEFAULT_ALPHA,
    direction: RankDirection = "hard_first",
    weights: Optional[Tuple[torch.Tensor, torch.Tensor, torch.Tensor]] = None,
) -> ContrastiveTerms:
    """Positive (fg and bg) plus negative rank-weighted losses.

    ``weights`` may be passed to freeze the ranking, e.g. for gradient checks.
    """
    if z_f.shape[0] < 1:
        raise ValueError("contrastive_loss needs at least one sample")
    w_ff, w_bb, w_fb = weights if weights is not None else pair_weights(z_f, z_b, alpha, direction)
    return ContrastiveTerms(
        pos_f=pos_loss(z_f, w_ff),
        pos_b=pos_loss(z_b, w_bb),
        neg=neg_loss(z_f, z_b, w_fb),
        pos_defined=z_f.shape[0] >= 2,
    )


@differentiable
def infonce_loss(z_f: torch.Tensor, z_b: torch.Tensor, temperature: float = 0.1) -> torch.Tensor:
    """InfoNCE baseline.

    Each anchor is contrasted against every same-role representation of
    another sample (the positive) versus the opposite-role representation of
    its own sample (the negative), giving two candidates per term. Averaged
    over anchors, positives and both roles.
    """
    n = z_f.shape[0]
    if n < 2:
        raise ValueError(f"infonce_loss needs at least 2 samples, got {n}")
    off = ~torch.eye(n, dtype=torch.bool, device=z_f.device)
    own_neg = cosine_sim(z_f, z_b) / temperature
    total = z_f.new_zeros(())
    for z in (z_f, z_b):
        logits = similarity_matrix(z) / temperature
        # -log(e^p / (e^p + e^q)) == softplus(q - p)
        total = total + F.softplus(own_neg.unsqueeze(1) - logits)[off].sum()
    return total / (2 * n * (n - 1))


# --------------------------------------------------------------------------
# plug-in module


def resample_mask(mask: torch.Tensor, size: Tuple[int, ...], mode: str = "area") -> torch.Tensor:
    """Resample (n, K, *spatial) soft masks to ``size`` keeping values in [0, 1]."""
    if tuple(mask.shape[2:]) == tuple(size):
        return mask
    if mode == "linear":
        mode = "bilinear" if len(size) == 2 else "trilinear"
        return F.interpolate(mask, size=size, mode=mode, align_corners=False)
    if mode == "area":
        return F.adaptive_avg_pool2d(mask, size) if len(size) == 2 else F.adaptive_avg_pool3d(mask, size)
    raise ValueError(f"unknown mask resampling mode {mode!r}")


class ContrastiveModule(nn.Module):
    """Attachable foreground/background contrastive head.

    ``forward(features, class_probs)`` takes a feature map (n, C, *spatial)
    and per-class probabilities (n, K, *spatial') with class 0 as
    background. One representation pair is built per foreground class
    (background = 1 - union of foreground classes) and the per-class losses
    are averaged. Samples with an empty side are left out of that class.
    """

    def __init__(
        self,
        in_channels: int,
        proj_dim: int = 64,
        alpha: float = DEFAULT_ALPHA,
        loss: Literal["fba", "infonce"] = "fba",
        rank_direction: RankDirection = "hard_first",
        temperature: float = 0.1,
        mask_resample: str = "area",
    ):
        super().__init__()
        if loss not in ("fba", "infonce"):
            raise ValueError(f"unknown contrastive loss {loss!r}")
        self.head = ProjectionHead(in_channels, proj_dim)
        self.alpha = alpha
        self.loss = loss
        self.rank_direction = rank_direction
        self.temperature = temperature
        self.mask_resample = mask_resample

    def reprs(self, features: torch.Tensor, class_probs: torch.Tensor) -> list:
        probs = resample_mask(class_probs.to(features.dtype), features.shape[2:], self.mask_resample)
        pairs = []
        if probs.shape[1] == 2:
            pairs.append(extract_reprs(features, probs[:, 1], self.head))
        else:
            background = (1.0 - probs[:, 1:].sum(dim=1)).clamp(0.0, 1.0)
            for k in range(1, probs.shape[1]):
                pair_fg = extract_reprs(features, probs[:, k], self.head)
                pair_bg = extract_reprs(features, background, self.head)
                pairs.append(ReprPair(pair_fg.z_f, pair_bg.z_f, pair_fg.degenerate_f, pair_bg.degenerate_f))
        return pairs

    def forward(self, features: torch.Tensor, class_probs: torch.Tensor) -> ContrastiveTerms:
        zero = features.new_zeros(())
        per_class = []
        for pair in self.reprs(features, class_probs):
            pair = pair.select(pair.valid)
            if self.loss == "fba":
                if pair.n == 0:
                    continue
                per_class.append(contrastive_loss(pair.z_f, pair.z_b, self.alpha, self.rank_direction))
            else:
                if pair.n < 2:
                    continue
                per_class.append(ContrastiveTerms(
                    zero, zero, zero, infonce=infonce_loss(pair.z_f, pair.z_b, self.temperature)))
        if not per_class:
            return ContrastiveTerms(zero, zero, zero, pos_defined=False)
        k = len(per_class)
        return ContrastiveTerms(
            pos_f=sum(t.pos_f for t in per_class) / k,
            pos_b=sum(t.pos_b for t in per_class) / k,
            neg=sum(t.neg for t in per_class) / k,
            pos_defined=all(t.pos_defined for t in per_class),
            infonce=sum(t.infonce for t in per_class) / k if self.loss == "infonce" else None,
        )
