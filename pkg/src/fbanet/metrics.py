"""Dice similarity and average surface distance for binary and multi-class masks."""

from __future__ import annotations

from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .contrastive import ShapeError


class EmptySurface(ValueError):
    """One of the masks has no surface voxels, so ASD is undefined."""

    def __init__(self, side: str):
        self.side = side
        super().__init__(f"{side} mask is empty; average surface distance is undefined")


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred shape {pred.shape} does not match gt shape {gt.shape}")
    return pred, gt


def dice_score(pred, gt) -> float:
    """``2|A n B| / (|A| + |B|)``; two empty masks score 1.0."""
    pred, gt = _pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def surface_voxels(mask) -> np.ndarray:
    """Coordinates (k, ndim) of foreground voxels with a background face-neighbour.

    Voxels outside the array count as background.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros((0, mask.ndim), dtype=np.int64)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    interior = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return np.argwhere(mask & ~interior)


def _spacing(spacing, ndim) -> np.ndarray:
    sp = np.ones(ndim) if spacing is None else np.asarray(spacing, dtype=float)
    if sp.shape != (ndim,) or np.any(sp <= 0):
        raise ValueError(f"spacing must be {ndim} positive values, got {spacing}")
    return sp


def asd(pred, gt, spacing: Optional[Sequence[float]] = None) -> float:
    """Symmetric average surface distance in physical units.

    Mean over both surfaces of each voxel's distance to the nearest voxel of
    the other surface.

    Raises:
      EmptySurface: if either mask is empty (``side`` is "pred" or "gt").
    """
    pred, gt = _pair(pred, gt)
    sp = _spacing(spacing, pred.ndim)
    s_pred = surface_voxels(pred) * sp
    s_gt = surface_voxels(gt) * sp
    if len(s_pred) == 0:
        raise EmptySurface("pred")
    if len(s_gt) == 0:
        raise EmptySurface("gt")
    d_pg, _ = cKDTree(s_gt).query(s_pred)
    d_gp, _ = cKDTree(s_pred).query(s_gt)
    return float((d_pg.mean() + d_gp.mean()) / 2.0)


def evaluate_case(pred_labels, gt_labels, num_classes: int, spacing=None) -> List[Dict[str, float]]:
    """Per-class Dice and ASD for integer label maps (class 0 is background).

    ASD is NaN for classes where either side is empty.
    """
    rows = []
    for k in range(1, num_classes + 1):
        p = np.asarray(pred_labels) == k
        g = np.asarray(gt_labels) == k
        try:
            dist = asd(p, g, spacing)
        except EmptySurface:
            dist = float("nan")
        rows.append({"class": k, "dice": dice_score(p, g), "asd": dist})
    return rows


def aggregate(rows: List[Dict[str, float]]) -> Dict[str, float]:
    """Macro-average per-case, per-class rows into mean/std summaries."""
    dice = np.array([r["dice"] for r in rows], dtype=float)
    dist = np.array([r["asd"] for r in rows], dtype=float)
    finite = dist[np.isfinite(dist)]
    return {
        "dice_mean": float(dice.mean()) if dice.size else float("nan"),
        "dice_std": float(dice.std()) if dice.size else float("nan"),
        "asd_mean": float(finite.mean()) if finite.size else float("nan"),
        "asd_std": float(finite.std()) if finite.size else float("nan"),
        "asd_undefined": int(dist.size - finite.size),
        "n": int(dice.size),
    }
