"""Segmentation evaluation: binary Dice, HD95 in millimetres, volume
similarity, and nested-region mask composition.

All metrics operate on boolean masks over a (W, H, D) voxel grid with a
physical spacing in mm per voxel. HD95 treats foreground voxels as a point
set (index times spacing) and takes the larger of the two directed
95th-percentile distances with nearest-rank percentiles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .autodiff import ShapeError

CSV_HEADER = "region,dice,hd95_mm,volume_similarity"


@dataclass
class MetricsRow:
    region: str
    dice: float
    hd95_mm: float
    volume_similarity: float

    def csv_line(self) -> str:
        return (f"{self.region},{self.dice:.6f},{self.hd95_mm:.6f},"
                f"{self.volume_similarity:.6f}")


def rows_to_csv(rows: Iterable[MetricsRow]) -> str:
    return "\n".join([CSV_HEADER] + [r.csv_line() for r in rows]) + "\n"


def _check_masks(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask extents differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P∩G| / (|P|+|G|); defined as 1 when both masks are empty."""
    pred, gt = _check_masks(pred, gt)
    p = int(pred.sum())
    g = int(gt.sum())
    if p + g == 0:
        return 1.0
    inter = int(np.logical_and(pred, gt).sum())
    return 2.0 * inter / (p + g)


def _rank95(dists: np.ndarray) -> float:
    # Nearest-rank percentile: the ceil(0.95 n)-th smallest value.
    n = dists.size
    rank = math.ceil(0.95 * n)
    return float(np.sort(dists)[rank - 1])


def hd95(pred: np.ndarray, gt: np.ndarray,
         spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> float:
    """95th-percentile symmetric Hausdorff distance in mm.

    Both masks empty gives 0; exactly one empty gives the Euclidean diagonal
    of the physical volume as a sentinel penalty.
    """
    pred, gt = _check_masks(pred, gt)
    spacing = np.asarray(spacing, dtype=np.float64)
    if spacing.shape != (pred.ndim,) or np.any(spacing <= 0):
        raise ShapeError(f"spacing must be {pred.ndim} positive values")
    p_empty = not pred.any()
    g_empty = not gt.any()
    if p_empty and g_empty:
        return 0.0
    if p_empty or g_empty:
        extent = np.asarray(pred.shape, dtype=np.float64) * spacing
        return float(np.sqrt(np.sum(extent * extent)))
    p_pts = np.argwhere(pred).astype(np.float64) * spacing
    g_pts = np.argwhere(gt).astype(np.float64) * spacing
    d_pg, _ = cKDTree(g_pts).query(p_pts)
    d_gp, _ = cKDTree(p_pts).query(g_pts)
    return max(_rank95(d_pg), _rank95(d_gp))


def volume_similarity(pred: np.ndarray, gt: np.ndarray) -> float:
    """1 - |V_p - V_g| / (V_p + V_g); defined as 1 when both masks are empty."""
    pred, gt = _check_masks(pred, gt)
    vp = int(pred.sum())
    vg = int(gt.sum())
    if vp + vg == 0:
        return 1.0
    return 1.0 - abs(vp - vg) / (vp + vg)


def nested_region_masks(labels: np.ndarray,
                        regions: Sequence[tuple[str, set[int] | Sequence[int]]],
                        num_classes: int) -> list[tuple[str, np.ndarray]]:
    """Compose (name, class-index set) specs into union masks.

    Supports nested specs such as enhancing-core/core/whole composition,
    where each successive region's class set contains the previous one's.
    """
    labels = np.asarray(labels)
    out = []
    for name, classes in regions:
        mask = np.zeros(labels.shape, dtype=bool)
        for c in classes:
            if not (0 <= int(c) < num_classes):
                raise ShapeError(
                    f"region {name!r}: class {c} outside [0, {num_classes})")
            mask |= labels == int(c)
        out.append((name, mask))
    return out


def evaluate_regions(pred_labels: np.ndarray, gt_labels: np.ndarray,
                     regions: Sequence[tuple[str, set[int] | Sequence[int]]],
                     num_classes: int,
                     spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> list[MetricsRow]:
    """One MetricsRow per region, comparing predicted and ground-truth labels."""
    pred_masks = nested_region_masks(pred_labels, regions, num_classes)
    gt_masks = nested_region_masks(gt_labels, regions, num_classes)
    rows = []
    for (name, pm), (_, gm) in zip(pred_masks, gt_masks):
        rows.append(MetricsRow(
            region=name,
            dice=dice_score(pm, gm),
            hd95_mm=hd95(pm, gm, spacing),
            volume_similarity=volume_similarity(pm, gm),
        ))
    return rows
