"""Segmentation metrics: mask IoU, dataset-aggregated mIoU, grounding mIoU
(per-image ground-truth query sets), and proposal recall at IoU thresholds.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

RECALL_THRESHOLDS = (0.5, 0.7, 0.9)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Binary IoU. Both masks empty counts as a vacuous match (1.0); exactly
    one empty is 0.0."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


@dataclass
class ConfusionAccumulator:
    """Per-category intersection/union tallies aggregated over a dataset.

    Categories absent from both predictions and ground truth everywhere are
    excluded from the mean.
    """

    num_categories: int
    intersection: np.ndarray = field(init=False)
    union: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.num_categories < 1:
            raise ValueError("need at least one category")
        self.intersection = np.zeros(self.num_categories, dtype=np.int64)
        self.union = np.zeros(self.num_categories, dtype=np.int64)

    def add(self, pred: np.ndarray, gt: np.ndarray) -> None:
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}")
        for arr, name in ((pred, "prediction"), (gt, "ground truth")):
            if arr.size and (arr.min() < 0 or arr.max() >= self.num_categories):
                raise ValueError(f"{name} label out of range [0, {self.num_categories})")
        for k in range(self.num_categories):
            p = pred == k
            g = gt == k
            self.intersection[k] += np.logical_and(p, g).sum()
            self.union[k] += np.logical_or(p, g).sum()

    def merge(self, other: "ConfusionAccumulator") -> None:
        if other.num_categories != self.num_categories:
            raise ValueError("category counts differ")
        self.intersection += other.intersection
        self.union += other.union

    def per_category_iou(self) -> np.ndarray:
        """IoU per category; NaN where the category never occurred."""
        with np.errstate(invalid="ignore"):
            return np.where(self.union > 0,
                            self.intersection / np.maximum(self.union, 1),
                            np.nan)

    def miou(self) -> float:
        iou = self.per_category_iou()
        present = ~np.isnan(iou)
        if not present.any():
            raise ValueError("no category is present in predictions or ground truth")
        return float(iou[present].mean())


def miou(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray],
         num_categories: int) -> float:
    """Dataset-aggregated mean IoU (sum intersections/unions, then divide)."""
    if len(preds) != len(gts):
        raise ValueError("preds and gts must pair up")
    acc = ConfusionAccumulator(num_categories)
    for p, g in zip(preds, gts):
        acc.add(p, g)
    return acc.miou()


def grounding_miou(run_inference: Callable[[np.ndarray, list[str]], np.ndarray],
                   items: Iterable[tuple[np.ndarray, np.ndarray, list[str]]],
                   categories: Sequence[str]) -> float:
    """mIoU where each image is queried with only its ground-truth categories.

    ``items`` yields (image, gt label map over the global category list,
    names of the categories present in that image). ``run_inference`` maps
    (image, query names) to a label map over those query names, which is
    translated back to global indices for aggregation.
    """
    global_index = {name: k for k, name in enumerate(categories)}
    acc = ConfusionAccumulator(len(categories))
    for image, gt, present in items:
        if not present:
            warnings.warn("skipping an image with zero ground-truth categories")
            continue
        unknown = [n for n in present if n not in global_index]
        if unknown:
            raise ValueError(f"ground-truth categories outside the global list: {unknown}")
        local = run_inference(image, list(present))
        pred = np.asarray([global_index[n] for n in present])[local]
        acc.add(pred, gt)
    return acc.miou()


def best_iou_per_gt(proposals: np.ndarray, gt_masks: np.ndarray) -> np.ndarray:
    """Best IoU over proposals for each ground-truth mask (reuse allowed)."""
    if proposals.ndim != 3 or gt_masks.ndim != 3:
        raise ValueError("expected (N, H', W') proposals and (M, H', W') masks")
    out = np.empty(gt_masks.shape[0])
    for j, gt in enumerate(gt_masks):
        out[j] = max(mask_iou(p, gt) for p in proposals)
    return out


def proposal_recall(proposals: np.ndarray, gt_masks: np.ndarray,
                    thresholds: Sequence[float] = RECALL_THRESHOLDS
                    ) -> dict[float, float]:
    """Fraction of ground-truth masks whose best-IoU proposal clears each
    threshold. Proposals may match multiple ground-truth masks."""
    if proposals.shape[0] < 1 or gt_masks.shape[0] < 1:
        raise ValueError("need at least one proposal and one ground-truth mask")
    best = best_iou_per_gt(proposals, gt_masks)
    return {float(t): float((best >= t).mean()) for t in thresholds}


def recall_from_best_ious(best_ious: np.ndarray,
                          thresholds: Sequence[float] = RECALL_THRESHOLDS
                          ) -> dict[float, float]:
    """Dataset-level recall from pooled per-gt best IoUs."""
    best_ious = np.asarray(best_ious, dtype=np.float64)
    if best_ious.size == 0:
        raise ValueError("no ground-truth masks to score")
    return {float(t): float((best_ious >= t).mean()) for t in thresholds}


def build_report(*, categories: Sequence[str] | None = None,
                 confusion: ConfusionAccumulator | None = None,
                 grounding: float | None = None,
                 recall: dict[float, float] | None = None,
                 extra: dict | None = None) -> dict:
    """Assemble the structured JSON evaluation report."""
    report: dict = {}
    if confusion is not None:
        iou = confusion.per_category_iou()
        names = categories if categories is not None else [
            str(k) for k in range(confusion.num_categories)]
        report["per_category_iou"] = {
            name: (None if np.isnan(v) else float(v))
            for name, v in zip(names, iou)}
        report["miou"] = confusion.miou()
    if grounding is not None:
        report["grounding_miou"] = float(grounding)
    if recall is not None:
        report["proposal_recall"] = {f"{t:g}": float(v) for t, v in recall.items()}
    if extra:
        report.update(extra)
    return report
