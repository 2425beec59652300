"""Checkpoint-level orchestration: query-driven segmentation of single
images and dataset evaluation (mIoU, grounding mIoU, proposal recall).

Ground-truth categories for the synthetic shapes world are recovered from
captions: object masks pair with the caption's "{color} {shape}" phrases in
order, and the final mask is the background.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from . import inference
from .data import Sample, SegmentationResult
from .metrics import ConfusionAccumulator, best_iou_per_gt, recall_from_best_ious
from .model import VisionModel, stack_images
from .synthgen import parse_caption
from .text import CategoryQueries, EmbeddingProvider, phrase_rows

BACKGROUND_NAME = "background"


class GroundTruthError(ValueError):
    """The sample's caption/masks do not encode category ground truth."""


def sample_ground_truth(sample: Sample) -> tuple[np.ndarray, list[str]]:
    """(gt label map over the sample's own category names, names per mask).

    The returned label map indexes into the returned name list, which has one
    entry per mask (objects in caption order, then the background).
    """
    if sample.caption is None or sample.labeled_masks is None:
        raise GroundTruthError(f"sample {sample.id} lacks a caption or masks")
    pairs, _ = parse_caption(sample.caption)
    masks = sample.labeled_masks.masks
    if len(pairs) + 1 != masks.shape[0]:
        raise GroundTruthError(
            f"sample {sample.id}: {len(pairs)} caption objects but "
            f"{masks.shape[0]} masks (expected objects + background)")
    names = [f"{color} {shape}" for color, shape in pairs] + [BACKGROUND_NAME]
    label_map = np.zeros(masks.shape[1:], dtype=np.int64)
    for idx, mask in enumerate(masks):
        label_map[mask.astype(bool)] = idx
    return label_map, names


def dataset_categories(samples: Sequence[Sample]) -> list[str]:
    """Sorted category names present anywhere in the dataset's ground truth."""
    names: set[str] = set()
    for sample in samples:
        _, local = sample_ground_truth(sample)
        names.update(local)
    return sorted(names)


@dataclass
class SegmentationEngine:
    """A frozen model + embedder, ready to answer text queries."""

    model: VisionModel
    embedder: EmbeddingProvider
    phrase_mode: str = "word"

    def __post_init__(self):
        self.model.eval()

    @property
    def tau(self) -> float:
        return float(self.model.tau.detach())

    def forward_images(self, samples_or_images) -> dict:
        """Batched forward; returns numpy masks, features, and f_z."""
        if isinstance(samples_or_images[0], Sample):
            images = stack_images(samples_or_images)
        else:
            images = torch.stack([
                torch.from_numpy(np.ascontiguousarray(im)).permute(2, 0, 1).float()
                for im in samples_or_images])
        with torch.no_grad():
            result = self.model(images)
            return {
                "masks": result.masks.numpy(),
                "features": result.features.numpy(),
                "f_z": result.bundle.f_z.numpy(),
            }

    def query_rows(self, queries: CategoryQueries
                   ) -> tuple[np.ndarray, list[int], list[tuple[int, str]]]:
        with torch.no_grad():
            rows, row_cats, row_phrases = phrase_rows(
                queries, self.embedder, self.phrase_mode)
        return rows.numpy().astype(np.float64), row_cats, row_phrases

    def segment(self, image: np.ndarray, queries: CategoryQueries, *,
                with_per_query: bool = True) -> SegmentationResult:
        out = self.forward_images([image])
        rows, row_cats, _ = self.query_rows(queries)
        return inference.open_vocab_segment(
            out["masks"][0], out["features"][0], rows, row_cats,
            len(queries.categories), tau=self.tau if with_per_query else None)

    def label_maps(self, samples: Sequence[Sample], queries: CategoryQueries,
                   *, batch_size: int = 32,
                   per_pixel: bool = False) -> list[np.ndarray]:
        """Predicted label maps for many samples with one shared query set.

        ``per_pixel`` switches to the no-proposal baseline, classifying f_z
        directly against the query rows (same ensembling)."""
        rows, row_cats, _ = self.query_rows(queries)
        maps = []
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            out = self.forward_images(chunk)
            for i in range(len(chunk)):
                if per_pixel:
                    f_z = out["f_z"][i]
                    flat = f_z.reshape(-1, f_z.shape[-1]).astype(np.float64)
                    norms = np.linalg.norm(flat, axis=1, keepdims=True)
                    if (norms == 0).any():
                        raise ValueError("zero-norm pixel feature")
                    wn = rows / np.linalg.norm(rows, axis=1, keepdims=True)
                    cos = (flat / norms) @ wn.T
                    y_rows = cos.T.reshape(rows.shape[0], *f_z.shape[:2])
                    y = inference.ensemble_reduce(y_rows, row_cats,
                                                  len(queries.categories))
                    maps.append(inference.predict(y))
                else:
                    rl = inference.region_logits(rows, out["features"][i])
                    y_rows = inference.pixel_logits(rl, out["masks"][i])
                    y = inference.ensemble_reduce(y_rows, row_cats,
                                                  len(queries.categories))
                    maps.append(inference.predict(y))
        return maps


def queries_for_names(names: Sequence[str]) -> CategoryQueries:
    return CategoryQueries.single_phrase(list(names))


def evaluate_miou(engine: SegmentationEngine, samples: Sequence[Sample], *,
                  categories: Sequence[str] | None = None,
                  per_pixel: bool = False) -> tuple[ConfusionAccumulator, list[str]]:
    """Fixed-query mIoU over the dataset's category set."""
    cats = list(categories) if categories is not None else dataset_categories(samples)
    index = {name: k for k, name in enumerate(cats)}
    preds = engine.label_maps(samples, queries_for_names(cats), per_pixel=per_pixel)
    acc = ConfusionAccumulator(len(cats))
    for sample, pred in zip(samples, preds):
        local_map, local_names = sample_ground_truth(sample)
        gt = np.asarray([index[n] for n in local_names])[local_map]
        acc.add(pred, gt)
    return acc, cats


def evaluate_grounding_miou(engine: SegmentationEngine,
                            samples: Sequence[Sample], *,
                            categories: Sequence[str] | None = None
                            ) -> tuple[ConfusionAccumulator, list[str]]:
    """mIoU with per-image ground-truth query sets."""
    cats = list(categories) if categories is not None else dataset_categories(samples)
    index = {name: k for k, name in enumerate(cats)}
    acc = ConfusionAccumulator(len(cats))
    for sample in samples:
        local_map, local_names = sample_ground_truth(sample)
        present = sorted(set(local_names))
        local_pred = engine.label_maps(
            [sample], queries_for_names(present))[0]
        pred = np.asarray([index[n] for n in present])[local_pred]
        gt = np.asarray([index[n] for n in local_names])[local_map]
        acc.add(pred, gt)
    return acc, cats


def evaluate_recall(engine: SegmentationEngine | None,
                    samples: Sequence[Sample], *,
                    proposals_from: str = "checkpoint",
                    threshold: float = 0.5) -> dict[float, float]:
    """Dataset-level proposal recall at the standard IoU thresholds.

    proposals_from 'checkpoint' binarizes the model's masks; 'gt' scores the
    labeled masks against themselves (the perfect-localization upper bound).
    """
    if proposals_from not in ("checkpoint", "gt"):
        raise ValueError("proposals_from must be 'checkpoint' or 'gt'")
    pooled: list[np.ndarray] = []
    labeled = [s for s in samples if s.labeled_masks is not None]
    if proposals_from == "gt":
        for sample in labeled:
            gts = sample.labeled_masks.masks
            pooled.append(best_iou_per_gt(gts, gts))
    else:
        if engine is None:
            raise ValueError("recall from a checkpoint needs an engine")
        for start in range(0, len(labeled), 32):
            chunk = labeled[start:start + 32]
            out = engine.forward_images(chunk)
            binary = (out["masks"] >= threshold).astype(np.uint8)
            for i, sample in enumerate(chunk):
                pooled.append(best_iou_per_gt(binary[i], sample.labeled_masks.masks))
    return recall_from_best_ious(np.concatenate(pooled))
