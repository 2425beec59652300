"""Open-vocabulary segmentation at test time.

All functions here are pure numpy over a frozen model's outputs: cosine
region logits, mask-weighted pixel logits, max-ensembling of query phrases
into categories, argmax prediction, the fixed-category background rule, the
per-pixel (no-proposal) baseline, and per-proposal classification.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .data import SegmentationResult


def _normalize_rows(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if (norms == 0).any():
        raise ValueError(f"zero-norm {what} vector")
    return x / norms


def region_logits(w: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Cosine similarity between query rows and region features: (K, N)."""
    if w.ndim != 2 or z.ndim != 2 or w.shape[1] != z.shape[1]:
        raise ValueError(f"shape mismatch: w {w.shape}, z {z.shape}")
    wn = _normalize_rows(np.asarray(w, dtype=np.float64), "query")
    zn = _normalize_rows(np.asarray(z, dtype=np.float64), "region")
    return wn @ zn.T


def pixel_logits(rl: np.ndarray, s: np.ndarray) -> np.ndarray:
    """y[k, i, j] = sum_n rl[k, n] * s[n, i, j]."""
    if rl.ndim != 2 or s.ndim != 3 or rl.shape[1] != s.shape[0]:
        raise ValueError(f"shape mismatch: rl {rl.shape}, s {s.shape}")
    return np.einsum("kn,nhw->khw", rl, s)


def ensemble_reduce(y_rows: np.ndarray, row_categories: Sequence[int],
                    num_categories: int) -> np.ndarray:
    """Per-pixel max over each category's query rows -> (K_cat, H', W')."""
    if len(row_categories) != y_rows.shape[0]:
        raise ValueError("each query row needs exactly one category")
    cats = np.asarray(row_categories)
    if cats.size and (cats.min() < 0 or cats.max() >= num_categories):
        raise ValueError("query row mapped to an out-of-range category")
    present = set(int(c) for c in cats)
    missing = [k for k in range(num_categories) if k not in present]
    if missing:
        raise ValueError(f"categories without any query row: {missing}")
    out = np.empty((num_categories,) + y_rows.shape[1:], dtype=y_rows.dtype)
    for k in range(num_categories):
        out[k] = y_rows[cats == k].max(axis=0)
    return out


def predict(y: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over categories; ties break to the lowest index."""
    if y.ndim != 3 or y.shape[0] < 1:
        raise ValueError(f"expected (K_cat, H', W') logits, got {y.shape}")
    return np.argmax(y, axis=0)


def apply_background_rule(label_map: np.ndarray, fg_categories: Iterable[int],
                          num_categories: int,
                          background_index: int) -> np.ndarray:
    """Map predictions outside the foreground set to the background label.

    Foreground predictions are unchanged; the operation is idempotent.
    """
    fg = set(int(k) for k in fg_categories)
    if not fg <= set(range(num_categories)):
        raise ValueError("fg_categories must be a subset of the context categories")
    keep = np.isin(label_map, sorted(fg | {background_index}))
    out = np.where(keep, label_map, background_index)
    return out


def per_pixel_predict(f_z: np.ndarray, w: np.ndarray) -> np.ndarray:
    """No-proposal baseline: per-pixel argmax of cosine(f_z[i, j], w_k)."""
    if f_z.ndim != 3 or w.ndim != 2 or f_z.shape[-1] != w.shape[-1]:
        raise ValueError(f"shape mismatch: f_z {f_z.shape}, w {w.shape}")
    wn = _normalize_rows(np.asarray(w, dtype=np.float64), "query")
    flat = np.asarray(f_z, dtype=np.float64).reshape(-1, f_z.shape[-1])
    fn = _normalize_rows(flat, "pixel feature")
    cos = fn @ wn.T  # (HW, K)
    return np.argmax(cos, axis=1).reshape(f_z.shape[:2])


def classify_proposals(s: np.ndarray, z: np.ndarray, w: np.ndarray
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Best query per proposal: (argmax_k cosine(w_k, z_n), its score)."""
    if s.ndim != 3 or s.shape[0] != z.shape[0]:
        raise ValueError(f"shape mismatch: s {s.shape}, z {z.shape}")
    rl = region_logits(w, z)  # (K, N)
    best = np.argmax(rl, axis=0)
    scores = rl[best, np.arange(rl.shape[1])]
    return best, scores


def query_soft_masks(rl: np.ndarray, s: np.ndarray, tau: float) -> np.ndarray:
    """Grounding-style soft mask per query row: regions compete through a
    temperature softmax on their cosine, then their masks are blended."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    scaled = rl / tau
    scaled = scaled - scaled.max(axis=1, keepdims=True)
    e = np.exp(scaled)
    weights = e / e.sum(axis=1, keepdims=True)  # (K, N)
    return np.einsum("kn,nhw->khw", weights, s)


def open_vocab_segment(s: np.ndarray, z: np.ndarray, w_rows: np.ndarray,
                       row_categories: Sequence[int], num_categories: int, *,
                       tau: float | None = None) -> SegmentationResult:
    """Full query-driven inference for one image: region logits, pixel
    logits, max-ensembling, argmax. Callers compose
    :func:`apply_background_rule` on the label map when they need it."""
    rl = region_logits(w_rows, z)
    y_rows = pixel_logits(rl, s)
    y = ensemble_reduce(y_rows, row_categories, num_categories)
    label_map = predict(y)
    per_query = query_soft_masks(rl, s, tau) if tau is not None else None
    return SegmentationResult(pixel_logits=y, label_map=label_map,
                              per_query_masks=per_query)
