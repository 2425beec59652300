"""Training objectives: soft Dice, best-match mask loss, temperature softmax,
region-word similarity, the batch-contrastive grounding loss, and the
partitioned-batch variant.

All functions are pure torch and dtype-generic, so the same code paths run
under float64 for finite-difference gradient verification.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

DICE_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    """Weight on the segmentation loss in the combined objective."""

    alpha: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")


@dataclass
class GroundingBatch:
    """Per-example region features and word embeddings plus the shared
    temperature. Word counts K_b may vary across examples."""

    region_features: Sequence[torch.Tensor]  # each (N_b, D)
    word_embeddings: Sequence[torch.Tensor]  # each (K_b, D)
    tau: torch.Tensor | float

    def __post_init__(self):
        if len(self.region_features) != len(self.word_embeddings):
            raise ValueError("region and word lists must have equal length")
        if len(self.region_features) < 1:
            raise ValueError("batch must hold at least one example")
        for z in self.region_features:
            if z.shape[0] < 1:
                raise ValueError("every example needs at least one region")
        for w in self.word_embeddings:
            if w.shape[0] < 1:
                raise ValueError("every example needs at least one word")
        for t in (*self.region_features, *self.word_embeddings):
            if not torch.isfinite(t).all():
                raise ValueError("grounding batch tensors must be finite")

    def __len__(self) -> int:
        return len(self.region_features)


def dice(a: torch.Tensor, b: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft Dice overlap 2*sum(a*b) / (sum(a^2) + sum(b^2) + eps)."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    num = 2.0 * (a * b).sum()
    den = a.square().sum() + b.square().sum() + eps
    return num / den


def _pairwise_dice(s: torch.Tensor, s_l: torch.Tensor,
                   eps: float = DICE_EPS) -> torch.Tensor:
    """(N, M) matrix of soft Dice between proposals and labeled masks."""
    inter = torch.einsum("nhw,mhw->nm", s, s_l)
    a2 = s.square().sum(dim=(1, 2))
    b2 = s_l.square().sum(dim=(1, 2))
    return 2.0 * inter / (a2[:, None] + b2[None, :] + eps)


def segmentation_loss(s: torch.Tensor, s_l: torch.Tensor) -> torch.Tensor:
    """Mean over labeled masks of (1 - Dice with the best-matching proposal).

    Only the best-matching proposal per labeled mask receives gradient; the
    argmax selection breaks ties toward the lowest proposal index.
    """
    if s.ndim != 3 or s_l.ndim != 3:
        raise ValueError("expected (N, H', W') proposals and (M, H', W') labels")
    if s.shape[0] < 1:
        raise ValueError("need at least one proposal")
    if s_l.shape[0] < 1:
        raise ValueError("need at least one labeled mask; skip the mask loss "
                         "for caption-only samples")
    if s.shape[1:] != s_l.shape[1:]:
        raise ValueError(f"grid mismatch: {tuple(s.shape[1:])} vs {tuple(s_l.shape[1:])}")
    d = _pairwise_dice(s, s_l)
    # np.argmax returns the first (lowest-index) maximum, which pins the
    # tie-break; selection is detached so gradient flows only through the
    # chosen entries.
    best = np.argmax(d.detach().cpu().numpy(), axis=0)
    cols = torch.arange(d.shape[1], device=d.device)
    chosen = d[torch.as_tensor(best, device=d.device), cols]
    return (1.0 - chosen).mean()


def softmax_temp(x: torch.Tensor, tau: torch.Tensor | float,
                 dim: int = -1) -> torch.Tensor:
    """Temperature softmax with max-subtraction for stability."""
    tau = torch.as_tensor(tau, dtype=x.dtype, device=x.device)
    if tau.detach().item() <= 0:
        raise ValueError(f"temperature must be positive, got {tau.detach().item()}")
    scaled = x / tau
    scaled = scaled - scaled.max(dim=dim, keepdim=True).values.detach()
    e = scaled.exp()
    return e / e.sum(dim=dim, keepdim=True)


def _row_norms(t: torch.Tensor, norm_eps: float, what: str) -> torch.Tensor:
    norms = t.norm(dim=-1)
    if norm_eps == 0.0 and (norms == 0).any():
        raise ValueError(f"zero-norm {what} vector; a dead row should be "
                         "surfaced, not hidden (pass norm_eps>0 to guard)")
    return norms + norm_eps


def cosine_rows(a: torch.Tensor, b: torch.Tensor,
                norm_eps: float = 0.0) -> torch.Tensor:
    """Cosine similarity matrix between row sets: (A, D) x (B, D) -> (A, B)."""
    na = _row_norms(a, norm_eps, "region/query")
    nb = _row_norms(b, norm_eps, "word")
    return (a @ b.T) / (na[:, None] * nb[None, :])


def image_caption_similarity(z: torch.Tensor, w: torch.Tensor,
                             tau: torch.Tensor | float,
                             norm_eps: float = 0.0) -> torch.Tensor:
    """Softmax-weighted mean alignment of words to their best regions.

    For each word, regions compete through a temperature softmax over their
    cosine similarities; the word's score is the softmax-weighted cosine, and
    the image-caption score is the mean over words. Lies in [-1, 1].
    """
    if z.ndim != 2 or w.ndim != 2:
        raise ValueError("expected (N, D) regions and (K, D) words")
    if z.shape[0] < 1 or w.shape[0] < 1:
        raise ValueError("need at least one region and one word")
    cos = cosine_rows(z, w, norm_eps)          # (N, K)
    weights = softmax_temp(cos, tau, dim=0)    # softmax over regions per word
    return (weights * cos).sum(dim=0).mean()


def _pad_rows(rows: Sequence[torch.Tensor], norm_eps: float,
              what: str) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack ragged (n_i, D) row sets into (B, n_max, D) + validity mask.

    Rows are L2-normalized; padding rows are unit basis vectors so no NaNs
    leak in, and they are masked out of every reduction downstream.
    """
    counts = [r.shape[0] for r in rows]
    n_max = max(counts)
    ref = rows[0]
    stacked = torch.zeros(len(rows), n_max, ref.shape[1],
                          dtype=ref.dtype, device=ref.device)
    valid = torch.zeros(len(rows), n_max, dtype=torch.bool, device=ref.device)
    stacked[..., 0] = 1.0  # harmless unit-norm padding
    for i, r in enumerate(rows):
        norms = _row_norms(r, norm_eps, what)
        stacked[i, :counts[i]] = r / norms[:, None]
        valid[i, :counts[i]] = True
    return stacked, valid


def pairwise_batch_scores(batch: GroundingBatch,
                          norm_eps: float = 0.0) -> torch.Tensor:
    """The (|B|, |B|) score matrix G[a, b] = similarity(image a, caption b),
    computed once per batch (vectorized over ragged word counts)."""
    tau = torch.as_tensor(batch.tau, dtype=batch.region_features[0].dtype,
                          device=batch.region_features[0].device)
    if tau.detach().item() <= 0:
        raise ValueError(f"temperature must be positive, got {tau.detach().item()}")
    zn, z_valid = _pad_rows(batch.region_features, norm_eps, "region")
    wn, w_valid = _pad_rows(batch.word_embeddings, norm_eps, "word")
    cos = torch.einsum("and,bkd->abnk", zn, wn)
    # Regions compete per word: temperature softmax over n with padded
    # regions excluded.
    logits = cos / tau
    region_mask = z_valid[:, None, :, None]
    logits = logits.masked_fill(~region_mask, float("-inf"))
    logits = logits - logits.max(dim=2, keepdim=True).values.detach()
    e = logits.exp()
    weights = e / e.sum(dim=2, keepdim=True)
    word_scores = (weights * cos).sum(dim=2)  # (|B|, |B|, K_max)
    word_mask = w_valid[None, :, :].to(cos.dtype)
    counts = w_valid.sum(dim=1).to(cos.dtype)  # K_b per caption
    return (word_scores * word_mask).sum(dim=2) / counts[None, :]


def grounding_loss(batch: GroundingBatch, norm_eps: float = 0.0) -> torch.Tensor:
    """Symmetric batch-contrastive loss over image-caption pairs.

    The full pairwise score matrix G[a, b] (image a against caption b) is
    computed once; the loss is the mean over examples of the negative
    log-softmax of the matched pair, along both the image and caption axes,
    with the shared temperature used everywhere.
    """
    b_size = len(batch)
    g = pairwise_batch_scores(batch, norm_eps)
    log_sm_images = torch.log(softmax_temp(g, batch.tau, dim=0))
    log_sm_captions = torch.log(softmax_temp(g, batch.tau, dim=1))
    diag = torch.arange(b_size, device=g.device)
    per_pair = log_sm_images[diag, diag] + log_sm_captions[diag, diag]
    return -per_pair.mean()


def total_loss(l_g: torch.Tensor, l_s: torch.Tensor,
               weights: LossWeights) -> torch.Tensor:
    """Combined objective: grounding plus weighted segmentation loss."""
    return l_g + weights.alpha * l_s


def partitioned_grounding_loss(batch: GroundingBatch, partition_size: int,
                               norm_eps: float = 0.0) -> torch.Tensor:
    """Mean grounding loss over contiguous batch partitions.

    partition_size == |B| reproduces :func:`grounding_loss` exactly; smaller
    partitions model per-device contrastive pools on one host.
    """
    b_size = len(batch)
    if partition_size < 1 or b_size % partition_size:
        raise ValueError(
            f"partition_size {partition_size} must divide the batch size {b_size}")
    chunks = []
    for start in range(0, b_size, partition_size):
        sub = GroundingBatch(
            region_features=batch.region_features[start:start + partition_size],
            word_embeddings=batch.word_embeddings[start:start + partition_size],
            tau=batch.tau)
        chunks.append(grounding_loss(sub, norm_eps))
    return torch.stack(chunks).mean()
