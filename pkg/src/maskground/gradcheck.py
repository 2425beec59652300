"""Finite-difference verification of analytic gradients.

Central differences at eps=1e-5 in float64 against autograd, for every loss
and for the end-to-end forward pass. The CLI `gradcheck` command and the
acceptance suite both run this.
"""

from __future__ import annotations

import zlib
from typing import Callable

import numpy as np
import torch

from .losses import (GroundingBatch, dice, grounding_loss,
                     image_caption_similarity, segmentation_loss)
from .model import ModelConfig, build_vision_model

EPS = 1e-5
TOLERANCE = 1e-3

TINY_MODEL = ModelConfig(num_proposals=4, embed_dim=8, num_blocks=2,
                         fused_dim=8, num_heads=2, ffn_multiplier=2,
                         base_mask_hw=(8, 8), stage_channels=(4, 6, 8, 8, 8))


def relative_error(analytic: float, numerical: float) -> float:
    denom = max(abs(analytic), abs(numerical), 1e-6)
    return abs(analytic - numerical) / denom


def central_difference(evaluate: Callable[[], torch.Tensor],
                       param: torch.Tensor, index: tuple[int, ...],
                       eps: float = EPS) -> float:
    """d evaluate / d param[index] by central differences; restores param."""
    with torch.no_grad():
        if index == ():
            original = param.item()
            param.fill_(original + eps)
            plus = evaluate().item()
            param.fill_(original - eps)
            minus = evaluate().item()
            param.fill_(original)
        else:
            original = param[index].item()
            param[index] = original + eps
            plus = evaluate().item()
            param[index] = original - eps
            minus = evaluate().item()
            param[index] = original
    return (plus - minus) / (2.0 * eps)


def _max_error_over(evaluate: Callable[[], torch.Tensor],
                    leaves: list[torch.Tensor],
                    coords_per_leaf: int | None,
                    rng: np.random.Generator) -> float:
    """Backprop once, then compare autograd against FD on (a sample of)
    coordinates of every leaf tensor."""
    for leaf in leaves:
        leaf.grad = None
    value = evaluate()
    value.backward()
    worst = 0.0
    for leaf in leaves:
        grad = leaf.grad
        assert grad is not None
        all_coords = list(np.ndindex(*leaf.shape)) if leaf.ndim else [()]
        if coords_per_leaf is not None and len(all_coords) > coords_per_leaf:
            pick = rng.choice(len(all_coords), size=coords_per_leaf, replace=False)
            all_coords = [all_coords[i] for i in sorted(pick)]
        for index in all_coords:
            numerical = central_difference(evaluate, leaf, index)
            analytic = grad[index].item() if index != () else grad.item()
            worst = max(worst, relative_error(analytic, numerical))
    return worst


def _rand(rng: np.random.Generator, *shape: int, low=-1.0, high=1.0) -> torch.Tensor:
    arr = rng.uniform(low, high, size=shape)
    return torch.tensor(arr, dtype=torch.float64, requires_grad=True)


def check_dice(rng: np.random.Generator) -> float:
    a = _rand(rng, 3, 4, low=0.05, high=1.0)
    b = _rand(rng, 3, 4, low=0.05, high=1.0)
    return _max_error_over(lambda: dice(a, b), [a, b], None, rng)


def check_segmentation_loss(rng: np.random.Generator, n: int = 4, m: int = 2) -> float:
    s = _rand(rng, n, 6, 5, low=0.05, high=0.95)
    labels = torch.tensor(rng.integers(0, 2, size=(m, 6, 5)), dtype=torch.float64)
    while (labels.sum(dim=(1, 2)) == 0).any():
        labels = torch.tensor(rng.integers(0, 2, size=(m, 6, 5)), dtype=torch.float64)
    return _max_error_over(lambda: segmentation_loss(s, labels), [s], None, rng)


def check_image_caption_similarity(rng: np.random.Generator,
                                   n: int = 4, k: int = 3, d: int = 8) -> float:
    z = _rand(rng, n, d)
    w = _rand(rng, k, d)
    tau = torch.tensor(rng.uniform(0.2, 1.5), dtype=torch.float64,
                       requires_grad=True)
    return _max_error_over(lambda: image_caption_similarity(z, w, tau),
                           [z, w, tau], None, rng)


def check_grounding_loss(rng: np.random.Generator, batch_size: int = 3,
                         n: int = 4, d: int = 8) -> float:
    zs = [_rand(rng, n, d) for _ in range(batch_size)]
    ws = [_rand(rng, int(rng.integers(1, 4)), d) for _ in range(batch_size)]
    tau = torch.tensor(rng.uniform(0.2, 1.5), dtype=torch.float64,
                       requires_grad=True)
    def evaluate():
        return grounding_loss(GroundingBatch(zs, ws, tau))
    return _max_error_over(evaluate, [*zs, *ws, tau], 6, rng)


def check_forward(rng: np.random.Generator, coords: int = 10) -> float:
    """FD check of d(sum of pooled region features)/d(weights) through the
    whole model, on `coords` sampled parameter coordinates."""
    model = build_vision_model(TINY_MODEL, seed=int(rng.integers(2 ** 31))).double()
    image = torch.tensor(rng.uniform(0, 1, size=(1, 3, 32, 32)),
                         dtype=torch.float64)
    def evaluate():
        return model(image).features.sum()
    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    evaluate().backward()
    sizes = np.array([p.numel() for p in params])
    worst = 0.0
    for _ in range(coords):
        flat = int(rng.integers(sizes.sum()))
        which = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        param = params[which]
        index = np.unravel_index(flat - int(np.concatenate(([0], np.cumsum(sizes)))[which]),
                                 param.shape) if param.ndim else ()
        numerical = central_difference(evaluate, param, tuple(int(i) for i in index))
        analytic = param.grad[tuple(int(i) for i in index)].item() if param.ndim else param.grad.item()
        worst = max(worst, relative_error(analytic, numerical))
    return worst


def run_gradient_suite(trials: int = 20, seed: int = 0,
                       forward_trials: int | None = None) -> dict[str, float]:
    """Max relative FD error per objective over `trials` random instances."""
    forward_trials = trials if forward_trials is None else forward_trials
    checks: dict[str, float] = {}
    named: list[tuple[str, Callable[[np.random.Generator], float], int]] = [
        ("dice", check_dice, trials),
        ("segmentation_loss", check_segmentation_loss, trials),
        ("image_caption_similarity", check_image_caption_similarity, trials),
        ("grounding_loss", check_grounding_loss, trials),
        ("forward", check_forward, forward_trials),
    ]
    for name, fn, n_trials in named:
        worst = 0.0
        stream = zlib.crc32(name.encode())
        for trial in range(n_trials):
            rng = np.random.default_rng((seed, stream, trial))
            worst = max(worst, fn(rng))
        checks[name] = worst
    return checks
