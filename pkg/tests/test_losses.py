import math

import numpy as np
import pytest
import torch

from maskground.losses import (GroundingBatch, LossWeights, dice,
                               grounding_loss, image_caption_similarity,
                               pairwise_batch_scores,
                               partitioned_grounding_loss, segmentation_loss,
                               softmax_temp, total_loss)


def t64(arr):
    return torch.tensor(np.asarray(arr), dtype=torch.float64)


# ---------------------------------------------------------------- dice

def test_dice_identical_masks():
    a = t64(np.ones((2, 2)))
    assert abs(dice(a, a).item() - 1.0) < 1e-6


def test_dice_disjoint():
    assert dice(t64([1, 1, 0, 0]), t64([0, 0, 1, 1])).item() == 0.0


def test_dice_half_overlap_hand_value():
    # 2*1 / (2 + 2) = 0.5
    got = dice(t64([1, 1, 0, 0]), t64([1, 0, 1, 0])).item()
    assert abs(got - 2 * 1 / (2 + 2 + 1e-6)) < 1e-12


def test_dice_shape_mismatch():
    with pytest.raises(ValueError):
        dice(t64([1, 0]), t64([1, 0, 0]))


def test_dice_symmetric_and_bounded():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = t64(rng.random((3, 4)))
        b = t64(rng.random((3, 4)))
        ab, ba = dice(a, b).item(), dice(b, a).item()
        assert abs(ab - ba) < 1e-12
        assert 0.0 <= ab <= 1.0


# ------------------------------------------------- segmentation loss

def seg_loss_oracle(s, s_l):
    """Exhaustive double loop over (proposal, label) pairs."""
    total = 0.0
    for j in range(s_l.shape[0]):
        best = max(dice(s[i], s_l[j]).item() for i in range(s.shape[0]))
        total += 1.0 - best
    return total / s_l.shape[0]


def test_segmentation_loss_perfect_match():
    label = np.zeros((1, 4, 4)); label[0, :2] = 1
    s = t64(np.concatenate([label, np.zeros((1, 4, 4))]))
    got = segmentation_loss(s, t64(label)).item()
    assert got < 1e-6


def test_segmentation_loss_all_disjoint():
    s = t64([[[1.0, 0.0], [0.0, 0.0]]])
    label = t64([[[0.0, 0.0], [0.0, 1.0]]])
    assert abs(segmentation_loss(s, label).item() - 1.0) < 1e-6


def test_segmentation_loss_matches_oracle():
    rng = np.random.default_rng(3)
    checked = 0
    while checked < 25:
        s = t64(rng.random((2, 5, 5)))
        labels = t64(rng.integers(0, 2, (2, 5, 5)))
        if (labels.sum(dim=(1, 2)) == 0).any():
            continue
        got = segmentation_loss(s, labels).item()
        assert abs(got - seg_loss_oracle(s, labels)) < 1e-12
        checked += 1


def test_segmentation_loss_superset_never_increases():
    rng = np.random.default_rng(4)
    for _ in range(20):
        s = t64(rng.random((3, 4, 4)))
        labels = t64(rng.integers(0, 2, (2, 4, 4)))
        if (labels.sum(dim=(1, 2)) == 0).any():
            continue
        extra = torch.cat([s, t64(rng.random((1, 4, 4)))])
        assert segmentation_loss(extra, labels).item() <= \
            segmentation_loss(s, labels).item() + 1e-12


def test_segmentation_loss_gradient_only_through_best():
    s = torch.tensor([[[0.9, 0.0], [0.0, 0.0]],
                      [[0.2, 0.0], [0.0, 0.0]]], dtype=torch.float64,
                     requires_grad=True)
    label = t64([[[1.0, 0.0], [0.0, 0.0]]])
    segmentation_loss(s, label).backward()
    assert s.grad[0].abs().sum() > 0
    assert s.grad[1].abs().sum() == 0


def test_segmentation_loss_rejects_empty_labels():
    with pytest.raises(ValueError):
        segmentation_loss(t64(np.ones((1, 2, 2))), t64(np.zeros((0, 2, 2))))


# ---------------------------------------------------------- softmax

def test_softmax_symmetry():
    out = softmax_temp(t64([0.0, 0.0]), 1.0)
    assert torch.allclose(out, t64([0.5, 0.5]))


def test_softmax_closed_form():
    out = softmax_temp(t64([math.log(2.0), 0.0]), 1.0)
    assert torch.allclose(out, t64([2 / 3, 1 / 3]), atol=1e-12)


def test_softmax_low_temperature_limit():
    out = softmax_temp(t64([5.0, 1.0]), 0.01)
    assert out[0].item() > 1 - 1e-12
    assert out[1].item() < 1e-12


def test_softmax_rejects_nonpositive_tau():
    with pytest.raises(ValueError):
        softmax_temp(t64([1.0]), 0.0)
    with pytest.raises(ValueError):
        softmax_temp(t64([1.0]), -1.0)


def test_softmax_sums_to_one_and_shift_invariant():
    rng = np.random.default_rng(5)
    for _ in range(20):
        x = t64(rng.normal(size=7))
        tau = float(rng.uniform(0.05, 3.0))
        out = softmax_temp(x, tau)
        assert abs(out.sum().item() - 1.0) < 1e-9
        shifted = softmax_temp(x + 11.3, tau)
        assert torch.allclose(out, shifted, atol=1e-9)


# ---------------------------------- image-caption similarity (Eq. 3 analog)

def sim_oracle(z, w, tau):
    """Naive double loop over words and regions."""
    z = z.numpy(); w = w.numpy()
    def cos(a, b):
        return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    total = 0.0
    for j in range(w.shape[0]):
        cs = np.array([cos(z[i], w[j]) for i in range(z.shape[0])])
        e = np.exp((cs - cs.max()) / tau)
        p = e / e.sum()
        total += float((p * cs).sum())
    return total / w.shape[0]


def test_similarity_single_parallel_pair():
    w = t64([[1.0, 2.0, 3.0]])
    z = 2.5 * w
    assert abs(image_caption_similarity(z, w, 1.0).item() - 1.0) < 1e-12


def test_similarity_opposed_regions_tanh():
    w = t64([[0.3, -1.2, 0.7, 0.1]])
    z = torch.cat([w, -w])
    got = image_caption_similarity(z, w, 1.0).item()
    assert abs(got - math.tanh(1.0)) < 1e-12


def test_similarity_matches_oracle():
    rng = np.random.default_rng(6)
    for _ in range(100):
        z = t64(rng.normal(size=(rng.integers(1, 6), 8)))
        w = t64(rng.normal(size=(rng.integers(1, 5), 8)))
        tau = float(rng.uniform(0.1, 2.0))
        got = image_caption_similarity(z, w, tau).item()
        assert abs(got - sim_oracle(z, w, tau)) < 1e-9
        assert -1.0 <= got <= 1.0


def test_similarity_scale_invariance():
    rng = np.random.default_rng(7)
    z = t64(rng.normal(size=(4, 8)))
    w = t64(rng.normal(size=(3, 8)))
    scale_z = t64(rng.uniform(0.1, 5.0, size=(4, 1)))
    scale_w = t64(rng.uniform(0.1, 5.0, size=(3, 1)))
    a = image_caption_similarity(z, w, 0.7).item()
    b = image_caption_similarity(z * scale_z, w * scale_w, 0.7).item()
    assert abs(a - b) < 1e-9


def test_similarity_rejects_zero_norm():
    z = t64([[0.0, 0.0], [1.0, 0.0]])
    w = t64([[1.0, 1.0]])
    with pytest.raises(ValueError):
        image_caption_similarity(z, w, 1.0)
    # the training-path guard turns it into a finite value instead
    assert np.isfinite(image_caption_similarity(z, w, 1.0, norm_eps=1e-8).item())


# ------------------------------------------------ grounding loss (Eq. 4 analog)

def grounding_oracle(zs, ws, tau):
    b = len(zs)
    g = np.array([[sim_oracle(zs[a], ws[c], tau) for c in range(b)]
                  for a in range(b)])
    def softmax_col(v):
        e = np.exp((v - v.max()) / tau)
        return e / e.sum()
    loss = 0.0
    for i in range(b):
        loss -= math.log(softmax_col(g[:, i])[i])
        loss -= math.log(softmax_col(g[i, :])[i])
    return loss / b


def test_grounding_loss_degenerate_batch_is_zero():
    z = t64(np.random.default_rng(0).normal(size=(4, 8)))
    w = t64(np.random.default_rng(1).normal(size=(2, 8)))
    loss = grounding_loss(GroundingBatch([z], [w], 1.0))
    assert loss.item() == 0.0


def test_grounding_loss_two_by_two_frozen_value():
    # Single opposed region/word per example makes the score matrix exactly
    # [[1, -1], [-1, 1]]; with tau=1 each matched pair has softmax
    # probability e/(e+1/e), so the loss is -2*log(e/(e+1/e)) = 0.253856...
    e = t64([[1.0, 0.0, 0.0]])
    batch = GroundingBatch([e, -e], [e, -e], 1.0)
    g = pairwise_batch_scores(batch)
    assert torch.allclose(g, t64([[1.0, -1.0], [-1.0, 1.0]]), atol=1e-12)
    expected = -2.0 * math.log(math.e / (math.e + math.exp(-1.0)))
    assert abs(expected - 0.25385602199) < 1e-9
    assert abs(grounding_loss(batch).item() - expected) < 1e-12


def test_grounding_loss_matches_oracle():
    rng = np.random.default_rng(8)
    for _ in range(100):
        b = int(rng.integers(1, 5))
        zs = [t64(rng.normal(size=(4, 8))) for _ in range(b)]
        ws = [t64(rng.normal(size=(int(rng.integers(1, 4)), 8))) for _ in range(b)]
        tau = float(rng.uniform(0.2, 2.0))
        got = grounding_loss(GroundingBatch(zs, ws, tau)).item()
        assert abs(got - grounding_oracle(zs, ws, tau)) < 1e-9
        assert got >= 0.0


def test_grounding_scores_match_similarity_entrywise():
    rng = np.random.default_rng(9)
    zs = [t64(rng.normal(size=(3, 8))) for _ in range(3)]
    ws = [t64(rng.normal(size=(int(rng.integers(1, 4)), 8))) for _ in range(3)]
    batch = GroundingBatch(zs, ws, 0.5)
    g = pairwise_batch_scores(batch)
    for a in range(3):
        for b in range(3):
            direct = image_caption_similarity(zs[a], ws[b], 0.5).item()
            assert abs(g[a, b].item() - direct) < 1e-12


def test_grounding_loss_permutation_invariant():
    rng = np.random.default_rng(10)
    zs = [t64(rng.normal(size=(4, 8))) for _ in range(4)]
    ws = [t64(rng.normal(size=(2, 8))) for _ in range(4)]
    base = grounding_loss(GroundingBatch(zs, ws, 0.8)).item()
    perm = [2, 0, 3, 1]
    shuffled = grounding_loss(GroundingBatch([zs[i] for i in perm],
                                             [ws[i] for i in perm], 0.8)).item()
    assert abs(base - shuffled) < 1e-12


def test_grounding_batch_validation():
    z = t64(np.ones((2, 4)))
    with pytest.raises(ValueError):
        GroundingBatch([z], [], 1.0)
    with pytest.raises(ValueError):
        GroundingBatch([z], [t64(np.empty((0, 4)))], 1.0)


# --------------------------------------------------------- total loss

def test_total_loss_alpha_zero():
    l_g = t64(0.3)
    assert total_loss(l_g, t64(9.9), LossWeights(alpha=0.0)).item() == l_g.item()


def test_total_loss_arithmetic():
    got = total_loss(t64(0.3), t64(0.2), LossWeights(alpha=1.0)).item()
    assert abs(got - 0.5) < 1e-12


def test_total_loss_gradient_linearity():
    shared = torch.tensor([0.4, -0.2], dtype=torch.float64, requires_grad=True)
    def l_g():
        return (shared * shared).sum()
    def l_s():
        return (shared.sin()).sum()
    alpha = 0.7
    total_loss(l_g(), l_s(), LossWeights(alpha)).backward()
    combined = shared.grad.clone()
    shared.grad = None
    l_g().backward()
    g_only = shared.grad.clone()
    shared.grad = None
    l_s().backward()
    s_only = shared.grad.clone()
    assert torch.allclose(combined, g_only + alpha * s_only, atol=1e-9)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(alpha=-0.1)


# ------------------------------------------- partitioned grounding loss

def _random_batch(rng, b):
    zs = [t64(rng.normal(size=(4, 8))) for _ in range(b)]
    ws = [t64(rng.normal(size=(int(rng.integers(1, 4)), 8))) for _ in range(b)]
    return GroundingBatch(zs, ws, 0.9)


def test_partitioned_equals_unpartitioned_at_full_size():
    batch = _random_batch(np.random.default_rng(11), 4)
    full = grounding_loss(batch).item()
    part = partitioned_grounding_loss(batch, 4).item()
    assert abs(full - part) < 1e-12


def test_partitioned_size_one_is_zero():
    batch = _random_batch(np.random.default_rng(12), 3)
    assert partitioned_grounding_loss(batch, 1).item() == 0.0


def test_partitioned_pairs_match_direct_means():
    rng = np.random.default_rng(13)
    batch = _random_batch(rng, 4)
    got = partitioned_grounding_loss(batch, 2).item()
    first = grounding_loss(GroundingBatch(batch.region_features[:2],
                                          batch.word_embeddings[:2], 0.9)).item()
    second = grounding_loss(GroundingBatch(batch.region_features[2:],
                                           batch.word_embeddings[2:], 0.9)).item()
    assert abs(got - (first + second) / 2) < 1e-12


def test_partitioned_rejects_non_divisor():
    batch = _random_batch(np.random.default_rng(14), 4)
    with pytest.raises(ValueError):
        partitioned_grounding_loss(batch, 3)


def test_partitioned_differs_from_sync_on_coupled_batch():
    # When the score matrix is not block-diagonal the partitioned loss and
    # the full-batch loss disagree.
    rng = np.random.default_rng(15)
    batch = _random_batch(rng, 4)
    full = grounding_loss(batch).item()
    part = partitioned_grounding_loss(batch, 2).item()
    assert abs(full - part) > 1e-6
