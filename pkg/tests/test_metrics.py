import numpy as np
import pytest
import torch

from maskground.losses import dice
from maskground.metrics import (ConfusionAccumulator, build_report,
                                grounding_miou, mask_iou, miou,
                                proposal_recall, recall_from_best_ious)


def test_mask_iou_basics():
    a = np.array([[1, 1], [0, 0]])
    assert mask_iou(a, a) == 1.0
    assert mask_iou(a, 1 - a) == 0.0
    # two-pixel masks sharing one pixel: |inter|=1, |union|=3
    b = np.array([[1, 0], [1, 0]])
    assert abs(mask_iou(a, b) - 1 / 3) < 1e-12


def test_mask_iou_empty_conventions():
    empty = np.zeros((2, 2))
    assert mask_iou(empty, empty) == 1.0
    assert mask_iou(empty, np.ones((2, 2))) == 0.0


def test_mask_iou_shape_mismatch():
    with pytest.raises(ValueError):
        mask_iou(np.zeros((2, 2)), np.zeros((2, 3)))


def test_iou_bounded_by_dice():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = rng.integers(0, 2, (5, 5))
        b = rng.integers(0, 2, (5, 5))
        if a.sum() == 0 or b.sum() == 0:
            continue
        iou = mask_iou(a, b)
        d = dice(torch.tensor(a, dtype=torch.float64),
                 torch.tensor(b, dtype=torch.float64)).item()
        assert iou <= d + 1e-9


def test_miou_perfect():
    rng = np.random.default_rng(1)
    maps = [rng.integers(0, 4, (6, 6)) for _ in range(3)]
    assert miou(maps, maps, 4) == 1.0


def test_miou_half_cover_fixture():
    # two-class image: gt class 1 fills the left half; pred covers exactly
    # the left quarter (half of gt's area) and nothing else
    gt = np.zeros((4, 4), dtype=int)
    gt[:, :2] = 1
    pred = np.zeros((4, 4), dtype=int)
    pred[:, :1] = 1
    acc = ConfusionAccumulator(2)
    acc.add(pred, gt)
    per = acc.per_category_iou()
    assert abs(per[1] - 0.5) < 1e-12


def test_miou_excludes_absent_categories():
    gt = np.zeros((2, 2), dtype=int)
    pred = np.zeros((2, 2), dtype=int)
    value = miou([pred], [gt], 5)  # categories 1..4 never occur
    assert value == 1.0


def test_miou_label_permutation_invariance():
    rng = np.random.default_rng(2)
    gt = rng.integers(0, 3, (8, 8))
    pred = rng.integers(0, 3, (8, 8))
    perm = np.array([2, 0, 1])
    assert abs(miou([pred], [gt], 3) -
               miou([perm[pred]], [perm[gt]], 3)) < 1e-12


def test_miou_rejects_out_of_range():
    with pytest.raises(ValueError):
        miou([np.array([[5]])], [np.array([[0]])], 2)


def test_miou_dataset_aggregation_not_mean_of_images():
    # one image with a big class-0 region, another with a tiny one:
    # dataset aggregation pools pixels before dividing
    gt1 = np.zeros((2, 2), dtype=int); pred1 = np.zeros((2, 2), dtype=int)
    gt2 = np.zeros((2, 2), dtype=int); pred2 = np.ones((2, 2), dtype=int)
    acc = ConfusionAccumulator(2)
    acc.add(pred1, gt1)
    acc.add(pred2, gt2)
    # class 0: inter 4, union 8 -> 0.5 ; class 1: inter 0, union 4 -> 0
    assert np.allclose(acc.per_category_iou(), [0.5, 0.0])


def test_confusion_merge_associative():
    rng = np.random.default_rng(3)
    pairs = [(rng.integers(0, 3, (4, 4)), rng.integers(0, 3, (4, 4)))
             for _ in range(4)]
    whole = ConfusionAccumulator(3)
    for p, g in pairs:
        whole.add(p, g)
    left = ConfusionAccumulator(3)
    right = ConfusionAccumulator(3)
    for p, g in pairs[:2]:
        left.add(p, g)
    for p, g in pairs[2:]:
        right.add(p, g)
    left.merge(right)
    assert np.array_equal(left.intersection, whole.intersection)
    assert np.array_equal(left.union, whole.union)


def test_grounding_miou_reduces_to_miou_with_full_queries():
    rng = np.random.default_rng(4)
    categories = ["a", "b", "c"]
    gts = [rng.integers(0, 3, (5, 5)) for _ in range(3)]

    def perfect(image, names):
        full = gts[int(image[0, 0, 0])]
        local = {n: i for i, n in enumerate(names)}
        return np.vectorize(lambda g: local[categories[g]])(full)

    items = [(np.full((1, 1, 1), i, dtype=float), gts[i], list(categories))
             for i in range(3)]
    value = grounding_miou(perfect, items, categories)
    assert value == 1.0


def test_grounding_miou_excluding_confuser_helps():
    categories = ["a", "b"]
    gt = np.zeros((2, 2), dtype=int)

    def confused(image, names):
        # the model answers the last query everywhere
        return np.full((2, 2), len(names) - 1, dtype=int)

    full = grounding_miou(confused, [(np.zeros((1, 1, 3)), gt, ["a", "b"])],
                          categories)
    restricted = grounding_miou(confused, [(np.zeros((1, 1, 3)), gt, ["a"])],
                                categories)
    assert restricted > full


def test_grounding_miou_skips_empty_images():
    categories = ["a"]
    items = [(np.zeros((1, 1, 3)), np.zeros((2, 2), dtype=int), []),
             (np.zeros((1, 1, 3)), np.zeros((2, 2), dtype=int), ["a"])]
    with pytest.warns(UserWarning):
        value = grounding_miou(lambda im, names: np.zeros((2, 2), dtype=int),
                               items, categories)
    assert value == 1.0


def test_proposal_recall_perfect_and_disjoint():
    rng = np.random.default_rng(5)
    gt = (rng.random((3, 6, 6)) < 0.4).astype(np.uint8)
    gt[:, 0, 0] = 1  # nonempty
    assert proposal_recall(gt, gt) == {0.5: 1.0, 0.7: 1.0, 0.9: 1.0}
    empty_side = np.zeros_like(gt)
    empty_side[:, 5, 5] = 1
    gt2 = gt.copy()
    gt2[:, 5, 5] = 0
    recall = proposal_recall(empty_side, gt2)
    assert recall == {0.5: 0.0, 0.7: 0.0, 0.9: 0.0}


def test_proposal_recall_mixed_fixture():
    # one gt matched at IoU 0.8, the other at 0.4
    gt = np.zeros((2, 10, 1), dtype=np.uint8)
    gt[0, :5] = 1
    gt[1, 5:] = 1
    proposals = np.zeros((2, 10, 1), dtype=np.uint8)
    proposals[0, :4] = 1          # IoU 4/5 = 0.8 with gt0
    proposals[1, 5:7] = 1         # IoU 2/5 = 0.4 with gt1
    recall = proposal_recall(proposals, gt)
    assert recall == {0.5: 0.5, 0.7: 0.5, 0.9: 0.0}


def test_proposal_recall_monotone_in_threshold():
    rng = np.random.default_rng(6)
    proposals = (rng.random((5, 8, 8)) < 0.5).astype(np.uint8)
    gt = (rng.random((3, 8, 8)) < 0.5).astype(np.uint8)
    thresholds = np.linspace(0.05, 0.95, 10)
    recall = proposal_recall(proposals, gt, thresholds)
    values = [recall[float(t)] for t in thresholds]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_recall_from_best_ious():
    pooled = recall_from_best_ious(np.array([0.95, 0.6, 0.3]))
    assert pooled == {0.5: 2 / 3, 0.7: 1 / 3, 0.9: 1 / 3}


def test_build_report_structure():
    acc = ConfusionAccumulator(2)
    acc.add(np.zeros((2, 2), dtype=int), np.zeros((2, 2), dtype=int))
    report = build_report(categories=["bg", "thing"], confusion=acc,
                          grounding=0.5, recall={0.5: 1.0},
                          extra={"note": "x"})
    assert report["per_category_iou"]["bg"] == 1.0
    assert report["per_category_iou"]["thing"] is None
    assert report["miou"] == 1.0
    assert report["grounding_miou"] == 0.5
    assert report["proposal_recall"] == {"0.5": 1.0}
    assert report["note"] == "x"
