import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskground.data import (DatasetError, DatasetWriter, LabeledMaskSet,
                             MalformedMaskError, MaskProposalSet,
                             MissingAnnotationError, MissingImageError, RleMask,
                             Sample, SegmentationResult, decode_rle, encode_rle,
                             load_dataset)


def test_encode_all_zeros():
    assert encode_rle(np.zeros((2, 2), dtype=np.uint8)).counts == (4,)


def test_encode_all_ones():
    assert encode_rle(np.ones((2, 2), dtype=np.uint8)).counts == (0, 4)


def test_encode_checkerboard():
    # row-major [[0,1],[1,0]] flattens to 0,1,1,0
    rle = encode_rle(np.array([[0, 1], [1, 0]]))
    assert rle.counts == (1, 2, 1)


def test_encode_rejects_non_binary():
    with pytest.raises(ValueError):
        encode_rle(np.array([[0, 2]]))
    with pytest.raises(ValueError):
        encode_rle(np.ones((2, 2, 2)))


def test_decode_trivial():
    assert (decode_rle(RleMask((2, 2), (4,))) == 0).all()
    assert (decode_rle(RleMask((2, 2), (0, 4))) == 1).all()


def test_decode_rejects_bad_sum():
    with pytest.raises(ValueError):
        RleMask((2, 2), (3,))
    with pytest.raises(ValueError):
        RleMask((2, 2), (0, 4, 1))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2 ** 31 - 1))
def test_rle_round_trip(h, w, seed):
    mask = np.random.default_rng(seed).integers(0, 2, size=(h, w)).astype(np.uint8)
    assert np.array_equal(decode_rle(encode_rle(mask)), mask)


def test_rle_round_trip_bulk():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        mask = (rng.random((rng.integers(1, 20), rng.integers(1, 20))) < rng.random()).astype(np.uint8)
        assert np.array_equal(decode_rle(encode_rle(mask)), mask)


def test_sample_validation():
    img = np.zeros((8, 8, 3), dtype=np.float32)
    with pytest.raises(ValueError):
        Sample(id="", image=img)
    with pytest.raises(ValueError):
        Sample(id="x", image=img + 2.0)
    masks = np.zeros((1, 2, 2), dtype=np.uint8)
    masks[0, 0, 0] = 1
    s = Sample(id="x", image=img, labeled_masks=LabeledMaskSet(masks))
    assert s.mask_size == (2, 2)
    with pytest.raises(ValueError):
        Sample(id="x", image=np.zeros((9, 8, 3)),
               labeled_masks=LabeledMaskSet(masks))


def test_labeled_masks_reject_empty_mask():
    with pytest.raises(ValueError):
        LabeledMaskSet(np.zeros((1, 2, 2), dtype=np.uint8))


def test_proposal_set_open_interval():
    with pytest.raises(ValueError):
        MaskProposalSet(masks=np.ones((1, 2, 2)), features=np.ones((1, 3)))
    ok = MaskProposalSet(masks=np.full((1, 2, 2), 0.5), features=np.ones((1, 3)))
    assert ok.count == 1


def test_segmentation_result_argmax_invariant():
    logits = np.zeros((2, 2, 2))
    logits[1, 0, 0] = 1.0
    labels = np.argmax(logits, axis=0)
    SegmentationResult(pixel_logits=logits, label_map=labels)
    with pytest.raises(ValueError):
        SegmentationResult(pixel_logits=logits, label_map=1 - labels)


def _write_dataset(tmp_path, records):
    from PIL import Image
    (tmp_path / "images").mkdir(exist_ok=True)
    for r in records:
        if r.get("_make_image", True):
            Image.fromarray(np.zeros((8, 8, 3), dtype=np.uint8)).save(
                tmp_path / r["image_path"])
        r.pop("_make_image", None)
    (tmp_path / "manifest.json").write_text(json.dumps(records))
    return tmp_path


def test_load_empty_manifest(tmp_path):
    (tmp_path / "manifest.json").write_text("[]")
    assert len(load_dataset(tmp_path)) == 0


def test_load_caption_only(tmp_path):
    root = _write_dataset(tmp_path, [
        {"id": "a", "image_path": "images/a.png", "caption": "a red circle"}])
    ds = load_dataset(root)
    assert len(ds) == 1
    sample = ds[0]
    assert sample.labeled_masks is None and sample.caption == "a red circle"


def test_load_rejects_missing_annotations(tmp_path):
    root = _write_dataset(tmp_path, [{"id": "a", "image_path": "images/a.png"}])
    with pytest.raises(MissingAnnotationError, match="'a'"):
        load_dataset(root)


def test_load_rejects_missing_image(tmp_path):
    root = _write_dataset(tmp_path, [
        {"id": "gone", "image_path": "images/gone.png", "caption": "x",
         "_make_image": False}])
    with pytest.raises(MissingImageError, match="'gone'"):
        load_dataset(root)


def test_load_rejects_bad_rle_sum(tmp_path):
    # counts sum to 3 but the mask grid is 2x2
    root = _write_dataset(tmp_path, [
        {"id": "busted", "image_path": "images/busted.png",
         "masks": [{"size": [2, 2], "counts": [3]}]}])
    with pytest.raises(MalformedMaskError, match="'busted'"):
        load_dataset(root)


def test_load_rejects_wrong_mask_grid(tmp_path):
    # 8x8 image needs 2x2 masks at stride 4
    root = _write_dataset(tmp_path, [
        {"id": "w", "image_path": "images/w.png",
         "masks": [{"size": [3, 3], "counts": [0, 9]}]}])
    with pytest.raises(MalformedMaskError, match="'w'"):
        load_dataset(root)[0]


def test_load_rejects_duplicate_ids(tmp_path):
    root = _write_dataset(tmp_path, [
        {"id": "a", "image_path": "images/a.png", "caption": "x"},
        {"id": "a", "image_path": "images/a.png", "caption": "y"}])
    with pytest.raises(DatasetError, match="duplicate"):
        load_dataset(root)


def test_writer_round_trip_and_deterministic_order(tmp_path):
    rng = np.random.default_rng(7)
    writer = DatasetWriter(root=tmp_path)
    originals = []
    for i in range(3):
        img = rng.random((8, 8, 3)).astype(np.float32)
        img = np.rint(img * 255) / 255  # 8-bit exact
        masks = np.zeros((1, 2, 2), dtype=np.uint8)
        masks[0, i % 2, i % 2] = 1
        s = Sample(id=f"s{i}", image=img.astype(np.float32),
                   labeled_masks=LabeledMaskSet(masks), caption=f"cap {i}")
        originals.append(s)
        writer.add(s)
    writer.finish()
    ds = load_dataset(tmp_path)
    assert ds.ids == ["s0", "s1", "s2"]
    assert ds.ids == load_dataset(tmp_path).ids
    for orig, loaded in zip(originals, ds):
        assert np.allclose(orig.image, loaded.image, atol=1 / 510)
        assert np.array_equal(orig.labeled_masks.masks, loaded.labeled_masks.masks)
        assert orig.caption == loaded.caption
