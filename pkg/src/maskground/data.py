"""Core domain types, mask run-length codecs, and the on-disk dataset format.

A dataset directory contains ``manifest.json`` plus 8-bit RGB PNG images.
Each manifest record has an ``id``, an ``image_path`` relative to the
directory, and at least one of ``caption`` (string) / ``masks`` (list of
RLE-encoded class-agnostic binary masks at mask resolution, i.e. image
resolution divided by :data:`MASK_STRIDE`).
"""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

#: Output stride of the segmentation model: labeled masks and predictions
#: live on a grid of (H / MASK_STRIDE, W / MASK_STRIDE).
MASK_STRIDE = 4

MANIFEST_NAME = "manifest.json"


class DatasetError(Exception):
    """Base class for dataset validation failures. Carries the sample id."""

    def __init__(self, sample_id: str, message: str):
        self.sample_id = sample_id
        super().__init__(f"sample {sample_id!r}: {message}")


class MissingImageError(DatasetError):
    """The image file referenced by a manifest record does not exist."""


class MalformedMaskError(DatasetError):
    """A stored mask is inconsistent (bad RLE, wrong shape, empty, ...)."""


class MissingAnnotationError(DatasetError):
    """A record has neither a caption nor labeled masks."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class RleMask:
    """Row-major run-length encoding of a binary mask.

    ``counts`` alternates runs of zeros and ones, starting with a run of
    zeros (possibly of length 0). The sum of the counts equals h * w.
    """

    size: tuple[int, int]
    counts: tuple[int, ...]

    def __post_init__(self):
        h, w = self.size
        if h <= 0 or w <= 0:
            raise ValueError(f"RLE size must be positive, got {self.size}")
        if any(c < 0 for c in self.counts):
            raise ValueError("RLE counts must be non-negative")
        if sum(self.counts) != h * w:
            raise ValueError(
                f"RLE counts sum to {sum(self.counts)}, expected {h * w}"
            )

    def to_json(self) -> dict:
        return {"size": [int(self.size[0]), int(self.size[1])],
                "counts": [int(c) for c in self.counts]}

    @classmethod
    def from_json(cls, obj: dict) -> "RleMask":
        return cls(size=(int(obj["size"][0]), int(obj["size"][1])),
                   counts=tuple(int(c) for c in obj["counts"]))


def encode_rle(mask: np.ndarray) -> RleMask:
    """Losslessly encode a 2-D binary mask, row-major, zeros first."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask entries must be 0 or 1")
    flat = mask.astype(np.uint8).ravel()
    change = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate(([0], change))
    lengths = np.diff(np.concatenate((starts, [flat.size])))
    counts: list[int] = []
    if flat[starts[0]] == 1:
        counts.append(0)
    counts.extend(int(n) for n in lengths)
    return RleMask(size=(mask.shape[0], mask.shape[1]), counts=tuple(counts))


def decode_rle(rle: RleMask) -> np.ndarray:
    """Exact inverse of :func:`encode_rle`; returns a uint8 array."""
    h, w = rle.size
    flat = np.zeros(h * w, dtype=np.uint8)
    pos = 0
    value = 0
    for count in rle.counts:
        if value:
            flat[pos:pos + count] = 1
        pos += count
        value ^= 1
    return flat.reshape(h, w)


@dataclass(frozen=True)
class LabeledMaskSet:
    """M class-agnostic binary masks at mask resolution."""

    masks: np.ndarray  # (M, H', W') uint8 in {0, 1}

    def __post_init__(self):
        masks = np.asarray(self.masks)
        if masks.ndim != 3 or masks.shape[0] < 1:
            raise ValueError(f"expected (M, H', W') with M >= 1, got {masks.shape}")
        if not np.isin(masks, (0, 1)).all():
            raise ValueError("labeled masks must be binary")
        if (masks.reshape(masks.shape[0], -1).sum(axis=1) == 0).any():
            raise ValueError("every labeled mask needs at least one positive pixel")
        object.__setattr__(self, "masks", _freeze(masks.astype(np.uint8)))

    @property
    def count(self) -> int:
        return int(self.masks.shape[0])


@dataclass(frozen=True)
class Sample:
    """One training/evaluation example: an image plus optional annotations."""

    id: str
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    labeled_masks: LabeledMaskSet | None = None
    caption: str | None = None

    def __post_init__(self):
        if not self.id:
            raise ValueError("sample id must be nonempty")
        image = np.asarray(self.image, dtype=np.float32)
        if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] < 1 or image.shape[1] < 1:
            raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
        if image.min() < 0.0 or image.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        object.__setattr__(self, "image", _freeze(image))
        if self.labeled_masks is not None:
            h, w = image.shape[:2]
            if h % MASK_STRIDE or w % MASK_STRIDE:
                raise ValueError(
                    f"image size {h}x{w} is not divisible by the mask stride {MASK_STRIDE}"
                )
            expected = (h // MASK_STRIDE, w // MASK_STRIDE)
            got = self.labeled_masks.masks.shape[1:]
            if got != expected:
                raise ValueError(
                    f"labeled masks have shape {got}, expected {expected} "
                    f"(image size / {MASK_STRIDE})"
                )

    @property
    def mask_size(self) -> tuple[int, int]:
        return (self.image.shape[0] // MASK_STRIDE, self.image.shape[1] // MASK_STRIDE)


@dataclass(frozen=True)
class MaskProposalSet:
    """N soft masks over the mask grid with their pooled region features."""

    masks: np.ndarray     # (N, H', W'), values in (0, 1)
    features: np.ndarray  # (N, D)

    def __post_init__(self):
        masks = np.asarray(self.masks, dtype=np.float32)
        features = np.asarray(self.features, dtype=np.float32)
        if masks.ndim != 3 or features.ndim != 2 or masks.shape[0] != features.shape[0]:
            raise ValueError(
                f"inconsistent proposal shapes: masks {masks.shape}, features {features.shape}"
            )
        if masks.min() <= 0.0 or masks.max() >= 1.0:
            raise ValueError("proposal masks must lie strictly in (0, 1)")
        if not np.isfinite(features).all():
            raise ValueError("proposal features must be finite")
        object.__setattr__(self, "masks", _freeze(masks))
        object.__setattr__(self, "features", _freeze(features))

    @property
    def count(self) -> int:
        return int(self.masks.shape[0])


@dataclass(frozen=True)
class SegmentationResult:
    """Per-pixel category logits with the argmax label map."""

    pixel_logits: np.ndarray  # (K_cat, H', W')
    label_map: np.ndarray     # (H', W') int64 in [0, K_cat)
    per_query_masks: np.ndarray | None = None  # (K_rows, H', W') soft masks

    def __post_init__(self):
        logits = np.asarray(self.pixel_logits)
        labels = np.asarray(self.label_map)
        if logits.ndim != 3 or labels.shape != logits.shape[1:]:
            raise ValueError(
                f"inconsistent shapes: logits {logits.shape}, labels {labels.shape}"
            )
        # argmax with lowest-index tie-break is exactly np.argmax.
        if not np.array_equal(labels, np.argmax(logits, axis=0)):
            raise ValueError("label_map must be the argmax of pixel_logits")
        object.__setattr__(self, "pixel_logits", _freeze(logits))
        object.__setattr__(self, "label_map", _freeze(labels.astype(np.int64)))
        if self.per_query_masks is not None:
            object.__setattr__(self, "per_query_masks",
                               _freeze(np.asarray(self.per_query_masks)))


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    image_path: str
    caption: str | None = None
    masks: tuple[RleMask, ...] | None = None


class ManifestDataset(Sequence):
    """Lazy, validated view over a dataset directory.

    Record-level invariants (schema, RLE consistency, image existence,
    caption-or-masks presence) are checked eagerly; pixel data is loaded and
    validated on access. Order is the manifest order.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        manifest_path = self.root / MANIFEST_NAME
        if not manifest_path.is_file():
            raise FileNotFoundError(f"no {MANIFEST_NAME} in {self.root}")
        with open(manifest_path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, list):
            raise ValueError(f"{manifest_path} must hold a JSON array")
        self.records: list[ManifestRecord] = []
        seen: set[str] = set()
        for entry in raw:
            record = self._validate_record(entry)
            if record.id in seen:
                raise DatasetError(record.id, "duplicate id in manifest")
            seen.add(record.id)
            self.records.append(record)

    def _validate_record(self, entry: dict) -> ManifestRecord:
        sample_id = str(entry.get("id", ""))
        if not sample_id:
            raise DatasetError("<missing>", "record without an id")
        image_path = entry.get("image_path")
        if not image_path:
            raise MissingImageError(sample_id, "record without an image_path")
        if not (self.root / image_path).is_file():
            raise MissingImageError(sample_id, f"image file {image_path!r} not found")
        caption = entry.get("caption")
        masks_json = entry.get("masks")
        if caption is None and not masks_json:
            raise MissingAnnotationError(sample_id, "needs a caption or masks (or both)")
        masks: tuple[RleMask, ...] | None = None
        if masks_json:
            decoded = []
            for k, m in enumerate(masks_json):
                try:
                    decoded.append(RleMask.from_json(m))
                except (ValueError, KeyError, TypeError) as exc:
                    raise MalformedMaskError(sample_id, f"mask {k}: {exc}") from exc
            masks = tuple(decoded)
        return ManifestRecord(id=sample_id, image_path=str(image_path),
                              caption=caption, masks=masks)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def __getitem__(self, index: int) -> Sample:
        record = self.records[index]
        return self._materialize(record)

    def _materialize(self, record: ManifestRecord) -> Sample:
        path = self.root / record.image_path
        try:
            with Image.open(path) as img:
                rgb = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        except OSError as exc:
            raise MissingImageError(record.id, f"cannot read {path}: {exc}") from exc
        labeled = None
        if record.masks is not None:
            expected = (rgb.shape[0] // MASK_STRIDE, rgb.shape[1] // MASK_STRIDE)
            arrays = []
            for k, rle in enumerate(record.masks):
                if rle.size != expected:
                    raise MalformedMaskError(
                        record.id,
                        f"mask {k} has size {rle.size}, expected {expected}")
                arrays.append(decode_rle(rle))
            try:
                labeled = LabeledMaskSet(masks=np.stack(arrays))
            except ValueError as exc:
                raise MalformedMaskError(record.id, str(exc)) from exc
        try:
            return Sample(id=record.id, image=rgb, labeled_masks=labeled,
                          caption=record.caption)
        except ValueError as exc:
            raise DatasetError(record.id, str(exc)) from exc


def load_dataset(path: str | Path) -> ManifestDataset:
    """Open a dataset directory. Deterministic order given the manifest."""
    return ManifestDataset(path)


@dataclass
class DatasetWriter:
    """Streams samples into a dataset directory in the manifest format."""

    root: Path
    image_dir_name: str = "images"
    _records: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.root = Path(self.root)
        (self.root / self.image_dir_name).mkdir(parents=True, exist_ok=True)

    def add(self, sample: Sample) -> None:
        rel = f"{self.image_dir_name}/{sample.id}.png"
        img8 = np.clip(np.rint(sample.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img8, mode="RGB").save(self.root / rel)
        record: dict = {"id": sample.id, "image_path": rel}
        if sample.caption is not None:
            record["caption"] = sample.caption
        if sample.labeled_masks is not None:
            record["masks"] = [encode_rle(m).to_json()
                               for m in sample.labeled_masks.masks]
        self._records.append(record)

    def finish(self) -> Path:
        manifest_path = self.root / MANIFEST_NAME
        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(self._records, fh, indent=1, sort_keys=True)
            fh.write("\n")
        return manifest_path
