"""Procedural colored-shapes scenes: images, class-agnostic masks, captions.

Scenes are rendered anti-aliased (4x supersampling); per-object masks are the
hard-thresholded visible coverage, so the object masks plus the background
mask partition the frame. Captions follow the grammar
``a {color} {shape}( and a {color} {shape})* on a {bg-color} background``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import MASK_STRIDE, DatasetWriter, LabeledMaskSet, Sample

SUPERSAMPLE = 4
SHAPE_NAMES = ("circle", "square", "triangle", "bar")

DEFAULT_COLORS: tuple[tuple[str, tuple[int, int, int]], ...] = (
    ("red", (220, 50, 47)),
    ("green", (64, 160, 43)),
    ("blue", (38, 99, 214)),
    ("yellow", (228, 196, 28)),
    ("purple", (136, 70, 188)),
    ("orange", (232, 126, 26)),
)

DEFAULT_BACKGROUNDS: tuple[tuple[str, tuple[int, int, int]], ...] = (
    ("white", (244, 244, 240)),
    ("gray", (128, 128, 128)),
)

# Retries before giving up on a scene; placement failures must be loud.
MAX_SCENE_ATTEMPTS = 40
MAX_OBJECT_ATTEMPTS = 60


class SceneGenerationError(Exception):
    """Raised when object placement keeps failing; never truncate silently."""


@dataclass(frozen=True)
class SceneConfig:
    """Knobs for the shapes world; deterministic given (config, seed)."""

    image_size: int = 64
    shapes: tuple[str, ...] = SHAPE_NAMES
    colors: tuple[tuple[str, tuple[int, int, int]], ...] = DEFAULT_COLORS
    objects_per_scene: tuple[int, int] = (1, 3)
    background_colors: tuple[tuple[str, tuple[int, int, int]], ...] = DEFAULT_BACKGROUNDS
    allow_overlap: bool = False
    min_visible_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 32 or self.image_size % 32:
            raise ValueError("image_size must be a positive multiple of 32")
        if len(self.shapes) < 2:
            raise ValueError("need at least 2 shapes")
        unknown = set(self.shapes) - set(SHAPE_NAMES)
        if unknown:
            raise ValueError(f"unknown shapes: {sorted(unknown)}")
        if len(self.colors) < 2:
            raise ValueError("need at least 2 colors")
        lo, hi = self.objects_per_scene
        if lo < 1 or hi < lo:
            raise ValueError(f"bad objects_per_scene range {self.objects_per_scene}")
        if not (0.0 < self.min_visible_fraction <= 1.0):
            raise ValueError("min_visible_fraction must be in (0, 1]")
        if not self.background_colors:
            raise ValueError("need at least one background color")

    @property
    def color_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.colors)

    @classmethod
    def from_file(cls, path: str | Path) -> "SceneConfig":
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        if path.suffix.lower() in (".yaml", ".yml"):
            import yaml
            obj = yaml.safe_load(text) or {}
        else:
            obj = json.loads(text)
        return cls.from_dict(obj)

    @classmethod
    def from_dict(cls, obj: dict) -> "SceneConfig":
        kwargs = dict(obj)
        if "shapes" in kwargs:
            kwargs["shapes"] = tuple(kwargs["shapes"])
        for key in ("colors", "background_colors"):
            if key in kwargs:
                value = kwargs[key]
                if isinstance(value, dict):
                    value = list(value.items())
                kwargs[key] = tuple((str(n), tuple(int(c) for c in rgb))
                                    for n, rgb in value)
        if "objects_per_scene" in kwargs:
            kwargs["objects_per_scene"] = tuple(kwargs["objects_per_scene"])
        return cls(**kwargs)


@dataclass(frozen=True)
class ConceptSplit:
    """(color, shape) pairs excluded from training captions/scenes."""

    holdout_pairs: tuple[tuple[str, str], ...]

    def __post_init__(self):
        pairs = tuple((str(c), str(s)) for c, s in self.holdout_pairs)
        if len(set(pairs)) != len(pairs):
            raise ValueError("duplicate holdout pairs")
        object.__setattr__(self, "holdout_pairs", pairs)

    def validate_against(self, config: SceneConfig) -> None:
        colors = set(config.color_names)
        shapes = set(config.shapes)
        held = set(self.holdout_pairs)
        for color, shape in held:
            if color not in colors or shape not in shapes:
                raise ValueError(f"holdout pair ({color}, {shape}) outside the config grid")
        if len(held) >= len(colors) * len(shapes):
            raise ValueError("holdout must be a strict subset of the color x shape grid")
        # Every held-out color and shape must still be trainable in some
        # other combination.
        for color, shape in held:
            if all((color, s) in held for s in shapes):
                raise ValueError(f"holdout covers every shape for color {color!r}")
            if all((c, shape) in held for c in colors):
                raise ValueError(f"holdout covers every color for shape {shape!r}")


def _coverage(shape: str, cx: float, cy: float, size: float, extra: dict,
              image_size: int) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] via SUPERSAMPLE x SUPERSAMPLE subpixels."""
    n = image_size * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / SUPERSAMPLE
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    if shape == "circle":
        inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= size ** 2
    elif shape == "square":
        inside = np.maximum(np.abs(xs - cx), np.abs(ys - cy)) <= size
    elif shape == "triangle":
        # Equilateral, apex up, circumradius `size`.
        ax, ay = cx, cy - size
        bx, by = cx - size * np.sqrt(3) / 2, cy + size / 2
        dx, dy = cx + size * np.sqrt(3) / 2, cy + size / 2
        def half_plane(x0, y0, x1, y1):
            return (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0) >= 0
        inside = half_plane(ax, ay, dx, dy) & half_plane(dx, dy, bx, by) & half_plane(bx, by, ax, ay)
    elif shape == "bar":
        half_long = size
        half_short = extra["half_short"]
        if extra["vertical"]:
            inside = (np.abs(xs - cx) <= half_short) & (np.abs(ys - cy) <= half_long)
        else:
            inside = (np.abs(xs - cx) <= half_long) & (np.abs(ys - cy) <= half_short)
    else:  # pragma: no cover - guarded by SceneConfig
        raise ValueError(f"unknown shape {shape!r}")
    fine = inside.astype(np.float32).reshape(
        image_size, SUPERSAMPLE, image_size, SUPERSAMPLE)
    return fine.mean(axis=(1, 3))


def _sample_geometry(shape: str, rng: np.random.Generator, image_size: int):
    # Sizes keep several stride-4 cells per object so shape identity
    # survives the downsample to the mask grid.
    scale = image_size / 64.0
    extra: dict = {}
    if shape == "circle":
        size = rng.uniform(7.5, 12.0) * scale
        margin = size
    elif shape == "square":
        size = rng.uniform(6.5, 10.5) * scale
        margin = size
    elif shape == "triangle":
        size = rng.uniform(8.5, 13.0) * scale
        margin = size
    else:  # bar
        size = rng.uniform(10.0, 15.0) * scale
        extra["half_short"] = rng.uniform(2.5, 4.0) * scale
        extra["vertical"] = bool(rng.integers(2))
        margin = size
    pad = margin + 1.0
    cx = rng.uniform(pad, image_size - pad)
    cy = rng.uniform(pad, image_size - pad)
    return cx, cy, size, extra


def _downsample_mask(mask: np.ndarray) -> np.ndarray:
    """Nearest-neighbor stride-4 downsample (sample at each cell center)."""
    off = MASK_STRIDE // 2
    return mask[off::MASK_STRIDE, off::MASK_STRIDE]


def _pick_pair(rng: np.random.Generator, config: SceneConfig,
               forbidden: frozenset[tuple[str, str]]) -> tuple[str, str]:
    allowed = [(c, s) for c, _ in config.colors for s in config.shapes
               if (c, s) not in forbidden]
    if not allowed:
        raise SceneGenerationError("no (color, shape) pair is allowed")
    return allowed[int(rng.integers(len(allowed)))]


def generate_scene(config: SceneConfig, index: int, *,
                   forbidden_pairs: frozenset[tuple[str, str]] = frozenset(),
                   required_pairs: frozenset[tuple[str, str]] = frozenset()) -> Sample:
    """Render one deterministic scene for (config.seed, index).

    ``forbidden_pairs`` never appear; when ``required_pairs`` is nonempty, at
    least one object is drawn from it. Masks are ordered like the caption
    (objects in draw order), with the background mask last.
    """
    size = config.image_size
    color_rgb = dict(config.colors)
    rng_master = np.random.default_rng((int(config.seed), int(index)))
    for attempt in range(MAX_SCENE_ATTEMPTS):
        rng = np.random.default_rng(rng_master.integers(0, 2 ** 63 - 1))
        n_objects = int(rng.integers(config.objects_per_scene[0],
                                     config.objects_per_scene[1] + 1))
        bg_name, bg_rgb = config.background_colors[
            int(rng.integers(len(config.background_colors)))]
        required_slot = int(rng.integers(n_objects)) if required_pairs else -1

        placed: list[dict] = []
        ok = True
        for slot in range(n_objects):
            if slot == required_slot:
                pairs = sorted(required_pairs)
                color, shape = pairs[int(rng.integers(len(pairs)))]
            else:
                color, shape = _pick_pair(rng, config, forbidden_pairs)
            success = False
            for _ in range(MAX_OBJECT_ATTEMPTS):
                cx, cy, s, extra = _sample_geometry(shape, rng, size)
                cov = _coverage(shape, cx, cy, s, extra, size)
                hard = cov >= 0.5
                if not config.allow_overlap and any(
                        (hard & p["hard"]).any() for p in placed):
                    continue
                success = True
                placed.append(dict(color=color, shape=shape, cov=cov, hard=hard))
                break
            if not success:
                ok = False
                break
        if not ok:
            continue

        # Visibility: the topmost object at >= 50% coverage owns the pixel.
        owner = np.full((size, size), -1, dtype=np.int64)
        for k, obj in enumerate(placed):
            owner[obj["hard"]] = k
        visible_small = []
        for k, obj in enumerate(placed):
            vis = (owner == k)
            full_area = int(obj["hard"].sum())
            if full_area == 0 or vis.sum() < config.min_visible_fraction * full_area:
                ok = False
                break
            small = _downsample_mask(vis.astype(np.uint8))
            if small.sum() == 0:
                ok = False
                break
            visible_small.append(small)
        if not ok:
            continue
        background_small = _downsample_mask((owner < 0).astype(np.uint8))
        if background_small.sum() == 0:
            continue

        image = np.empty((size, size, 3), dtype=np.float32)
        image[:] = np.asarray(bg_rgb, dtype=np.float32) / 255.0
        for obj in placed:
            rgb = np.asarray(color_rgb[obj["color"]], dtype=np.float32) / 255.0
            cov = obj["cov"][..., None]
            image = image * (1.0 - cov) + rgb * cov

        phrases = [f"a {obj['color']} {obj['shape']}" for obj in placed]
        caption = " and ".join(phrases) + f" on a {bg_name} background"
        masks = np.stack(visible_small + [background_small])
        return Sample(id=f"scene-{index:06d}",
                      image=np.clip(image, 0.0, 1.0),
                      labeled_masks=LabeledMaskSet(masks=masks),
                      caption=caption)
    raise SceneGenerationError(
        f"could not place objects for scene {index} after {MAX_SCENE_ATTEMPTS} attempts")


def parse_caption(caption: str) -> tuple[list[tuple[str, str]], str]:
    """Invert the caption grammar: ((color, shape) per object, bg color)."""
    body, _, tail = caption.rpartition(" on a ")
    if not body or not tail.endswith(" background"):
        raise ValueError(f"caption does not follow the scene grammar: {caption!r}")
    bg_color = tail[: -len(" background")]
    pairs = []
    for phrase in body.split(" and "):
        words = phrase.split()
        if len(words) != 3 or words[0] != "a":
            raise ValueError(f"bad object phrase {phrase!r} in {caption!r}")
        pairs.append((words[1], words[2]))
    return pairs, bg_color


def generate_dataset(config: SceneConfig, n: int, out: str | Path, *,
                     forbidden_pairs: frozenset[tuple[str, str]] = frozenset(),
                     required_pairs: frozenset[tuple[str, str]] = frozenset()) -> Path:
    """Write n scenes to ``out`` in the manifest format; returns the manifest path."""
    writer = DatasetWriter(root=Path(out))
    for index in range(n):
        writer.add(generate_scene(config, index,
                                  forbidden_pairs=forbidden_pairs,
                                  required_pairs=required_pairs))
    return writer.finish()


def split_zero_shot(config: SceneConfig, split: ConceptSplit, n_train: int,
                    n_test: int, out: str | Path) -> tuple[Path, Path]:
    """Generate a train set without the holdout pairs and a test set where
    every scene contains at least one holdout pair."""
    split.validate_against(config)
    out = Path(out)
    train_dir = out / "train"
    test_dir = out / "test"
    holdout = frozenset(split.holdout_pairs)
    generate_dataset(config, n_train, train_dir, forbidden_pairs=holdout)
    # Distinct stream for the test side so indices never collide with train.
    test_config = replace(config, seed=config.seed + 1_000_003)
    if holdout:
        generate_dataset(test_config, n_test, test_dir, required_pairs=holdout)
    else:
        generate_dataset(test_config, n_test, test_dir)
    return train_dir, test_dir
