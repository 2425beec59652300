"""Fixed 32-color palette keyed by category index, shared by overlay PNGs
and the browser client so snapshots are reproducible."""

from __future__ import annotations

import numpy as np

PALETTE: tuple[tuple[int, int, int], ...] = (
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
    (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
    (255, 255, 255), (0, 0, 0), (233, 150, 122), (46, 139, 87),
    (72, 61, 139), (255, 105, 180), (95, 158, 160), (218, 165, 32),
    (154, 205, 50), (139, 69, 19), (100, 149, 237), (219, 112, 147),
)


def color_for(index: int) -> tuple[int, int, int]:
    return PALETTE[index % len(PALETTE)]


def overlay_label_map(image: np.ndarray, label_map: np.ndarray,
                      alpha: float = 0.5, scale: int = 4) -> np.ndarray:
    """Blend a label map (nearest-upsampled by ``scale``) over an image.

    Returns a uint8 RGB array the size of the image.
    """
    colors = np.array([color_for(k) for k in range(int(label_map.max()) + 1)],
                      dtype=np.float32)
    upsampled = np.repeat(np.repeat(label_map, scale, axis=0), scale, axis=1)
    h, w = image.shape[:2]
    upsampled = upsampled[:h, :w]
    tint = colors[upsampled] / 255.0
    blended = (1.0 - alpha) * image + alpha * tint
    return np.clip(np.rint(blended * 255.0), 0, 255).astype(np.uint8)
