"""Portable-pixmap overlays of threshold boxes and clusters over a heatmap."""

import logging
import math
from collections.abc import Mapping
from pathlib import Path

import aiofiles
import numpy as np

from .geometry import Box
from .heatmap import Heatmap, Level, threshold_regions
from .hgps import ClusterSet, HgpsConfig

logger = logging.getLogger(__name__)

LOW_COLOR = (0, 0, 255)
HIGH_COLOR = (255, 0, 0)
MEMBER_COLOR = (0, 255, 0)


def draw_rectangle(image: np.ndarray, box: Box, color: tuple[int, int, int]):
    """Draw a one-pixel outline of ``box`` in place."""
    height, width = image.shape[:2]
    c0 = min(width - 1, max(0, math.floor(box.x1)))
    c1 = min(width - 1, max(0, math.ceil(box.x2) - 1))
    r0 = min(height - 1, max(0, math.floor(box.y1)))
    r1 = min(height - 1, max(0, math.ceil(box.y2) - 1))
    image[r0, c0 : c1 + 1] = color
    image[r1, c0 : c1 + 1] = color
    image[r0 : r1 + 1, c0] = color
    image[r0 : r1 + 1, c1] = color


def render_overlay(
    heatmaps: Mapping[int, Heatmap], clusters: ClusterSet, cfg: HgpsConfig
) -> np.ndarray:
    """RGB image: pixel-wise max heatmap in grey, members green, low boxes blue, high boxes red."""
    if not heatmaps:
        raise ValueError("Overlay needs at least one heatmap")
    stacked = np.max(np.stack([h.values for h in heatmaps.values()]), axis=0)
    grey = np.round(stacked * 255).astype(np.uint8)
    image = np.repeat(grey[:, :, None], 3, axis=2)

    for cluster in clusters:
        for member in cluster.members:
            if not member.is_synthetic:
                draw_rectangle(image, member.box, MEMBER_COLOR)
    for class_id in sorted(heatmaps):
        heatmap = heatmaps[class_id]
        for region in threshold_regions(heatmap, cfg.tau_low, Level.LOW, cfg.connectivity):
            draw_rectangle(image, region.box, LOW_COLOR)
        for region in threshold_regions(heatmap, cfg.tau_high, Level.HIGH, cfg.connectivity):
            draw_rectangle(image, region.box, HIGH_COLOR)
    return image


def encode_ppm(image: np.ndarray) -> bytes:
    height, width = image.shape[:2]
    return f"P6\n{width} {height}\n255\n".encode("ascii") + image.astype(np.uint8).tobytes()


async def write_ppm(path: str | Path, image: np.ndarray):
    async with aiofiles.open(path, "wb") as f:
        await f.write(encode_ppm(image))
    logger.debug(f"Wrote overlay {path}")
