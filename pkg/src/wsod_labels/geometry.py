"""Axis-aligned box arithmetic: IoU, containment, scaling and greedy NMS."""

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in continuous image coordinates (origin top-left)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            object.__setattr__(self, name, float(getattr(self, name)))
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in coords):
            raise ValueError(f"Box coordinates must be finite: {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"Box must have positive area: {coords}")

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> "Box":
        """Build a box from an ``(x1, y1, x2, y2)`` sequence."""
        if len(values) != 4:
            raise ValueError(f"Expected 4 box coordinates, got {len(values)}")
        return cls(*(float(v) for v in values))

    @classmethod
    def from_pixels(cls, rows: Iterable[int], cols: Iterable[int]) -> "Box":
        """Tightest box around a pixel set; pixel (r, c) covers [c, c+1] x [r, r+1]."""
        rows = list(rows)
        cols = list(cols)
        return cls(float(min(cols)), float(min(rows)), float(max(cols) + 1), float(max(rows) + 1))

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    def to_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    """Stack boxes into an ``(N, 4)`` float array."""
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([b.to_list() for b in boxes], dtype=np.float64)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    inter_w = min(a.x2, b.x2) - max(a.x1, b.x1)
    inter_h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if inter_w <= 0 or inter_h <= 0:
        return 0.0
    inter = inter_w * inter_h
    return inter / (a.area + b.area - inter)


def iou_matrix(a: Sequence[Box] | np.ndarray, b: Sequence[Box] | np.ndarray) -> np.ndarray:
    """Pairwise IoU, shape ``(len(a), len(b))``."""
    aa = a if isinstance(a, np.ndarray) else boxes_to_array(a)
    bb = b if isinstance(b, np.ndarray) else boxes_to_array(b)
    if len(aa) == 0 or len(bb) == 0:
        return np.zeros((len(aa), len(bb)), dtype=np.float64)

    xx1 = np.maximum(aa[:, None, 0], bb[None, :, 0])
    yy1 = np.maximum(aa[:, None, 1], bb[None, :, 1])
    xx2 = np.minimum(aa[:, None, 2], bb[None, :, 2])
    yy2 = np.minimum(aa[:, None, 3], bb[None, :, 3])
    inter = np.maximum(0.0, xx2 - xx1) * np.maximum(0.0, yy2 - yy1)

    area_a = (aa[:, 2] - aa[:, 0]) * (aa[:, 3] - aa[:, 1])
    area_b = (bb[:, 2] - bb[:, 0]) * (bb[:, 3] - bb[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def contains(outer: Box, inner: Box) -> bool:
    """True iff ``inner`` lies inside ``outer``; shared edges count as inside."""
    return (
        outer.x1 <= inner.x1
        and outer.y1 <= inner.y1
        and inner.x2 <= outer.x2
        and inner.y2 <= outer.y2
    )


def scale_box(b: Box, r: float, bounds: tuple[float, float]) -> Box:
    """Scale a box about its center by ``r`` and clip it to ``[0, W] x [0, H]``."""
    if r < 1:
        raise ValueError(f"Scale factor must be >= 1, got {r}")
    width, height = bounds
    cx, cy = b.center
    half_w = b.width * r / 2.0
    half_h = b.height * r / 2.0
    return Box(
        max(0.0, cx - half_w),
        max(0.0, cy - half_h),
        min(float(width), cx + half_w),
        min(float(height), cy + half_h),
    )


def nms(scored: Sequence[tuple[Box, float]], iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression.

    Boxes are visited by descending score (ties: lower index first); a box is
    kept iff its IoU with every kept box is below ``iou_threshold``. Returns the
    kept indices in visiting order.
    """
    if not scored:
        return []

    scores = np.array([s for _, s in scored], dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("NMS scores must be finite")

    boxes = boxes_to_array([b for b, _ in scored])
    overlaps = iou_matrix(boxes, boxes)
    order = np.argsort(-scores, kind="stable")

    keep: list[int] = []
    for i in order:
        if all(overlaps[i, j] < iou_threshold for j in keep):
            keep.append(int(i))
    return keep
