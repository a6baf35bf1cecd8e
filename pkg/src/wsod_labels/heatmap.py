"""Heatmap normalization, resizing, thresholding and region bookkeeping."""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import aiofiles
import numpy as np

from .errors import BadInputError, InvariantViolation
from .geometry import Box

logger = logging.getLogger(__name__)

# Neighbours already visited in a raster scan, per connectivity.
_BACKWARD_OFFSETS = {
    4: ((-1, 0), (0, -1)),
    8: ((-1, -1), (-1, 0), (-1, 1), (0, -1)),
}


@dataclass(frozen=True)
class RawActivationMap:
    """Unnormalized per-class activation grid of shape ``(H', W')``."""

    values: np.ndarray
    class_id: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValueError(f"Activation map must be a non-empty 2-D grid, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError(f"Activation map for class {self.class_id} has non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class Heatmap:
    """Min-max normalized per-class heatmap with values in [0, 1]."""

    values: np.ndarray
    class_id: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.size == 0:
            raise ValueError(f"Heatmap must be a non-empty 2-D grid, got {values.shape}")
        if np.any(values < 0.0) or np.any(values > 1.0):
            raise ValueError(f"Heatmap for class {self.class_id} has values outside [0, 1]")
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


class Level(str, Enum):
    HIGH = "high"
    LOW = "low"


@dataclass(frozen=True)
class ThresholdRegion:
    """One connected component of a thresholded heatmap."""

    region_id: int
    pixels: tuple[tuple[int, int], ...]
    box: Box
    level: Level | None
    threshold: float


@dataclass(frozen=True)
class SubordinateMap:
    """Maps every high-threshold region id to its enclosing low-threshold region id."""

    parent: dict[int, int] = field(default_factory=dict)

    def highs_of(self, low_id: int) -> list[int]:
        """High region ids subordinate to ``low_id``, in ascending order."""
        return sorted(h for h, low in self.parent.items() if low == low_id)

    def count(self, low_id: int) -> int:
        return sum(1 for low in self.parent.values() if low == low_id)


class _UnionFind:
    """Disjoint sets with path compression."""

    def __init__(self, size: int):
        self.parents = list(range(size))

    def find(self, elem: int) -> int:
        root = elem
        while root != self.parents[root]:
            root = self.parents[root]
        while elem != root:
            self.parents[elem], elem = root, self.parents[elem]
        return root

    def union(self, a: int, b: int):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # Keep the smaller index as root so roots follow raster order.
            if rb < ra:
                ra, rb = rb, ra
            self.parents[rb] = ra

    def components(self) -> dict[int, list[int]]:
        groups: dict[int, list[int]] = {}
        for i in range(len(self.parents)):
            groups.setdefault(self.find(i), []).append(i)
        return groups


def normalize(raw: RawActivationMap) -> Heatmap:
    """Min-max normalize; a constant map becomes all zeros."""
    values = raw.values
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        logger.warning(f"Constant activation map for class {raw.class_id}; no regions will form")
        return Heatmap(np.zeros_like(values), raw.class_id)
    scaled = (values - lo) / (hi - lo)
    return Heatmap(np.clip(scaled, 0.0, 1.0), raw.class_id)


def _corner_aligned_coords(n_out: int, n_in: int) -> np.ndarray:
    if n_out == 1 or n_in == 1:
        return np.zeros(n_out, dtype=np.float64)
    return np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)


def _interp_axis(values: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    n_in = values.shape[axis]
    lo = np.clip(np.floor(coords).astype(int), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = coords - lo
    a = np.take(values, lo, axis=axis)
    b = np.take(values, hi, axis=axis)
    shape = [1, 1]
    shape[axis] = -1
    frac = frac.reshape(shape)
    return a * (1.0 - frac) + b * frac


def upsample_bilinear(raw: RawActivationMap, height: int, width: int) -> RawActivationMap:
    """Corner-aligned bilinear resize to ``(height, width)``."""
    if height < 1 or width < 1:
        raise ValueError(f"Target size must be positive, got {height}x{width}")
    src_h, src_w = raw.shape
    rows = _interp_axis(raw.values, _corner_aligned_coords(height, src_h), axis=0)
    out = _interp_axis(rows, _corner_aligned_coords(width, src_w), axis=1)
    # Convex combinations stay within the source range up to rounding.
    out = np.clip(out, raw.values.min(), raw.values.max())
    return RawActivationMap(out, raw.class_id)


def prepare_heatmap(raw: RawActivationMap, height: int, width: int) -> Heatmap:
    """Upsample to image resolution when needed, then min-max normalize."""
    if raw.shape != (height, width):
        raw = upsample_bilinear(raw, height, width)
    return normalize(raw)


def region_sort_key(pixels: list[tuple[int, int]]) -> tuple[int, int, tuple[int, int]]:
    """Deterministic region order: min row, then min col, then first raster pixel."""
    return (min(r for r, _ in pixels), min(c for _, c in pixels), min(pixels))


def threshold_regions(
    h: Heatmap,
    tau: float,
    level: Level | None = None,
    connectivity: int = 8,
) -> list[ThresholdRegion]:
    """Connected components of ``{v >= tau}`` with their tightest boxes."""
    if connectivity not in _BACKWARD_OFFSETS:
        raise ValueError(f"Connectivity must be 4 or 8, got {connectivity}")
    return _label_mask(h.values >= tau, tau, level, connectivity)


def _label_mask(
    mask: np.ndarray, tau: float, level: Level | None, connectivity: int
) -> list[ThresholdRegion]:
    coords = [(int(r), int(c)) for r, c in np.argwhere(mask)]
    if not coords:
        return []

    n_rows, n_cols = mask.shape
    index = {p: k for k, p in enumerate(coords)}
    uf = _UnionFind(len(coords))
    for k, (r, c) in enumerate(coords):
        for dr, dc in _BACKWARD_OFFSETS[connectivity]:
            nr, nc = r + dr, c + dc
            if 0 <= nr < n_rows and 0 <= nc < n_cols and mask[nr, nc]:
                uf.union(k, index[(nr, nc)])

    groups = [[coords[k] for k in members] for members in uf.components().values()]
    groups.sort(key=region_sort_key)

    regions = []
    for region_id, pixels in enumerate(groups):
        box = Box.from_pixels((r for r, _ in pixels), (c for _, c in pixels))
        regions.append(
            ThresholdRegion(
                region_id=region_id,
                pixels=tuple(pixels),
                box=box,
                level=level,
                threshold=tau,
            )
        )
    return regions


def label_components(mask: np.ndarray, connectivity: int = 8) -> list[list[tuple[int, int]]]:
    """Pixel lists of the connected components of a boolean mask."""
    if connectivity not in _BACKWARD_OFFSETS:
        raise ValueError(f"Connectivity must be 4 or 8, got {connectivity}")
    regions = _label_mask(np.asarray(mask, dtype=bool), 0.5, None, connectivity)
    return [list(region.pixels) for region in regions]


def subordinate(highs: list[ThresholdRegion], lows: list[ThresholdRegion]) -> SubordinateMap:
    """Assign each high region to the low region holding its pixels.

    Membership is decided on pixels, never on box containment.
    """
    owner: dict[tuple[int, int], int] = {}
    for low in lows:
        for pixel in low.pixels:
            owner[pixel] = low.region_id

    parent: dict[int, int] = {}
    for high in highs:
        owners = {owner.get(pixel) for pixel in high.pixels}
        if None in owners:
            raise InvariantViolation(
                f"High region {high.region_id} has pixels outside every low region"
            )
        if len(owners) != 1:
            raise InvariantViolation(
                f"High region {high.region_id} spans low regions {sorted(owners)}"
            )
        parent[high.region_id] = owners.pop()
    return SubordinateMap(parent)


def box_mean_scores(h: Heatmap, boxes: list[Box]) -> np.ndarray:
    """Mean heatmap value over the pixels whose centers lie inside each box (0 if none do)."""
    integral = np.zeros((h.height + 1, h.width + 1))
    integral[1:, 1:] = h.values.cumsum(axis=0).cumsum(axis=1)
    scores = np.zeros(len(boxes))
    for i, b in enumerate(boxes):
        c0 = max(0, math.ceil(b.x1 - 0.5))
        c1 = min(h.width - 1, math.floor(b.x2 - 0.5))
        r0 = max(0, math.ceil(b.y1 - 0.5))
        r1 = min(h.height - 1, math.floor(b.y2 - 0.5))
        if c1 < c0 or r1 < r0:
            continue
        total = (
            integral[r1 + 1, c1 + 1]
            - integral[r0, c1 + 1]
            - integral[r1 + 1, c0]
            + integral[r0, c0]
        )
        scores[i] = total / ((r1 - r0 + 1) * (c1 - c0 + 1))
    return scores


def format_grid(values: np.ndarray) -> str:
    """Render a grid in the text format: ``H W`` then H rows of W floats."""
    values = np.asarray(values, dtype=np.float64)
    lines = [f"{values.shape[0]} {values.shape[1]}"]
    for row in values:
        lines.append(" ".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def parse_grid(text: str, source: str = "<grid>") -> np.ndarray:
    """Parse the text grid format, raising ``BadInputError`` on malformed input."""
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise BadInputError(f"Empty heatmap grid: {source}")
    try:
        height, width = (int(v) for v in lines[0].split())
        rows = [[float(v) for v in line.split()] for line in lines[1:]]
    except ValueError as e:
        raise BadInputError(f"Malformed heatmap grid {source}: {e}") from e

    if height < 1 or width < 1 or len(rows) != height or any(len(r) != width for r in rows):
        raise BadInputError(f"Heatmap grid {source} does not match its header {height}x{width}")
    values = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise BadInputError(f"Heatmap grid {source} contains non-finite values")
    return values


async def read_activation_map(path: str | Path, class_id: int) -> RawActivationMap:
    """Read a text-grid file as a raw activation map."""
    path = Path(path)
    if not path.exists():
        raise BadInputError(f"Heatmap file does not exist: {path}")
    async with aiofiles.open(path, encoding="utf-8") as f:
        text = await f.read()
    return RawActivationMap(parse_grid(text, str(path)), class_id)


async def write_grid(path: str | Path, values: np.ndarray):
    """Write a grid in the text format."""
    async with aiofiles.open(path, "w", encoding="utf-8") as f:
        await f.write(format_grid(values))
