"""Deterministic synthetic scenes and brute-force oracles.

A scene is a set of axis-aligned instances laid out on a grid of cells so that
non-paired instances keep a fixed gap; optionally two instances of one class sit
side by side with a narrow gap so that their low-threshold regions merge.
Heatmaps use a plateau-with-falloff model whose threshold sets are rectangles,
so region geometry is known in closed form.

All randomness comes from SplitMix64 (``PRNG_ALGORITHM``): for state ``x`` each
draw advances ``x += 0x9E3779B97F4A7C15`` (mod 2**64) and returns
``z ^ (z >> 31)`` where ``z = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9`` and then
``z = (z ^ (z >> 27)) * 0x94D049BB133111EB``. Uniform floats take the top 53
bits; normals use Box-Muller with ``u1 = 1 - uniform()``.
"""

import json
import logging
import math
from collections import deque
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import aiofiles
import numpy as np

from .errors import BadInputError, InvariantViolation
from .evalmetrics import Detection, GroundTruth
from .geometry import Box, iou, iou_matrix, scale_box
from .heatmap import (
    Heatmap,
    RawActivationMap,
    format_grid,
    normalize,
    prepare_heatmap,
    read_activation_map,
)
from .hgps import Cluster, ClusterMember, ClusterSet, HgpsConfig, MemberKind

logger = logging.getLogger(__name__)

PRNG_ALGORITHM = "splitmix64"

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MUL1 = 0xBF58476D1CE4E5B9
_MUL2 = 0x94D049BB133111EB


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MUL1) & _MASK
    z = ((z ^ (z >> 27)) * _MUL2) & _MASK
    return z ^ (z >> 31)


class SplitMix64:
    """64-bit counter-based generator; block draws equal the same number of single draws."""

    def __init__(self, seed: int):
        self.state = seed & _MASK

    @classmethod
    def for_stream(cls, seed: int, stream: int) -> "SplitMix64":
        """Independent generator for a named sub-stream of ``seed``."""
        return cls(_mix64((seed ^ _mix64((stream + 1) * _GAMMA & _MASK)) & _MASK))

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK
        return _mix64(self.state)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * ((self.next_u64() >> 11) * 2.0**-53)

    def randint(self, lo: int, hi: int) -> int:
        """Integer in ``[lo, hi]``."""
        if hi < lo:
            raise ValueError(f"Empty integer range [{lo}, {hi}]")
        return lo + self.next_u64() % (hi - lo + 1)

    def normal(self) -> float:
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def uniform_array(self, n: int) -> np.ndarray:
        """``n`` uniform floats in [0, 1), identical to ``n`` calls of ``uniform()``."""
        if n == 0:
            return np.zeros(0)
        steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GAMMA)
        z = steps + np.uint64(self.state)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MUL1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MUL2)
        z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * _GAMMA) & _MASK
        return (z >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def shuffle(self, items: list) -> list:
        """Fisher-Yates shuffle returning a new list."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.randint(0, i)
            out[i], out[j] = out[j], out[i]
        return out


# Sub-stream ids of a scene seed.
_LAYOUT, _NOISE, _PROPOSALS, _FEATURES = range(4)


@dataclass(frozen=True)
class SynthConfig:
    """Scene layout, heatmap, proposal and feature model parameters."""

    num_scenes: int = 8
    width: int = 96
    height: int = 96
    num_classes: int = 3
    min_present: int = 1
    max_present: int = 2
    min_instances: int = 1
    max_instances: int = 2
    min_size: int = 16
    max_size: int = 24
    gap: int = 6
    pair_probability: float = 0.5
    pair_gap: int = 2
    # heatmap model
    core_ratio: float = 0.55
    falloff_ratio: float = 1.47
    noise: float = 0.02
    cam_stride: int = 1
    # proposal model
    n_jitter: int = 2
    jitter_sigma: float = 0.03
    jitter_clamp: float = 0.08
    n_part: int = 1
    part_min: float = 0.3
    part_max: float = 0.5
    n_merge: int = 1
    n_random: int = 4
    # feature model
    feature_dim: int = 8
    feature_noise: float = 0.1
    feature_scale: float = 1.0
    clutter_scale: float = 1.0
    context_factor: float = 2.0

    def __post_init__(self):
        counts = {
            "num_scenes": self.num_scenes,
            "min_present": self.min_present,
            "min_instances": self.min_instances,
            "n_jitter": self.n_jitter,
            "n_part": self.n_part,
            "n_merge": self.n_merge,
            "n_random": self.n_random,
        }
        for name, value in counts.items():
            if value < 0:
                raise ValueError(f"{name} must be >= 0, got {value}")
        if not 0 < self.core_ratio < 1 < self.falloff_ratio:
            raise ValueError(
                "Need 0 < core_ratio < 1 < falloff_ratio, "
                f"got {self.core_ratio}, {self.falloff_ratio}"
            )
        if self.min_present > self.max_present or self.max_present > self.num_classes:
            raise ValueError(
                f"Need min_present <= max_present <= num_classes, got "
                f"{self.min_present}, {self.max_present}, {self.num_classes}"
            )
        if self.min_instances > self.max_instances or self.max_instances < 1:
            raise ValueError(f"Bad instance range [{self.min_instances}, {self.max_instances}]")
        if not 4 <= self.min_size <= self.max_size:
            raise ValueError(
                f"Need 4 <= min_size <= max_size, got {self.min_size}, {self.max_size}"
            )
        if not 0 <= self.pair_gap <= self.gap:
            raise ValueError(f"Need 0 <= pair_gap <= gap, got {self.pair_gap}, {self.gap}")
        if not 0 <= self.pair_probability <= 1:
            raise ValueError(f"pair_probability must be in [0, 1], got {self.pair_probability}")
        if self.noise < 0 or self.cam_stride < 1:
            raise ValueError(
                f"Need noise >= 0 and cam_stride >= 1, got {self.noise}, {self.cam_stride}"
            )
        if not 0 < self.part_min <= self.part_max < 1:
            raise ValueError(
                f"Need 0 < part_min <= part_max < 1, got {self.part_min}, {self.part_max}"
            )
        if self.feature_dim < self.num_classes + 3:
            raise ValueError(
                f"feature_dim must be >= num_classes + 3, got {self.feature_dim} "
                f"for {self.num_classes} classes"
            )
        if self.clutter_scale < 0 or self.context_factor < 1:
            raise ValueError(
                f"Need clutter_scale >= 0 and context_factor >= 1, "
                f"got {self.clutter_scale}, {self.context_factor}"
            )

        rows, cols = self.grid_shape
        if self.max_present * self.max_instances > rows * cols:
            raise ValueError(
                f"Instance overflow: up to {self.max_present * self.max_instances} instances "
                f"but only {rows * cols} cells fit a {self.width}x{self.height} image"
            )
        if self.pairs_possible and self.max_present > rows * (cols // 2):
            raise ValueError(
                f"Instance overflow: up to {self.max_present} adjacent pairs "
                f"but only {rows * (cols // 2)} double cells"
            )

    @property
    def cell(self) -> int:
        return self.max_size + self.gap

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.height // self.cell, self.width // self.cell

    @property
    def pairs_possible(self) -> bool:
        return self.pair_probability > 0 and self.max_instances >= 2

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class Instance:
    class_id: int
    box: Box
    pair: int | None = None


@dataclass(frozen=True)
class Scene:
    width: int
    height: int
    instances: tuple[Instance, ...]
    seed: int

    def __post_init__(self):
        for inst in self.instances:
            b = inst.box
            if b.x1 < 0 or b.y1 < 0 or b.x2 > self.width or b.y2 > self.height:
                raise ValueError(
                    f"Instance {b.to_list()} overflows the {self.width}x{self.height} extent"
                )

    def image_labels(self, num_classes: int) -> np.ndarray:
        labels = np.zeros(num_classes, dtype=np.int64)
        for inst in self.instances:
            labels[inst.class_id - 1] = 1
        return labels

    def ground_truth(self, image_id: int) -> list[GroundTruth]:
        return [GroundTruth(image_id, inst.class_id, inst.box) for inst in self.instances]

    def to_dict(self) -> dict[str, Any]:
        return {
            "width": self.width,
            "height": self.height,
            "seed": self.seed,
            "instances": [
                {"class_id": i.class_id, "box": i.box.to_list(), "pair": i.pair}
                for i in self.instances
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Scene":
        return cls(
            width=data["width"],
            height=data["height"],
            seed=data["seed"],
            instances=tuple(
                Instance(i["class_id"], Box.from_sequence(i["box"]), i["pair"])
                for i in data["instances"]
            ),
        )


@dataclass(frozen=True)
class FeatureModel:
    """Prototype features blended by the box's best instance IoU.

    Classes, near-object background and far clutter each own one axis. Boxes
    that touch no instance context (the instance box scaled by
    ``context_factor``) take the clutter prototype plus a per-row offset along
    a spread axis; every other box takes the near-background prototype. The
    result is mixed with the class prototype of the best-overlapping instance.
    """

    class_means: np.ndarray
    near_mean: np.ndarray
    far_mean: np.ndarray
    spread_axis: np.ndarray
    noise: float
    seed: int
    context_factor: float = 2.0

    @classmethod
    def from_config(cls, cfg: SynthConfig, seed: int) -> "FeatureModel":
        axes = np.eye(cfg.feature_dim)
        return cls(
            class_means=cfg.feature_scale * axes[3 : 3 + cfg.num_classes],
            near_mean=cfg.feature_scale * axes[0],
            far_mean=cfg.clutter_scale * axes[1],
            spread_axis=cfg.clutter_scale * axes[2],
            noise=cfg.feature_noise,
            seed=seed,
            context_factor=cfg.context_factor,
        )

    @property
    def dim(self) -> int:
        return self.near_mean.size

    def is_far(self, box: Box, instances: Sequence[Instance]) -> bool:
        """True when ``box`` overlaps no instance context."""
        for inst in instances:
            cx, cy = inst.box.center
            half_w = inst.box.width * self.context_factor / 2.0
            half_h = inst.box.height * self.context_factor / 2.0
            overlaps_x = box.x1 < cx + half_w and box.x2 > cx - half_w
            if overlaps_x and box.y1 < cy + half_h and box.y2 > cy - half_h:
                return False
        return True

    def box_features(
        self, boxes: Sequence[Box], instances: Sequence[Instance], start_row: int = 0
    ) -> np.ndarray:
        """Feature rows for ``boxes``; row ``start_row + i`` always gets the same noise."""
        out = np.zeros((len(boxes), self.dim))
        if not boxes:
            return out
        overlaps = iou_matrix(boxes, [inst.box for inst in instances]) if instances else None
        for i, box in enumerate(boxes):
            rng = SplitMix64.for_stream(self.seed, (_FEATURES << 32) + start_row + i)
            offset = rng.normal()
            if self.is_far(box, instances):
                mean = self.far_mean + offset * self.spread_axis
            else:
                mean = self.near_mean
            if overlaps is not None:
                j = int(np.argmax(overlaps[i]))
                q = overlaps[i, j]
                mean = (1.0 - q) * mean + q * self.class_means[instances[j].class_id - 1]
            out[i] = mean + self.noise * np.array([rng.normal() for _ in range(self.dim)])
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "class_means": self.class_means.tolist(),
            "near_mean": self.near_mean.tolist(),
            "far_mean": self.far_mean.tolist(),
            "spread_axis": self.spread_axis.tolist(),
            "noise": self.noise,
            "seed": self.seed,
            "context_factor": self.context_factor,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "FeatureModel":
        return cls(
            np.array(data["class_means"], dtype=np.float64),
            np.array(data["near_mean"], dtype=np.float64),
            np.array(data["far_mean"], dtype=np.float64),
            np.array(data["spread_axis"], dtype=np.float64),
            float(data["noise"]),
            int(data["seed"]),
            float(data.get("context_factor", 2.0)),
        )


@dataclass
class SceneBundle:
    """Everything generated for one image."""

    image_id: int
    scene: Scene
    heatmaps: dict[int, Heatmap]
    proposals: list[Box]
    proposal_kinds: list[str]
    features: np.ndarray
    image_labels: np.ndarray
    gt: list[GroundTruth]
    feature_model: FeatureModel
    proposal_sources: list[int | None] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.image_labels)

    def box_features(self, boxes: Sequence[Box], start_row: int) -> np.ndarray:
        return self.feature_model.box_features(boxes, self.scene.instances, start_row)


def _layout(cfg: SynthConfig, rng: SplitMix64) -> list[Instance]:
    n_present = rng.randint(cfg.min_present, cfg.max_present)
    classes = sorted(rng.shuffle(list(range(1, cfg.num_classes + 1)))[:n_present])

    rows, cols = cfg.grid_shape
    double_cells = rng.shuffle([(r, 2 * j) for r in range(rows) for j in range(cols // 2)])

    plan: list[tuple[int, int, bool]] = []  # (class, count, paired)
    for class_id in classes:
        count = rng.randint(cfg.min_instances, cfg.max_instances)
        paired = count >= 2 and rng.uniform() < cfg.pair_probability
        plan.append((class_id, count, paired))

    instances: list[Instance] = []
    used: set[tuple[int, int]] = set()
    n_pairs = 0
    for class_id, _, paired in plan:
        if not paired:
            continue
        r, c = double_cells[n_pairs]
        used.update({(r, c), (r, c + 1)})
        w = rng.randint(cfg.min_size, cfg.max_size)
        h = rng.randint(cfg.min_size, cfg.max_size)
        span = 2 * w + cfg.pair_gap
        half_gap = cfg.gap // 2
        x0 = c * cfg.cell + rng.randint(half_gap, 2 * cfg.cell - span - (cfg.gap - half_gap))
        y0 = r * cfg.cell + rng.randint(half_gap, cfg.cell - h - (cfg.gap - half_gap))
        instances.append(Instance(class_id, Box(x0, y0, x0 + w, y0 + h), n_pairs))
        x1 = x0 + w + cfg.pair_gap
        instances.append(Instance(class_id, Box(x1, y0, x1 + w, y0 + h), n_pairs))
        n_pairs += 1

    free = rng.shuffle([(r, c) for r in range(rows) for c in range(cols) if (r, c) not in used])
    next_cell = 0
    for class_id, count, paired in plan:
        for _ in range(count - 2 if paired else count):
            if next_cell >= len(free):
                raise ValueError("Instance overflow: no free cell left")
            r, c = free[next_cell]
            next_cell += 1
            w = rng.randint(cfg.min_size, cfg.max_size)
            h = rng.randint(cfg.min_size, cfg.max_size)
            half_gap = cfg.gap // 2
            x0 = c * cfg.cell + rng.randint(half_gap, cfg.cell - w - (cfg.gap - half_gap))
            y0 = r * cfg.cell + rng.randint(half_gap, cfg.cell - h - (cfg.gap - half_gap))
            instances.append(Instance(class_id, Box(x0, y0, x0 + w, y0 + h)))

    instances.sort(key=lambda i: (i.class_id, i.box.y1, i.box.x1))
    return instances


def plateau_falloff(
    instances: Sequence[Instance], class_id: int, xs: np.ndarray, ys: np.ndarray, cfg: SynthConfig
) -> np.ndarray:
    """Noise-free activation of one class sampled at pixel centers ``ys`` x ``xs``."""
    values = np.zeros((ys.size, xs.size))
    span = cfg.falloff_ratio - cfg.core_ratio
    for inst in instances:
        if inst.class_id != class_id:
            continue
        cx, cy = inst.box.center
        dx = np.abs(xs - cx) / (inst.box.width / 2.0)
        dy = np.abs(ys - cy) / (inst.box.height / 2.0)
        vx = np.clip((cfg.falloff_ratio - dx) / span, 0.0, 1.0)
        vy = np.clip((cfg.falloff_ratio - dy) / span, 0.0, 1.0)
        values = np.maximum(values, np.minimum(vy[:, None], vx[None, :]))
    return values


def render_heatmaps(
    scene: Scene, cfg: SynthConfig, rng: SplitMix64 | None = None
) -> dict[int, Heatmap]:
    """Normalized heatmap of every class present in ``scene``."""
    rng = rng or SplitMix64.for_stream(scene.seed, _NOISE)
    stride = cfg.cam_stride
    h_low = math.ceil(scene.height / stride)
    w_low = math.ceil(scene.width / stride)
    ys = (np.arange(h_low) + 0.5) * stride
    xs = (np.arange(w_low) + 0.5) * stride

    heatmaps = {}
    for class_id in sorted({inst.class_id for inst in scene.instances}):
        values = plateau_falloff(scene.instances, class_id, xs, ys, cfg)
        if cfg.noise > 0:
            values = values + cfg.noise * rng.uniform_array(values.size).reshape(values.shape)
        raw = RawActivationMap(values, class_id)
        heatmaps[class_id] = prepare_heatmap(raw, scene.height, scene.width)
    return heatmaps


def _clip_box(x1: float, y1: float, x2: float, y2: float, width: int, height: int) -> Box:
    return Box(max(0.0, x1), max(0.0, y1), min(float(width), x2), min(float(height), y2))


def generate_proposals(
    scene: Scene, cfg: SynthConfig, rng: SplitMix64 | None = None
) -> tuple[list[Box], list[str], list[int | None]]:
    """Jittered, part, merge and random proposals with their kinds and source instances."""
    rng = rng or SplitMix64.for_stream(scene.seed, _PROPOSALS)
    boxes: list[Box] = []
    kinds: list[str] = []
    sources: list[int | None] = []

    def jitter(v: float, size: float) -> float:
        limit = cfg.jitter_clamp * size
        return v + min(limit, max(-limit, cfg.jitter_sigma * size * rng.normal()))

    for idx, inst in enumerate(scene.instances):
        b = inst.box
        for _ in range(cfg.n_jitter):
            x1, x2 = jitter(b.x1, b.width), jitter(b.x2, b.width)
            y1, y2 = jitter(b.y1, b.height), jitter(b.y2, b.height)
            boxes.append(_clip_box(x1, y1, x2, y2, scene.width, scene.height))
            kinds.append("jitter")
            sources.append(idx)
        for _ in range(cfg.n_part):
            pw = b.width * rng.uniform(cfg.part_min, cfg.part_max)
            ph = b.height * rng.uniform(cfg.part_min, cfg.part_max)
            x1 = rng.uniform(b.x1, b.x2 - pw)
            y1 = rng.uniform(b.y1, b.y2 - ph)
            boxes.append(Box(x1, y1, x1 + pw, y1 + ph))
            kinds.append("part")
            sources.append(idx)

    pairs: dict[int, list[int]] = {}
    for idx, inst in enumerate(scene.instances):
        if inst.pair is not None:
            pairs.setdefault(inst.pair, []).append(idx)
    for pair_id in sorted(pairs):
        a, b = (scene.instances[i].box for i in pairs[pair_id])
        for _ in range(cfg.n_merge):
            boxes.append(Box(min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2)))
            kinds.append("merge")
            sources.append(pairs[pair_id][0])

    for _ in range(cfg.n_random):
        w = rng.uniform(4.0, scene.width / 2.0)
        h = rng.uniform(4.0, scene.height / 2.0)
        x1 = rng.uniform(0.0, scene.width - w)
        y1 = rng.uniform(0.0, scene.height - h)
        boxes.append(Box(x1, y1, x1 + w, y1 + h))
        kinds.append("random")
        sources.append(None)
    return boxes, kinds, sources


def scene_seeds(seed: int, count: int) -> list[int]:
    """Per-scene seeds drawn from the run seed."""
    rng = SplitMix64(seed)
    return [rng.next_u64() for _ in range(count)]


def generate_scene(cfg: SynthConfig, seed: int, image_id: int = 0) -> SceneBundle:
    """Generate one scene with heatmaps, proposals, features, labels and ground truth."""
    layout_rng = SplitMix64.for_stream(seed, _LAYOUT)
    instances = _layout(cfg, layout_rng) if cfg.max_present > 0 else []
    scene = Scene(cfg.width, cfg.height, tuple(instances), seed)
    heatmaps = render_heatmaps(scene, cfg)
    proposals, kinds, sources = generate_proposals(scene, cfg)

    feature_model = FeatureModel.from_config(cfg, seed)
    features = feature_model.box_features(proposals, scene.instances)

    logger.debug(
        f"Scene {image_id}: {len(instances)} instances, {len(proposals)} proposals, "
        f"{len(heatmaps)} heatmaps"
    )
    return SceneBundle(
        image_id=image_id,
        scene=scene,
        heatmaps=heatmaps,
        proposals=proposals,
        proposal_kinds=kinds,
        features=features,
        image_labels=scene.image_labels(cfg.num_classes),
        gt=scene.ground_truth(image_id),
        feature_model=feature_model,
        proposal_sources=sources,
    )


def generate_suite(cfg: SynthConfig, seed: int, count: int | None = None) -> list[SceneBundle]:
    count = cfg.num_scenes if count is None else count
    return [generate_scene(cfg, s, i) for i, s in enumerate(scene_seeds(seed, count))]


# Oracles. These deliberately share no labelling or clustering code with the
# heatmap and hgps modules.

_NEIGHBOURS = {
    4: ((-1, 0), (1, 0), (0, -1), (0, 1)),
    8: ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)),
}


def oracle_connected_components(
    mask: np.ndarray, connectivity: int = 8
) -> list[list[tuple[int, int]]]:
    """BFS flood fill; regions ordered by (min row, min col, first pixel), pixels raster-sorted."""
    mask = np.asarray(mask, dtype=bool)
    n_rows, n_cols = mask.shape
    seen = np.zeros_like(mask)
    regions = []
    for r in range(n_rows):
        for c in range(n_cols):
            if not mask[r, c] or seen[r, c]:
                continue
            seen[r, c] = True
            queue = deque([(r, c)])
            pixels = []
            while queue:
                pr, pc = queue.popleft()
                pixels.append((pr, pc))
                for dr, dc in _NEIGHBOURS[connectivity]:
                    nr, nc = pr + dr, pc + dc
                    if 0 <= nr < n_rows and 0 <= nc < n_cols and mask[nr, nc] and not seen[nr, nc]:
                        seen[nr, nc] = True
                        queue.append((nr, nc))
            regions.append(sorted(pixels))
    regions.sort(key=lambda px: (min(p[0] for p in px), min(p[1] for p in px), px[0]))
    return regions


def _oracle_box(pixels: list[tuple[int, int]]) -> Box:
    rows = [p[0] for p in pixels]
    cols = [p[1] for p in pixels]
    return Box(min(cols), min(rows), max(cols) + 1, max(rows) + 1)


def _oracle_between(p: Box, inner: Box, outer: Box) -> bool:
    return (
        p.x1 <= inner.x1 and p.y1 <= inner.y1 and inner.x2 <= p.x2 and inner.y2 <= p.y2
        and outer.x1 <= p.x1 and outer.y1 <= p.y1 and p.x2 <= outer.x2 and p.y2 <= outer.y2
    )


def oracle_cluster_enumeration(
    heatmaps: Mapping[int, Heatmap],
    image_labels: Sequence[int],
    proposals: Sequence[Box],
    cfg: HgpsConfig,
    image_size: tuple[int, int],
) -> ClusterSet:
    """Clusters by exhaustive predicate evaluation over every (proposal, high, low) triple."""
    by_class: dict[int, tuple[Cluster, ...]] = {}
    ordinal = 0
    for class_id in [c + 1 for c, y in enumerate(image_labels) if int(y) == 1]:
        values = heatmaps[class_id].values
        lows = oracle_connected_components(values >= cfg.tau_low, cfg.connectivity)
        highs = oracle_connected_components(values >= cfg.tau_high, cfg.connectivity)
        low_sets = [set(px) for px in lows]
        parent = {}
        for m, high in enumerate(highs):
            owners = [n for n, s in enumerate(low_sets) if set(high) <= s]
            if len(owners) != 1:
                raise InvariantViolation(f"High region {m} sits inside {len(owners)} low regions")
            parent[m] = owners[0]

        clusters = []
        for n, low in enumerate(lows):
            low_box = _oracle_box(low)
            scaled_low = scale_box(low_box, cfg.r, image_size)
            subs = [m for m in range(len(highs)) if parent[m] == n]
            triples = {
                (i, m): _oracle_between(p, _oracle_box(highs[m]), scaled_low)
                for i, p in enumerate(proposals)
                for m in subs
            }
            if len(subs) <= 1:
                synthetic = ClusterMember(MemberKind.LOW_BOX, low_box, ordinal)
                ordinal += 1
                found = tuple(
                    ClusterMember(MemberKind.PROPOSAL, p, i)
                    for i, p in enumerate(proposals)
                    if subs and triples[(i, subs[0])]
                )
                sub = subs[0] if subs else None
                clusters.append(Cluster(class_id, (synthetic, *found), n, sub))
                continue

            scaled_highs = {m: scale_box(_oracle_box(highs[m]), cfg.r, image_size) for m in subs}
            owner: dict[int, int] = {}
            for i, p in enumerate(proposals):
                best = None
                for m in subs:
                    if not triples[(i, m)]:
                        continue
                    if best is None or iou(p, scaled_highs[m]) > iou(p, scaled_highs[best]):
                        best = m
                if best is not None:
                    owner[i] = best
            for m in subs:
                synthetic = ClusterMember(MemberKind.SCALED_HIGH_BOX, scaled_highs[m], ordinal)
                ordinal += 1
                found = tuple(
                    ClusterMember(MemberKind.PROPOSAL, proposals[i], i)
                    for i in range(len(proposals))
                    if owner.get(i) == m
                )
                clusters.append(Cluster(class_id, (synthetic, *found), n, m))
        by_class[class_id] = tuple(clusters)
    return ClusterSet(num_proposals=len(proposals), by_class=by_class)


def oracle_ap(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], class_id: int, iou_thr: float = 0.5
) -> float:
    """All-points AP by explicit enumeration of every score prefix."""
    truth = [g for g in gts if g.class_id == class_id]
    if not truth:
        return 0.0
    ordered = sorted(
        [(i, d) for i, d in enumerate(dets) if d.class_id == class_id],
        key=lambda t: (-t[1].score, t[0]),
    )
    matched = [False] * len(truth)
    hits = []
    for _, det in ordered:
        best_j, best_iou = None, -1.0
        for j, g in enumerate(truth):
            if g.image_id != det.image_id:
                continue
            o = iou(det.box, g.box)
            if o > best_iou:
                best_j, best_iou = j, o
        hit = best_j is not None and best_iou >= iou_thr and not matched[best_j]
        if hit:
            matched[best_j] = True
        hits.append(hit)

    points = []
    for k in range(1, len(hits) + 1):
        tp = sum(hits[:k])
        points.append((tp / len(truth), tp / k))
    ap = 0.0
    prev_recall = 0.0
    for k, (recall, _) in enumerate(points):
        best_precision = max(p for _, p in points[k:])
        ap += (recall - prev_recall) * best_precision
        prev_recall = recall
    return ap


def bundle_dict(bundle: SceneBundle) -> dict[str, Any]:
    return {
        "image_id": bundle.image_id,
        "scene": bundle.scene.to_dict(),
        "gt": [{"class_id": g.class_id, "box": g.box.to_list()} for g in bundle.gt],
        "proposals": [p.to_list() for p in bundle.proposals],
        "proposal_kinds": bundle.proposal_kinds,
        "proposal_sources": bundle.proposal_sources,
        "labels": [int(v) for v in bundle.image_labels],
        "features": bundle.features.tolist(),
        "feature_model": bundle.feature_model.to_dict(),
    }


def bundle_name(image_id: int) -> str:
    return f"scene_{image_id:04d}"


async def write_bundle(bundle: SceneBundle, out_dir: str | Path) -> Path:
    """Write ``bundle.json`` plus one heatmap grid per present class."""
    path = Path(out_dir) / bundle_name(bundle.image_id)
    path.mkdir(parents=True, exist_ok=True)
    async with aiofiles.open(path / "bundle.json", "w", encoding="utf-8") as f:
        await f.write(json.dumps(bundle_dict(bundle), indent=1))
    for class_id, hm in sorted(bundle.heatmaps.items()):
        async with aiofiles.open(path / f"heatmap_c{class_id}.txt", "w", encoding="utf-8") as f:
            await f.write(format_grid(hm.values))
    return path


async def read_proposals(path: str | Path) -> list[Box]:
    """Proposals from a JSON list of ``[x1, y1, x2, y2]`` or a bundle's ``proposals`` key."""
    path = Path(path)
    if not path.exists():
        raise BadInputError(f"Proposal file does not exist: {path}")
    async with aiofiles.open(path, encoding="utf-8") as f:
        data = json.loads(await f.read())
    if isinstance(data, dict):
        data = data.get("proposals", [])
    try:
        return [Box.from_sequence(p) for p in data]
    except (ValueError, TypeError) as e:
        raise BadInputError(f"Malformed proposals in {path}: {e}") from e


async def read_bundle(path: str | Path) -> SceneBundle:
    """Read a bundle directory written by ``write_bundle``."""
    path = Path(path)
    meta_path = path / "bundle.json"
    if not meta_path.exists():
        raise BadInputError(f"Not a scene bundle: {path}")
    async with aiofiles.open(meta_path, encoding="utf-8") as f:
        data = json.loads(await f.read())

    try:
        scene = Scene.from_dict(data["scene"])
        labels = np.array(data["labels"], dtype=np.int64)
        heatmaps = {}
        for class_id in [c + 1 for c, y in enumerate(labels) if y == 1]:
            raw = await read_activation_map(path / f"heatmap_c{class_id}.txt", class_id)
            heatmaps[class_id] = normalize(raw)
        proposals = [Box.from_sequence(p) for p in data["proposals"]]
        features = np.array(data["features"], dtype=np.float64)
        feature_model = FeatureModel.from_dict(data["feature_model"])
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, BadInputError):
            raise
        raise BadInputError(f"Malformed bundle {path}: {e}") from e

    if features.size == 0:
        features = features.reshape(0, feature_model.dim)
    image_id = int(data["image_id"])
    return SceneBundle(
        image_id=image_id,
        scene=scene,
        heatmaps=heatmaps,
        proposals=proposals,
        proposal_kinds=list(data.get("proposal_kinds", [])),
        features=features,
        image_labels=labels,
        gt=[GroundTruth(image_id, g["class_id"], Box.from_sequence(g["box"])) for g in data["gt"]],
        feature_model=feature_model,
        proposal_sources=list(data.get("proposal_sources", [])),
    )


async def read_suite(root: str | Path) -> list[SceneBundle]:
    """Every bundle under ``root`` in manifest (or name) order."""
    root = Path(root)
    if not root.is_dir():
        raise BadInputError(f"Scene directory does not exist: {root}")
    manifest = root / "manifest.json"
    if manifest.exists():
        async with aiofiles.open(manifest, encoding="utf-8") as f:
            names = json.loads(await f.read())["scenes"]
    else:
        names = sorted(p.name for p in root.iterdir() if (p / "bundle.json").exists())
    return [await read_bundle(root / name) for name in names]
