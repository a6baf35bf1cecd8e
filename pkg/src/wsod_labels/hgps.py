"""Heatmap-guided proposal selection.

Pseudo ground-truth clusters are built from two thresholds on each present
class's heatmap: proposals that lie between a high-threshold box and the
r-scaled low-threshold box of the region it is subordinate to form a cluster.
Each refinement stage then picks its top-scoring member per cluster, while the
base stage takes every member.
"""

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np

from .errors import BadInputError, InvariantViolation
from .geometry import Box, contains, iou, iou_matrix, scale_box
from .heatmap import Heatmap, Level, subordinate, threshold_regions

logger = logging.getLogger(__name__)

IGNORED = -1


@dataclass(frozen=True)
class HgpsConfig:
    """Thresholds and stage count for proposal selection."""

    tau_high: float = 0.8
    tau_low: float = 0.3
    r: float = 1.2
    tau_iou1: float = 0.5
    tau_iou2: float = 0.1
    stages: int = 3
    connectivity: int = 8
    first_stage_weight: str = "s"  # "s": weight from s^(0); "ws": from ws^(0)

    def __post_init__(self):
        if not 0 < self.tau_low < self.tau_high <= 1:
            raise ValueError(
                f"Need 0 < tau_low < tau_high <= 1, got {self.tau_low}, {self.tau_high}"
            )
        if self.r < 1:
            raise ValueError(f"Scale factor r must be >= 1, got {self.r}")
        if not 0 < self.tau_iou2 < self.tau_iou1 < 1:
            raise ValueError(
                f"Need 0 < tau_iou2 < tau_iou1 < 1, got {self.tau_iou2}, {self.tau_iou1}"
            )
        if self.stages < 1:
            raise ValueError(f"Need at least one refinement stage, got {self.stages}")
        if self.connectivity not in (4, 8):
            raise ValueError(f"Connectivity must be 4 or 8, got {self.connectivity}")
        if self.first_stage_weight not in ("s", "ws"):
            raise ValueError(
                f"first_stage_weight must be 's' or 'ws', got {self.first_stage_weight}"
            )


class MemberKind(str, Enum):
    PROPOSAL = "proposal"
    LOW_BOX = "low_box"
    SCALED_HIGH_BOX = "scaled_high_box"


@dataclass(frozen=True)
class ClusterMember:
    """A cluster box; ``index`` is the proposal index or the synthetic-box ordinal."""

    kind: MemberKind
    box: Box
    index: int

    @property
    def is_synthetic(self) -> bool:
        return self.kind != MemberKind.PROPOSAL


@dataclass(frozen=True)
class Cluster:
    """Candidate pseudo ground-truth boxes for one object of class ``class_id``."""

    class_id: int
    members: tuple[ClusterMember, ...]
    low_region: int
    high_region: int | None = None

    def __post_init__(self):
        if not self.members:
            raise InvariantViolation(f"Empty cluster for class {self.class_id}")
        synthetic = sum(1 for m in self.members if m.is_synthetic)
        if synthetic != 1:
            raise InvariantViolation(
                f"Cluster for class {self.class_id} has {synthetic} synthetic members"
            )

    def proposal_indices(self) -> list[int]:
        return [m.index for m in self.members if not m.is_synthetic]


@dataclass(frozen=True)
class ClusterSet:
    """Per-class cluster lists over an image with ``num_proposals`` raw proposals.

    Synthetic members are scored as extra rows appended after the raw
    proposals, in ordinal order.
    """

    num_proposals: int
    by_class: dict[int, tuple[Cluster, ...]] = field(default_factory=dict)

    def __iter__(self):
        for class_id in sorted(self.by_class):
            yield from self.by_class[class_id]

    def __len__(self) -> int:
        return sum(len(v) for v in self.by_class.values())

    def synthetic_boxes(self) -> list[Box]:
        synthetic = (m for c in self for m in c.members if m.is_synthetic)
        members = sorted(synthetic, key=lambda m: m.index)
        return [m.box for m in members]

    @property
    def num_rows(self) -> int:
        return self.num_proposals + len(self.synthetic_boxes())

    def row_of(self, member: ClusterMember) -> int:
        """Score-matrix row of a member."""
        if member.is_synthetic:
            return self.num_proposals + member.index
        return member.index

    def scoring_boxes(self, proposals: Sequence[Box]) -> list[Box]:
        """Raw proposals followed by synthetic cluster boxes."""
        if len(proposals) != self.num_proposals:
            raise BadInputError(
                f"Cluster set built for {self.num_proposals} proposals, got {len(proposals)}"
            )
        return list(proposals) + self.synthetic_boxes()

    def to_dict(self) -> dict[str, Any]:
        return {
            "num_proposals": self.num_proposals,
            "classes": {
                str(class_id): [
                    {
                        "low_region": cluster.low_region,
                        "high_region": cluster.high_region,
                        "members": [
                            {"kind": m.kind.value, "index": m.index, "box": m.box.to_list()}
                            for m in cluster.members
                        ],
                    }
                    for cluster in clusters
                ]
                for class_id, clusters in sorted(self.by_class.items())
            },
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ClusterSet":
        by_class = {}
        for key, clusters in data["classes"].items():
            class_id = int(key)
            by_class[class_id] = tuple(
                Cluster(
                    class_id=class_id,
                    members=tuple(
                        ClusterMember(
                            MemberKind(m["kind"]), Box.from_sequence(m["box"]), m["index"]
                        )
                        for m in cluster["members"]
                    ),
                    low_region=cluster["low_region"],
                    high_region=cluster["high_region"],
                )
                for cluster in clusters
            )
        return cls(num_proposals=data["num_proposals"], by_class=by_class)


@dataclass(frozen=True)
class PseudoGt:
    box: Box
    weight: float
    class_id: int


@dataclass(frozen=True)
class PseudoGtSet:
    """Pseudo ground truths for one stage; ``stage`` is 0 for the base stage."""

    entries: tuple[PseudoGt, ...] = ()
    stage: int = 0
    source: str = "hgps"

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def boxes(self) -> list[Box]:
        return [e.box for e in self.entries]


@dataclass(frozen=True)
class AssignedLabels:
    """Per-row label (1..C, background C+1 or ``IGNORED``), loss weight and best IoU."""

    labels: np.ndarray
    weights: np.ndarray
    best_iou: np.ndarray
    num_classes: int

    @property
    def background(self) -> int:
        return self.num_classes + 1

    @property
    def ignored(self) -> np.ndarray:
        return self.labels == IGNORED

    @property
    def num_rows(self) -> int:
        return len(self.labels)

    def counts(self) -> dict[str, int]:
        return {
            "foreground": int(np.sum((self.labels >= 1) & (self.labels <= self.num_classes))),
            "background": int(np.sum(self.labels == self.background)),
            "ignored": int(np.sum(self.ignored)),
        }


def _active_classes(image_labels: Sequence[int]) -> list[int]:
    return [c + 1 for c, y in enumerate(image_labels) if int(y) == 1]


def _between(proposal: Box, inner: Box, outer: Box) -> bool:
    return contains(proposal, inner) and contains(outer, proposal)


def build_clusters(
    heatmaps: Mapping[int, Heatmap],
    image_labels: Sequence[int],
    proposals: Sequence[Box],
    cfg: HgpsConfig,
    image_size: tuple[int, int] | None = None,
) -> ClusterSet:
    """Build pseudo ground-truth clusters for every present class.

    Args:
        heatmaps: normalized heatmap per class id (1-based), at image resolution
        image_labels: C-vector of {0, 1}
        proposals: raw proposals of the image
        cfg: thresholds and scale factor
        image_size: ``(W, H)``; taken from the heatmaps when omitted
    """
    active = _active_classes(image_labels)
    if image_size is None and active:
        first = heatmaps.get(active[0])
        if first is not None:
            image_size = (first.width, first.height)

    by_class: dict[int, tuple[Cluster, ...]] = {}
    next_synthetic = 0
    for class_id in active:
        hm = heatmaps.get(class_id)
        if hm is None:
            raise BadInputError(f"Missing heatmap for present class {class_id}")
        if (hm.width, hm.height) != tuple(image_size):
            raise BadInputError(
                f"Heatmap for class {class_id} is {hm.width}x{hm.height}, "
                f"image is {image_size[0]}x{image_size[1]}"
            )

        clusters, next_synthetic = _clusters_for_class(
            hm, class_id, proposals, cfg, image_size, next_synthetic
        )
        by_class[class_id] = tuple(clusters)
        logger.debug(f"Built {len(clusters)} clusters for class {class_id}")

    return ClusterSet(num_proposals=len(proposals), by_class=by_class)


def _clusters_for_class(
    hm: Heatmap,
    class_id: int,
    proposals: Sequence[Box],
    cfg: HgpsConfig,
    bounds: tuple[int, int],
    next_synthetic: int,
) -> tuple[list[Cluster], int]:
    lows = threshold_regions(hm, cfg.tau_low, Level.LOW, cfg.connectivity)
    highs = threshold_regions(hm, cfg.tau_high, Level.HIGH, cfg.connectivity)
    owner = subordinate(highs, lows)

    clusters: list[Cluster] = []
    for low in lows:
        scaled_low = scale_box(low.box, cfg.r, bounds)
        high_ids = owner.highs_of(low.region_id)

        if not high_ids:
            member = ClusterMember(MemberKind.LOW_BOX, low.box, next_synthetic)
            next_synthetic += 1
            clusters.append(Cluster(class_id, (member,), low.region_id))
            continue

        if len(high_ids) == 1:
            high = highs[high_ids[0]]
            _check_between(low.box, high.box, scaled_low, class_id)
            synthetic = ClusterMember(MemberKind.LOW_BOX, low.box, next_synthetic)
            next_synthetic += 1
            found = [
                ClusterMember(MemberKind.PROPOSAL, p, i)
                for i, p in enumerate(proposals)
                if _between(p, high.box, scaled_low)
            ]
            clusters.append(Cluster(class_id, (synthetic, *found), low.region_id, high.region_id))
            continue

        scaled_highs = [scale_box(highs[h].box, cfg.r, bounds) for h in high_ids]
        candidates: list[list[int]] = [[] for _ in high_ids]
        for i, p in enumerate(proposals):
            qualifying = [
                m for m, h in enumerate(high_ids) if _between(p, highs[h].box, scaled_low)
            ]
            if not qualifying:
                continue
            # Keep a multi-qualifying proposal only where its scaled-high IoU is largest.
            best = max(qualifying, key=lambda m: (iou(p, scaled_highs[m]), -m))
            candidates[best].append(i)

        for m, h in enumerate(high_ids):
            _check_between(scaled_highs[m], highs[h].box, scaled_low, class_id)
            synthetic = ClusterMember(MemberKind.SCALED_HIGH_BOX, scaled_highs[m], next_synthetic)
            next_synthetic += 1
            found = [ClusterMember(MemberKind.PROPOSAL, proposals[i], i) for i in candidates[m]]
            clusters.append(Cluster(class_id, (synthetic, *found), low.region_id, h))

    return clusters, next_synthetic


def _check_between(box: Box, inner: Box, outer: Box, class_id: int):
    if not _between(box, inner, outer):
        raise InvariantViolation(
            f"Synthetic box {box.to_list()} for class {class_id} is not between "
            f"{inner.to_list()} and {outer.to_list()}"
        )


def select_pseudo_gt_ir(
    clusters: ClusterSet,
    prev_scores: np.ndarray,
    k: int,
    cfg: HgpsConfig | None = None,
    weight_scores: np.ndarray | None = None,
) -> PseudoGtSet:
    """Top-scoring member per cluster as the pseudo ground truth for stage ``k``.

    ``prev_scores`` is the argmax source (``ws^(0)`` for k=1, else ``s^(k-1)``);
    ``weight_scores`` supplies the emitted confidence and defaults to
    ``prev_scores``. Ties go to the lowest member position.
    """
    cfg = cfg or HgpsConfig()
    if not 1 <= k <= cfg.stages:
        raise ValueError(f"Stage index must be in 1..{cfg.stages}, got {k}")
    weight_scores = prev_scores if weight_scores is None else weight_scores
    _check_score_rows(clusters, prev_scores)
    _check_score_rows(clusters, weight_scores)

    entries = []
    for cluster in clusters:
        col = cluster.class_id - 1
        rows = [clusters.row_of(m) for m in cluster.members]
        best = int(np.argmax(prev_scores[rows, col]))
        member = cluster.members[best]
        entries.append(
            PseudoGt(member.box, float(weight_scores[rows[best], col]), cluster.class_id)
        )
    return PseudoGtSet(tuple(entries), stage=k)


def _check_score_rows(clusters: ClusterSet, scores: np.ndarray):
    if scores.ndim != 2 or scores.shape[0] < clusters.num_rows:
        raise BadInputError(
            f"Score matrix {scores.shape} does not cover {clusters.num_rows} cluster rows"
        )
    max_class = max(clusters.by_class, default=0)
    if scores.shape[1] < max_class:
        raise BadInputError(f"Score matrix has {scores.shape[1]} columns, need {max_class}")


def select_pseudo_gt_wsbdn(clusters: ClusterSet) -> PseudoGtSet:
    """Every member of every cluster becomes a unit-weight pseudo ground truth."""
    entries = tuple(
        PseudoGt(member.box, 1.0, cluster.class_id)
        for cluster in clusters
        for member in cluster.members
    )
    return PseudoGtSet(entries, stage=0)


def select_top_scoring(
    boxes: Sequence[Box],
    image_labels: Sequence[int],
    prev_scores: np.ndarray,
    k: int,
    weight_scores: np.ndarray | None = None,
) -> PseudoGtSet:
    """Global top-scoring box per present class over all rows."""
    weight_scores = prev_scores if weight_scores is None else weight_scores
    if prev_scores.shape[0] != len(boxes):
        raise BadInputError(f"{prev_scores.shape[0]} score rows for {len(boxes)} boxes")
    entries = []
    for class_id in _active_classes(image_labels):
        row = int(np.argmax(prev_scores[:, class_id - 1]))
        entries.append(PseudoGt(boxes[row], float(weight_scores[row, class_id - 1]), class_id))
    return PseudoGtSet(tuple(entries), stage=k, source="top_scoring")


def select_single_threshold(
    heatmaps: Mapping[int, Heatmap],
    image_labels: Sequence[int],
    tau: float,
    connectivity: int = 8,
) -> PseudoGtSet:
    """Every threshold box at one threshold, taken directly as a pseudo ground truth."""
    entries = []
    for class_id in _active_classes(image_labels):
        hm = heatmaps.get(class_id)
        if hm is None:
            raise BadInputError(f"Missing heatmap for present class {class_id}")
        for region in threshold_regions(hm, tau, Level.LOW, connectivity):
            entries.append(PseudoGt(region.box, 1.0, class_id))
    return PseudoGtSet(tuple(entries), stage=0, source="single_threshold")


def assign_labels(
    proposals: Sequence[Box],
    gts: PseudoGtSet,
    cfg: HgpsConfig,
    num_classes: int,
) -> AssignedLabels:
    """Label every proposal from its best-overlapping pseudo ground truth."""
    n = len(proposals)
    if len(gts) == 0:
        if n:
            logger.warning("No pseudo ground truths; every proposal is ignored")
        return AssignedLabels(
            labels=np.full(n, IGNORED, dtype=np.int64),
            weights=np.zeros(n),
            best_iou=np.zeros(n),
            num_classes=num_classes,
        )

    overlaps = iou_matrix(proposals, gts.boxes())
    best_gt = np.argmax(overlaps, axis=1)
    best_iou = overlaps[np.arange(n), best_gt]
    gt_classes = np.array([e.class_id for e in gts], dtype=np.int64)
    gt_weights = np.array([e.weight for e in gts], dtype=np.float64)

    labels = np.where(best_iou >= cfg.tau_iou1, gt_classes[best_gt], num_classes + 1)
    labels = np.where(best_iou < cfg.tau_iou2, IGNORED, labels).astype(np.int64)
    weights = np.where(labels == IGNORED, 0.0, gt_weights[best_gt])
    return AssignedLabels(
        labels=labels, weights=weights, best_iou=best_iou, num_classes=num_classes
    )
