"""VOC-protocol detection metrics and pseudo ground-truth diagnostics."""

import csv
import io
import logging
from collections import defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import aiofiles
import numpy as np

from .errors import BadInputError
from .geometry import Box, contains, iou, iou_matrix
from .hgps import PseudoGtSet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Detection:
    image_id: int
    class_id: int
    box: Box
    score: float

    def __post_init__(self):
        object.__setattr__(self, "score", float(self.score))
        if not np.isfinite(self.score):
            raise ValueError(f"Detection score must be finite, got {self.score}")


@dataclass(frozen=True)
class GroundTruth:
    image_id: int
    class_id: int
    box: Box


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    use_07_metric: bool = False

    def __post_init__(self):
        if not 0 < self.iou_threshold <= 1:
            raise ValueError(f"IoU threshold must be in (0, 1], got {self.iou_threshold}")


def _sorted_by_score(dets: Iterable[Detection]) -> list[Detection]:
    # Stable: equal scores keep input order.
    return sorted(dets, key=lambda d: -d.score)


def match_detections(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], class_id: int, iou_thr: float = 0.5
) -> tuple[np.ndarray, int]:
    """Greedy VOC matching for one class.

    Returns the true-positive flags of the class's detections in descending
    score order and the number of ground truths of the class.
    """
    by_image: dict[int, list[Box]] = defaultdict(list)
    for g in gts:
        if g.class_id == class_id:
            by_image[g.image_id].append(g.box)
    used = {image_id: np.zeros(len(boxes), dtype=bool) for image_id, boxes in by_image.items()}
    n_gt = sum(len(boxes) for boxes in by_image.values())

    ordered = _sorted_by_score(d for d in dets if d.class_id == class_id)
    tp = np.zeros(len(ordered), dtype=bool)
    for i, det in enumerate(ordered):
        boxes = by_image.get(det.image_id)
        if not boxes:
            continue
        overlaps = iou_matrix([det.box], boxes)[0]
        best = int(np.argmax(overlaps))
        if overlaps[best] >= iou_thr and not used[det.image_id][best]:
            used[det.image_id][best] = True
            tp[i] = True
    return tp, n_gt


def voc_ap(recall: np.ndarray, precision: np.ndarray, use_07_metric: bool = False) -> float:
    """Area under a precision/recall curve."""
    if use_07_metric:
        ap = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            above = precision[recall >= t]
            ap += (float(above.max()) if above.size else 0.0) / 11.0
        return ap

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    # Precision envelope, right to left.
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    changed = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def average_precision(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    class_id: int,
    iou_thr: float = 0.5,
    use_07_metric: bool = False,
) -> float:
    """VOC AP of one class; 0 when the class has no ground truth."""
    tp, n_gt = match_detections(dets, gts, class_id, iou_thr)
    if n_gt == 0:
        return 0.0
    if tp.size == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    return voc_ap(recall, precision, use_07_metric)


def per_class_ap(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    num_classes: int,
    cfg: EvalConfig | None = None,
) -> dict[int, float]:
    """AP for every class 1..C that has at least one ground truth."""
    cfg = cfg or EvalConfig()
    present = {g.class_id for g in gts}
    return {
        c: average_precision(dets, gts, c, cfg.iou_threshold, cfg.use_07_metric)
        for c in range(1, num_classes + 1)
        if c in present
    }


def mean_ap(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    num_classes: int,
    cfg: EvalConfig | None = None,
) -> float:
    """Mean AP over classes with at least one ground truth."""
    aps = per_class_ap(dets, gts, num_classes, cfg)
    if not aps:
        return 0.0
    return float(np.mean(list(aps.values())))


def top1_per_image_class(dets: Sequence[Detection]) -> list[Detection]:
    """Highest-scoring detection of every (image, class) pair; ties keep input order."""
    best: dict[tuple[int, int], Detection] = {}
    for det in _sorted_by_score(dets):
        best.setdefault((det.image_id, det.class_id), det)
    return [best[key] for key in sorted(best)]


@dataclass(frozen=True)
class CorLocReport:
    per_class: dict[int, float]

    @property
    def mean(self) -> float:
        if not self.per_class:
            return 0.0
        return float(np.mean(list(self.per_class.values())))


def corloc(
    top1_dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thr: float = 0.5
) -> CorLocReport:
    """Fraction of positive images whose top box hits a ground truth of its class.

    A positive (image, class) pair with no candidate box counts as a miss.
    """
    gt_boxes: dict[tuple[int, int], list[Box]] = defaultdict(list)
    for g in gts:
        gt_boxes[(g.image_id, g.class_id)].append(g.box)
    candidates = {(d.image_id, d.class_id): d.box for d in top1_per_image_class(top1_dets)}

    hits: dict[int, list[bool]] = defaultdict(list)
    for (image_id, class_id), boxes in sorted(gt_boxes.items()):
        box = candidates.get((image_id, class_id))
        hits[class_id].append(box is not None and any(iou(box, g) >= iou_thr for g in boxes))
    return CorLocReport({c: float(np.mean(h)) for c, h in sorted(hits.items())})


@dataclass
class ClassQuality:
    """Pseudo ground-truth diagnostics for one class, as sums so images can be pooled."""

    num_instances: int = 0
    num_recalled: int = 0
    sum_best_iou: float = 0.0
    num_pseudo: int = 0
    merge_count: int = 0
    part_only_count: int = 0

    @property
    def recall(self) -> float:
        return self.num_recalled / self.num_instances if self.num_instances else 0.0

    @property
    def mean_best_iou(self) -> float:
        return self.sum_best_iou / self.num_instances if self.num_instances else 0.0

    def add(self, other: "ClassQuality"):
        self.num_instances += other.num_instances
        self.num_recalled += other.num_recalled
        self.sum_best_iou += other.sum_best_iou
        self.num_pseudo += other.num_pseudo
        self.merge_count += other.merge_count
        self.part_only_count += other.part_only_count

    def to_dict(self) -> dict[str, Any]:
        return {
            "instances": self.num_instances,
            "pseudo_gts": self.num_pseudo,
            "recall": self.recall,
            "mean_best_iou": self.mean_best_iou,
            "merge_count": self.merge_count,
            "part_only_count": self.part_only_count,
        }


@dataclass
class QualityReport:
    per_class: dict[int, ClassQuality] = field(default_factory=dict)

    @property
    def totals(self) -> ClassQuality:
        total = ClassQuality()
        for q in self.per_class.values():
            total.add(q)
        return total

    @property
    def recall(self) -> float:
        return self.totals.recall

    @property
    def merge_count(self) -> int:
        return self.totals.merge_count

    @property
    def part_only_count(self) -> int:
        return self.totals.part_only_count

    def merge(self, other: "QualityReport"):
        for class_id, q in other.per_class.items():
            self.per_class.setdefault(class_id, ClassQuality()).add(q)

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_class": {str(c): q.to_dict() for c, q in sorted(self.per_class.items())},
            "overall": self.totals.to_dict(),
        }


def pseudo_gt_quality(
    pseudo: PseudoGtSet,
    true_gts: Sequence[GroundTruth],
    recall_iou: float = 0.5,
    merge_iou: float = 0.3,
) -> QualityReport:
    """Diagnose one image's pseudo ground truths against its true boxes."""
    classes = sorted({g.class_id for g in true_gts} | {e.class_id for e in pseudo})
    report = QualityReport()
    for class_id in classes:
        truth = [g.box for g in true_gts if g.class_id == class_id]
        boxes = [e.box for e in pseudo if e.class_id == class_id]
        q = ClassQuality(num_instances=len(truth), num_pseudo=len(boxes))
        overlaps = iou_matrix(boxes, truth)  # pseudo x true
        if truth and boxes:
            best = overlaps.max(axis=0)
            q.num_recalled = int(np.sum(best >= recall_iou))
            q.sum_best_iou = float(best.sum())
            q.merge_count = int(np.sum(np.sum(overlaps >= merge_iou, axis=1) >= 2))
            q.part_only_count = sum(
                1
                for i, p in enumerate(boxes)
                if any(contains(t, p) and overlaps[i, j] < recall_iou for j, t in enumerate(truth))
            )
        report.per_class[class_id] = q
    return report


def aggregate_quality(reports: Iterable[QualityReport]) -> QualityReport:
    total = QualityReport()
    for report in reports:
        total.merge(report)
    return total


def evaluate_detections(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    num_classes: int,
    cfg: EvalConfig | None = None,
) -> dict[str, Any]:
    """Per-class AP, mAP and CorLoc as a JSON-ready dict."""
    cfg = cfg or EvalConfig()
    aps = per_class_ap(dets, gts, num_classes, cfg)
    loc = corloc(top1_per_image_class(dets), gts, cfg.iou_threshold)
    return {
        "ap": {str(c): ap for c, ap in sorted(aps.items())},
        "map": float(np.mean(list(aps.values()))) if aps else 0.0,
        "corloc": {str(c): v for c, v in loc.per_class.items()},
        "mcorloc": loc.mean,
        "metric": "voc07_11point" if cfg.use_07_metric else "all_points",
    }


def _parse_rows(text: str, source: str, with_score: bool) -> list[list[str]]:
    rows = []
    for row in csv.reader(io.StringIO(text)):
        if not row or not "".join(row).strip():
            continue
        if row[0].strip() == "image_id":
            continue
        expected = (7,) if with_score else (6, 7)
        if len(row) not in expected:
            raise BadInputError(f"{source}: expected {expected[0]} columns, got {len(row)}: {row}")
        rows.append([v.strip() for v in row])
    return rows


def parse_detections(text: str, source: str = "<detections>") -> list[Detection]:
    """Parse ``image_id,class_id,x1,y1,x2,y2,score`` rows."""
    try:
        return [
            Detection(int(r[0]), int(r[1]), Box.from_sequence(r[2:6]), float(r[6]))
            for r in _parse_rows(text, source, with_score=True)
        ]
    except ValueError as e:
        raise BadInputError(f"{source}: {e}") from e


def parse_ground_truth(text: str, source: str = "<ground truth>") -> list[GroundTruth]:
    """Parse ``image_id,class_id,x1,y1,x2,y2`` rows; a trailing score column is ignored."""
    try:
        return [
            GroundTruth(int(r[0]), int(r[1]), Box.from_sequence(r[2:6]))
            for r in _parse_rows(text, source, with_score=False)
        ]
    except ValueError as e:
        raise BadInputError(f"{source}: {e}") from e


def format_detections(dets: Iterable[Detection]) -> str:
    lines = ["image_id,class_id,x1,y1,x2,y2,score"]
    for d in dets:
        coords = ",".join(repr(v) for v in d.box.to_list())
        lines.append(f"{d.image_id},{d.class_id},{coords},{d.score!r}")
    return "\n".join(lines) + "\n"


def format_ground_truth(gts: Iterable[GroundTruth]) -> str:
    lines = ["image_id,class_id,x1,y1,x2,y2"]
    for g in gts:
        coords = ",".join(repr(v) for v in g.box.to_list())
        lines.append(f"{g.image_id},{g.class_id},{coords}")
    return "\n".join(lines) + "\n"


async def _read_text(path: str | Path) -> str:
    path = Path(path)
    if not path.exists():
        raise BadInputError(f"File does not exist: {path}")
    async with aiofiles.open(path, encoding="utf-8") as f:
        return await f.read()


async def read_detections(path: str | Path) -> list[Detection]:
    return parse_detections(await _read_text(path), str(path))


async def read_ground_truth(path: str | Path) -> list[GroundTruth]:
    return parse_ground_truth(await _read_text(path), str(path))
