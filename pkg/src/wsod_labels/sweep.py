"""Threshold and scale sensitivity of pseudo ground-truth quality on synthetic suites."""

import asyncio
import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass, replace
from typing import Any

import numpy as np

from .evalmetrics import QualityReport, aggregate_quality, pseudo_gt_quality
from .heatmap import box_mean_scores
from .hgps import HgpsConfig, PseudoGtSet, build_clusters, select_pseudo_gt_ir
from .synth import SceneBundle

logger = logging.getLogger(__name__)

DEFAULT_LOWS = (0.2, 0.3, 0.4)
DEFAULT_HIGHS = (0.7, 0.8, 0.9)
DEFAULT_SCALES = (1.1, 1.2, 1.3)
# Recall at the default setting may trail the best setting by at most this much.
RECALL_SLACK = 0.02


def heatmap_proxy_scores(bundle: SceneBundle, boxes: Sequence) -> np.ndarray:
    """Score matrix whose class columns are mean heatmap values inside each box.

    A mean favors the tightest member around the peak, which for an adjacent
    pair is the scaled high box of each instance.
    """
    scores = np.zeros((len(boxes), bundle.num_classes + 1))
    for class_id, hm in bundle.heatmaps.items():
        scores[:, class_id - 1] = box_mean_scores(hm, list(boxes))
    return scores


def select_with_heatmap_scores(bundle: SceneBundle, cfg: HgpsConfig) -> PseudoGtSet:
    """First-stage pseudo ground truths, ranking cluster members by heatmap score."""
    size = (bundle.scene.width, bundle.scene.height)
    clusters = build_clusters(bundle.heatmaps, bundle.image_labels, bundle.proposals, cfg, size)
    scores = heatmap_proxy_scores(bundle, clusters.scoring_boxes(bundle.proposals))
    return select_pseudo_gt_ir(clusters, scores, 1, cfg)


def quality_for(bundles: Sequence[SceneBundle], cfg: HgpsConfig) -> QualityReport:
    return aggregate_quality(
        pseudo_gt_quality(select_with_heatmap_scores(b, cfg), b.gt) for b in bundles
    )


@dataclass(frozen=True)
class SweepRow:
    tau_low: float
    tau_high: float
    r: float
    instances: int
    recall: float
    mean_best_iou: float
    merge_count: int
    part_only_count: int


@dataclass(frozen=True)
class SweepResult:
    rows: list[SweepRow]
    default: SweepRow
    best_recall: float

    @property
    def default_ok(self) -> bool:
        return self.default.recall >= self.best_recall - RECALL_SLACK

    def to_dict(self) -> dict[str, Any]:
        return {
            "rows": [asdict(r) for r in self.rows],
            "default": asdict(self.default),
            "best_recall": self.best_recall,
            "default_ok": self.default_ok,
        }


async def threshold_sweep(
    bundles: Sequence[SceneBundle],
    base: HgpsConfig,
    lows: Sequence[float] = DEFAULT_LOWS,
    highs: Sequence[float] = DEFAULT_HIGHS,
    scales: Sequence[float] = DEFAULT_SCALES,
    max_concurrency: int = 4,
) -> SweepResult:
    """Quality over a (tau_low, tau_high) grid at ``base.r``.

    Also sweeps r at ``base``'s thresholds.
    """
    settings = [replace(base, tau_low=lo, tau_high=hi) for lo in lows for hi in highs if lo < hi]
    settings += [replace(base, r=r) for r in scales if r != base.r]
    if base not in settings:
        settings.append(base)

    semaphore = asyncio.Semaphore(max_concurrency)

    async def run_with_semaphore(cfg: HgpsConfig) -> QualityReport:
        async with semaphore:
            return await asyncio.to_thread(quality_for, bundles, cfg)

    reports = await asyncio.gather(*(run_with_semaphore(cfg) for cfg in settings))

    rows = []
    for cfg, report in zip(settings, reports, strict=True):
        totals = report.totals
        rows.append(
            SweepRow(
                cfg.tau_low,
                cfg.tau_high,
                cfg.r,
                totals.num_instances,
                totals.recall,
                totals.mean_best_iou,
                totals.merge_count,
                totals.part_only_count,
            )
        )
    default = rows[settings.index(base)]
    grid = [row for row, cfg in zip(rows, settings, strict=True) if cfg.r == base.r]
    best = max(row.recall for row in grid)
    logger.info(f"Sweep: default recall {default.recall:.3f}, best {best:.3f}")
    return SweepResult(rows, default, best)


def format_table(result: SweepResult) -> str:
    lines = ["tau_low  tau_high  r     recall  mean_iou  merges  parts"]
    for row in result.rows:
        lines.append(
            f"{row.tau_low:<8.2f} {row.tau_high:<9.2f} {row.r:<5.2f} {row.recall:<7.3f} "
            f"{row.mean_best_iou:<9.3f} {row.merge_count:<7d} {row.part_only_count:d}"
        )
    status = "ok" if result.default_ok else "FAIL"
    lines.append(
        f"default recall {result.default.recall:.3f}, best {result.best_recall:.3f}: {status}"
    )
    return "\n".join(lines) + "\n"
