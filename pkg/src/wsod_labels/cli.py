"""Command-line entry point: synthetic data, clustering, toy training, evaluation and sweeps."""

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Any

import aiofiles
import numpy as np

from .config import RunConfig, apply_overrides, load_config
from .errors import EXIT_BAD_INPUT, EXIT_INVARIANT, EXIT_OK, BadInputError, InvariantViolation
from .evalmetrics import (
    aggregate_quality,
    evaluate_detections,
    pseudo_gt_quality,
    read_detections,
    read_ground_truth,
)
from .heatmap import Heatmap, normalize, read_activation_map
from .hgps import PseudoGtSet, PseudoGt, build_clusters
from .midn import save_checkpoint
from .overlay import render_overlay, write_ppm
from .sweep import format_table, threshold_sweep
from .synth import (
    PRNG_ALGORITHM,
    SceneBundle,
    bundle_name,
    generate_suite,
    read_proposals,
    read_suite,
    read_bundle,
    scene_seeds,
    write_bundle,
)
from .trainer import PRESETS, ToyTrainer, curve_csv

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)
logger = logging.getLogger(__name__)


async def write_json(path: Path, data: Any):
    async with aiofiles.open(path, "w", encoding="utf-8") as f:
        await f.write(json.dumps(data, indent=2) + "\n")


async def write_text(path: Path, text: str):
    async with aiofiles.open(path, "w", encoding="utf-8") as f:
        await f.write(text)


async def prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    await write_json(out / "config.json", cfg.to_dict())
    return out


async def cmd_synth(cfg: RunConfig) -> Path:
    """Write ``num_scenes`` scene bundles and a manifest."""
    out = await prepare_out(cfg)
    bundles = await asyncio.to_thread(generate_suite, cfg.synth, cfg.seed)

    semaphore = asyncio.Semaphore(8)

    async def write_with_semaphore(bundle: SceneBundle):
        async with semaphore:
            return await write_bundle(bundle, out)

    await asyncio.gather(*(write_with_semaphore(b) for b in bundles))
    await write_json(
        out / "manifest.json",
        {
            "prng": PRNG_ALGORITHM,
            "seed": cfg.seed,
            "scene_seeds": scene_seeds(cfg.seed, cfg.synth.num_scenes),
            "scenes": [bundle_name(b.image_id) for b in bundles],
        },
    )
    logger.info(f"Wrote {len(bundles)} scene bundles to {out}")
    return out


def _parse_labels(text: str) -> np.ndarray:
    text = text.strip()
    if not text:
        return np.zeros(0, dtype=np.int64)
    try:
        values = [int(v) for v in text.split(",")]
    except ValueError as e:
        raise BadInputError(f"Label vector must be comma-separated 0/1 values: {text!r}") from e
    if any(v not in (0, 1) for v in values):
        raise BadInputError(f"Label vector must hold only 0 and 1: {text!r}")
    return np.array(values, dtype=np.int64)


async def _read_heatmaps(specs: list[str]) -> dict[int, Heatmap]:
    heatmaps = {}
    for spec in specs:
        class_part, sep, path = spec.partition(":")
        if not sep:
            raise BadInputError(f"Heatmap argument must be CLASS:PATH, got {spec!r}")
        try:
            class_id = int(class_part)
        except ValueError as e:
            raise BadInputError(f"Bad class id in {spec!r}") from e
        heatmaps[class_id] = normalize(await read_activation_map(path, class_id))
    return heatmaps


async def cmd_cluster(cfg: RunConfig, args: argparse.Namespace) -> Path:
    """Build clusters from a bundle or from heatmap and proposal files."""
    if args.bundle:
        bundle = await read_bundle(args.bundle)
        heatmaps, proposals, labels = bundle.heatmaps, bundle.proposals, bundle.image_labels
        size = (bundle.scene.width, bundle.scene.height)
    else:
        if not args.proposals:
            raise BadInputError("cluster needs --bundle or --proposals with --heatmap")
        heatmaps = await _read_heatmaps(args.heatmap or [])
        proposals = await read_proposals(args.proposals)
        if args.labels is not None:
            labels = _parse_labels(args.labels)
        else:
            labels = np.zeros(max(heatmaps, default=0), dtype=np.int64)
            for class_id in heatmaps:
                labels[class_id - 1] = 1
        first = next(iter(heatmaps.values()), None)
        size = (first.width, first.height) if first is not None else None

    clusters = build_clusters(heatmaps, labels, proposals, cfg.hgps, size)
    out = await prepare_out(cfg)
    await write_json(out / "clusters.json", clusters.to_dict())
    logger.info(f"Wrote {len(clusters)} clusters to {out / 'clusters.json'}")
    if args.overlay:
        if heatmaps:
            await write_ppm(args.overlay, render_overlay(heatmaps, clusters, cfg.hgps))
        else:
            logger.warning("No heatmaps to draw; overlay skipped")
    return out


async def _load_scenes(cfg: RunConfig, scenes: str | None) -> list[SceneBundle]:
    if scenes:
        return await read_suite(scenes)
    return await asyncio.to_thread(generate_suite, cfg.synth, cfg.seed)


async def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> Path:
    """Train on a scene directory and write checkpoint, curves and final metrics."""
    bundles = await _load_scenes(cfg, args.scenes)
    trainer = ToyTrainer(cfg.hgps, cfg.trainer, cfg.eval)
    result = await trainer.fit(bundles)

    out = await prepare_out(cfg)
    await save_checkpoint(result.model, out / "checkpoint.json")
    await write_text(out / "curves.csv", curve_csv(result.curve))

    images = [trainer.prepare(b) for b in bundles]
    dets = [d for image in images for d in trainer.detect(result.model, image)]
    gts = [g for b in bundles for g in b.gt]
    num_classes = bundles[0].num_classes if bundles else cfg.synth.num_classes
    metrics = evaluate_detections(dets, gts, num_classes, cfg.eval)
    metrics["detection_source"] = cfg.trainer.detection_source
    metrics["map_by_source"] = trainer.evaluate_sources(result.model, images)
    await write_json(out / "metrics.json", metrics)
    logger.info(f"Training finished: mAP {metrics['map']:.4f}, mCorLoc {metrics['mcorloc']:.4f}")
    return out


def _pseudo_from_ground_truth_rows(rows) -> dict[int, PseudoGtSet]:
    by_image: dict[int, list[PseudoGt]] = {}
    for g in rows:
        by_image.setdefault(g.image_id, []).append(PseudoGt(g.box, 1.0, g.class_id))
    return {image_id: PseudoGtSet(tuple(entries)) for image_id, entries in by_image.items()}


async def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> Path:
    """Per-class AP, mAP and CorLoc of a detection file; optional pseudo-GT quality."""
    dets = await read_detections(args.detections)
    gts = await read_ground_truth(args.gt)
    class_ids = [g.class_id for g in gts] + [d.class_id for d in dets]
    num_classes = args.num_classes or max(class_ids, default=0)
    metrics = evaluate_detections(dets, gts, num_classes, cfg.eval)

    if args.pseudo:
        pseudo = _pseudo_from_ground_truth_rows(await read_ground_truth(args.pseudo))
        image_ids = sorted({g.image_id for g in gts} | set(pseudo))
        reports = [
            pseudo_gt_quality(pseudo.get(i, PseudoGtSet()), [g for g in gts if g.image_id == i])
            for i in image_ids
        ]
        metrics["pseudo_gt_quality"] = aggregate_quality(reports).to_dict()

    out = await prepare_out(cfg)
    await write_json(out / "metrics.json", metrics)
    logger.info(f"mAP {metrics['map']:.4f}, mCorLoc {metrics['mcorloc']:.4f}")
    return out


async def cmd_sweep(cfg: RunConfig, args: argparse.Namespace) -> bool:
    """Pseudo-GT quality over thresholds and scales; False when the default setting falls short."""
    bundles = await _load_scenes(cfg, args.scenes)
    result = await threshold_sweep(bundles, cfg.hgps)
    out = await prepare_out(cfg)
    await write_json(out / "sweep.json", result.to_dict())
    table = format_table(result)
    await write_text(out / "sweep.txt", table)
    print(table, end="")
    return result.default_ok


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or key=value config file")
    common.add_argument("--seed", type=int, help="Run seed (overrides the config)")
    common.add_argument("--out", help="Output directory (default: out)")
    common.add_argument(
        "--no-cls-ign", action="store_true", help="Train without the ignored-row loss"
    )
    common.add_argument("--stages", type=int, help="Number of refinement stages K")
    common.add_argument(
        "--thresholds",
        type=float,
        nargs=2,
        metavar=("LOW", "HIGH"),
        help="Low and high heatmap thresholds",
    )
    common.add_argument("--scale", type=float, metavar="R", help="Low-box scale factor r")
    common.add_argument("--verbose", "-v", action="store_true", help="Debug logging")

    parser = argparse.ArgumentParser(
        prog="wsod-labels",
        description=(
            "Heatmap-guided pseudo ground-truth generation and toy weakly supervised training"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="Generate synthetic scene bundles")

    cluster = sub.add_parser("cluster", parents=[common], help="Build pseudo ground-truth clusters")
    cluster.add_argument("--bundle", help="Scene bundle directory")
    cluster.add_argument(
        "--heatmap", action="append", metavar="CLASS:PATH", help="Heatmap grid file (repeatable)"
    )
    cluster.add_argument("--proposals", help="Proposal JSON file")
    cluster.add_argument("--labels", help="Comma-separated image label vector, e.g. 1,0,1")
    cluster.add_argument("--overlay", help="Write a PPM overlay to this path")

    train = sub.add_parser("train", parents=[common], help="Run the toy trainer")
    train.add_argument("--scenes", help="Scene directory written by synth (generated when omitted)")
    train.add_argument(
        "--preset", choices=sorted(PRESETS), help="Base model and pseudo-GT selector pair"
    )

    evaluate = sub.add_parser("eval", parents=[common], help="Evaluate detections")
    evaluate.add_argument(
        "--detections", required=True, help="CSV image_id,class_id,x1,y1,x2,y2,score"
    )
    evaluate.add_argument("--gt", required=True, help="CSV image_id,class_id,x1,y1,x2,y2")
    evaluate.add_argument("--pseudo", help="Pseudo ground-truth CSV for quality diagnostics")
    evaluate.add_argument("--num-classes", type=int, help="Number of classes C")

    sweep = sub.add_parser("sweep", parents=[common], help="Threshold and scale sensitivity table")
    sweep.add_argument("--scenes", help="Scene directory written by synth (generated when omitted)")
    return parser


async def run(args: argparse.Namespace) -> int:
    cfg = await load_config(args.config) if args.config else RunConfig()
    cfg = apply_overrides(
        cfg,
        seed=args.seed,
        out_dir=args.out,
        no_cls_ign=args.no_cls_ign,
        stages=args.stages,
        thresholds=tuple(args.thresholds) if args.thresholds else None,
        scale=args.scale,
        preset=getattr(args, "preset", None),
    )

    match args.command:
        case "synth":
            await cmd_synth(cfg)
        case "cluster":
            await cmd_cluster(cfg, args)
        case "train":
            await cmd_train(cfg, args)
        case "eval":
            await cmd_eval(cfg, args)
        case "sweep":
            if not await cmd_sweep(cfg, args):
                logger.error(
                    "Recall at the default thresholds is not within reach of the best setting"
                )
                return EXIT_INVARIANT
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    """Main entry point."""
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        return asyncio.run(run(args))
    except InvariantViolation as e:
        logger.error(f"Invariant violated: {e}")
        return EXIT_INVARIANT
    except (BadInputError, ValueError, FileNotFoundError) as e:
        logger.error(f"Bad input: {e}")
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
