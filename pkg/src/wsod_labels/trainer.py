"""Toy trainer for the detector heads on synthetic scenes.

Images of a batch are processed concurrently; their gradients are reduced in
image-id order so runs are reproducible.
"""

import asyncio
import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np

from .errors import BadInputError
from .evalmetrics import Detection, EvalConfig, GroundTruth, mean_ap
from .geometry import Box, nms
from .hgps import (
    AssignedLabels,
    ClusterSet,
    HgpsConfig,
    PseudoGtSet,
    assign_labels,
    build_clusters,
    select_pseudo_gt_ir,
    select_pseudo_gt_wsbdn,
    select_top_scoring,
)
from .midn import (
    DetectorModel,
    LossId,
    ModelGrads,
    ModelOutputs,
    StageTargets,
    backward,
    evaluate_objective,
    forward_ir,
    forward_model,
    forward_wsbdn,
    sgd_step,
)
from .synth import SceneBundle, SplitMix64, SynthConfig, generate_suite

logger = logging.getLogger(__name__)

BASE_MODELS = ("wsbdn", "wsddn")
SELECTORS = ("hgps", "top_scoring")
DETECTION_SOURCES = ("ir", "s0", "ws0")
# Named (base_model, selector) pairs.
PRESETS = {
    "hgps": ("wsbdn", "hgps"),
    "baseline": ("wsddn", "top_scoring"),
    "wsddn_hgps": ("wsddn", "hgps"),
    "wsbdn_top_scoring": ("wsbdn", "top_scoring"),
}


@dataclass(frozen=True)
class TrainerConfig:
    """Optimization settings; the learning rate is scaled up for toy feature sizes.

    ``base_model`` sets the base heads: ``"wsbdn"`` has a background column and
    can train on cluster pseudo ground truths, ``"wsddn"`` has C columns and only
    the image loss. ``selector`` sets how refinement pseudo ground truths are
    picked and which refinement loss they feed: ``"hgps"`` (cluster argmax,
    proposal cross-entropy plus the ignored-row loss) or ``"top_scoring"``
    (global top box, weighted cross-entropy over all rows). ``use_img_loss`` and
    ``use_base_cls`` switch the two base-stage losses of the wsbdn heads.
    """

    epochs: int = 10
    batch_size: int = 4
    lr: float = 0.2
    lr_decay_epoch: int | None = None
    weight_decay: float = 0.0005
    seed: int = 0
    use_cls_ign: bool = True
    base_model: str = "wsbdn"
    selector: str = "hgps"
    use_img_loss: bool = True
    use_base_cls: bool = True
    detection_source: str = "ir"
    eval_every: int = 0
    init_scale: float = 0.01
    nms_iou: float = 0.3
    max_detections: int = 20
    max_concurrency: int = 8

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError(
                f"Need epochs >= 0 and batch_size >= 1, got {self.epochs}, {self.batch_size}"
            )
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError(
                f"Need lr >= 0 and weight_decay >= 0, got {self.lr}, {self.weight_decay}"
            )
        if self.base_model not in BASE_MODELS:
            raise ValueError(f"base_model must be one of {BASE_MODELS}, got {self.base_model!r}")
        if self.selector not in SELECTORS:
            raise ValueError(f"selector must be one of {SELECTORS}, got {self.selector!r}")
        if self.detection_source not in DETECTION_SOURCES:
            raise ValueError(
                f"detection_source must be one of {DETECTION_SOURCES}, "
                f"got {self.detection_source!r}"
            )
        if not (self.use_img_loss or self.base_proposal_loss):
            raise ValueError("The base stage needs the image loss or the base proposal loss")
        if self.eval_every < 0:
            raise ValueError(f"eval_every must be >= 0, got {self.eval_every}")

    @classmethod
    def preset(cls, name: str, **kwargs: Any) -> "TrainerConfig":
        """Config for a named base model and selector pair."""
        if name not in PRESETS:
            raise ValueError(f"Unknown preset {name!r}; choose from {sorted(PRESETS)}")
        base_model, selector = PRESETS[name]
        return cls(base_model=base_model, selector=selector, **kwargs)

    @property
    def background(self) -> bool:
        return self.base_model == "wsbdn"

    @property
    def base_proposal_loss(self) -> bool:
        """True when the base heads train on proposal labels; wsddn heads never do."""
        return self.background and self.use_base_cls

    @property
    def refinement(self) -> str:
        return "cls" if self.selector == "hgps" else "oicr"

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay_epoch is not None and epoch >= self.lr_decay_epoch:
            return self.lr * 0.1
        return self.lr


@dataclass
class TrainingImage:
    """Per-image inputs with clusters and synthetic-box features cached."""

    image_id: int
    proposals: list[Box]
    boxes: list[Box]
    features: np.ndarray
    image_labels: np.ndarray
    clusters: ClusterSet | None
    gt: list[GroundTruth] = field(default_factory=list)

    @property
    def num_proposals(self) -> int:
        return len(self.proposals)

    @property
    def num_classes(self) -> int:
        return len(self.image_labels)


@dataclass(frozen=True)
class CurvePoint:
    iteration: int
    epoch: int
    lr: float
    loss: float
    map: float | None = None


@dataclass
class TrainingResult:
    model: DetectorModel
    curve: list[CurvePoint]

    def final_map(self) -> float | None:
        values = [p.map for p in self.curve if p.map is not None]
        return values[-1] if values else None


class ToyTrainer:
    """Runs selection, losses and SGD over a set of scene bundles."""

    def __init__(
        self,
        hgps_cfg: HgpsConfig | None = None,
        trainer_cfg: TrainerConfig | None = None,
        eval_cfg: EvalConfig | None = None,
    ):
        self.hgps_cfg = hgps_cfg or HgpsConfig()
        self.cfg = trainer_cfg or TrainerConfig()
        self.eval_cfg = eval_cfg or EvalConfig()

    @property
    def uses_clusters(self) -> bool:
        return self.cfg.selector == "hgps"

    def prepare(self, bundle: SceneBundle) -> TrainingImage:
        """Build clusters once and append features for their synthetic boxes."""
        proposals = list(bundle.proposals)
        if not self.uses_clusters:
            return TrainingImage(
                bundle.image_id,
                proposals,
                proposals,
                bundle.features,
                bundle.image_labels,
                None,
                bundle.gt,
            )

        clusters = build_clusters(
            bundle.heatmaps,
            bundle.image_labels,
            proposals,
            self.hgps_cfg,
            (bundle.scene.width, bundle.scene.height),
        )
        synthetic = clusters.synthetic_boxes()
        extra = bundle.box_features(synthetic, start_row=len(proposals))
        features = np.vstack([bundle.features, extra]) if synthetic else bundle.features
        logger.debug(
            f"Image {bundle.image_id}: {len(clusters)} clusters, {len(synthetic)} synthetic rows"
        )
        return TrainingImage(
            bundle.image_id,
            proposals,
            clusters.scoring_boxes(proposals),
            features,
            bundle.image_labels,
            clusters,
            bundle.gt,
        )

    def create_model(self, in_dim: int, num_classes: int) -> DetectorModel:
        rng = np.random.default_rng(self.cfg.seed)
        return DetectorModel.create(
            in_dim,
            num_classes,
            self.hgps_cfg.stages,
            background=self.cfg.background,
            rng=rng,
            scale=self.cfg.init_scale,
        )

    def select_base(self, outputs: ModelOutputs, image: TrainingImage) -> PseudoGtSet | None:
        """Base-stage pseudo ground truths.

        None when the base heads train on image labels only.
        """
        if not self.cfg.base_proposal_loss:
            return None
        if self.uses_clusters:
            return select_pseudo_gt_wsbdn(image.clusters)
        ws0 = outputs.stack.ws
        return select_top_scoring(image.boxes, image.image_labels, ws0, 0, np.ones_like(ws0))

    def select(self, outputs: ModelOutputs, image: TrainingImage) -> list[PseudoGtSet | None]:
        """Pseudo ground truths of every stage; index 0 is the base stage."""
        ws0 = outputs.stack.ws
        sets = [self.select_base(outputs, image)]
        for k in range(1, self.hgps_cfg.stages + 1):
            if k == 1:
                source = ws0
                weights = outputs.stack.s if self.hgps_cfg.first_stage_weight == "s" else ws0
            else:
                source = weights = outputs.ir_scores[k - 2]
            if self.uses_clusters:
                sets.append(select_pseudo_gt_ir(image.clusters, source, k, self.hgps_cfg, weights))
            else:
                sets.append(select_top_scoring(image.boxes, image.image_labels, source, k))
        return sets

    def targets(self, model: DetectorModel, image: TrainingImage) -> StageTargets:
        outputs = forward_model(model, image.features)
        labels: list[AssignedLabels | None] = []
        for gts in self.select(outputs, image):
            if gts is None:
                labels.append(None)
            else:
                labels.append(assign_labels(image.boxes, gts, self.hgps_cfg, image.num_classes))
        return StageTargets(
            image.image_labels,
            tuple(labels),
            use_cls_ign=self.cfg.use_cls_ign,
            use_img_loss=self.cfg.use_img_loss,
            use_base_cls=self.cfg.base_proposal_loss,
            refinement=self.cfg.refinement,
        )

    def image_step(self, model: DetectorModel, image: TrainingImage) -> tuple[float, ModelGrads]:
        """Loss and gradients of one image; labels are constants of the step."""
        targets = self.targets(model, image)
        loss = evaluate_objective(model, image.features, targets).total
        grads = backward(LossId.TOTAL, model, image.features, targets)
        return loss, grads

    async def train_batch(
        self, model: DetectorModel, images: Sequence[TrainingImage], lr: float
    ) -> tuple[DetectorModel, float]:
        """One SGD step on the mean loss of ``images``."""
        semaphore = asyncio.Semaphore(self.cfg.max_concurrency)

        async def step_with_semaphore(image: TrainingImage):
            async with semaphore:
                return await asyncio.to_thread(self.image_step, model, image)

        results = await asyncio.gather(*(step_with_semaphore(im) for im in images))

        total = ModelGrads()
        loss = 0.0
        scale = 1.0 / len(images)
        for image, (image_loss, grads) in sorted(
            zip(images, results, strict=True), key=lambda t: t[0].image_id
        ):
            total = total.add(grads, scale)
            loss += image_loss * scale
        return sgd_step(model, total, lr, self.cfg.weight_decay), loss

    def detection_scores(
        self, model: DetectorModel, image: TrainingImage, source: str | None = None
    ) -> np.ndarray:
        """Per-proposal class scores from the last refinement head or a base score map."""
        source = source or self.cfg.detection_source
        features = image.features[: image.num_proposals]
        match source:
            case "ir":
                return forward_ir(features, model.ir_heads[-1])
            case "s0":
                return forward_wsbdn(features, model.cls_head, model.wgt_head).s
            case "ws0":
                return forward_wsbdn(features, model.cls_head, model.wgt_head).ws
        raise ValueError(f"detection source must be one of {DETECTION_SOURCES}, got {source!r}")

    def detect(
        self, model: DetectorModel, image: TrainingImage, source: str | None = None
    ) -> list[Detection]:
        """Detections with per-class NMS over raw proposals."""
        if image.num_proposals == 0:
            return []
        scores = self.detection_scores(model, image, source)
        dets = []
        for class_id in range(1, image.num_classes + 1):
            column = scores[:, class_id - 1]
            scored = [(box, float(column[r])) for r, box in enumerate(image.proposals)]
            keep = nms(scored, self.cfg.nms_iou)[: self.cfg.max_detections]
            dets.extend(
                Detection(image.image_id, class_id, scored[i][0], scored[i][1]) for i in keep
            )
        return dets

    def evaluate(
        self, model: DetectorModel, images: Sequence[TrainingImage], source: str | None = None
    ) -> float:
        dets = [d for image in images for d in self.detect(model, image, source)]
        gts = [g for image in images for g in image.gt]
        num_classes = images[0].num_classes if images else 0
        return mean_ap(dets, gts, num_classes, self.eval_cfg)

    def evaluate_sources(
        self, model: DetectorModel, images: Sequence[TrainingImage]
    ) -> dict[str, float]:
        """mAP of every detection source."""
        return {source: self.evaluate(model, images, source) for source in DETECTION_SOURCES}

    async def fit(
        self,
        bundles: Sequence[SceneBundle],
        eval_bundles: Sequence[SceneBundle] | None = None,
        model: DetectorModel | None = None,
    ) -> TrainingResult:
        """Train for ``cfg.epochs`` epochs and record the loss/mAP curve."""
        images = [self.prepare(b) for b in bundles]
        images = [im for im in images if im.features.shape[0] > 0]
        if not images:
            raise BadInputError("No training image has any proposal")
        eval_images = images if eval_bundles is None else [self.prepare(b) for b in eval_bundles]
        if model is None:
            model = self.create_model(images[0].features.shape[1], images[0].num_classes)

        curve: list[CurvePoint] = []
        iteration = 0
        by_id = {im.image_id: im for im in images}
        for epoch in range(self.cfg.epochs):
            lr = self.cfg.lr_at(epoch)
            order = SplitMix64.for_stream(self.cfg.seed, epoch).shuffle(sorted(by_id))
            for start in range(0, len(order), self.cfg.batch_size):
                batch = [by_id[i] for i in order[start : start + self.cfg.batch_size]]
                model, loss = await self.train_batch(model, batch, lr)
                iteration += 1
                value = None
                if self.cfg.eval_every and iteration % self.cfg.eval_every == 0:
                    value = self.evaluate(model, eval_images)
                curve.append(CurvePoint(iteration, epoch, lr, loss, value))
            if not self.cfg.eval_every and curve:
                last = curve[-1]
                final = self.evaluate(model, eval_images)
                curve[-1] = CurvePoint(last.iteration, last.epoch, last.lr, last.loss, final)
            logger.info(f"Epoch {epoch}: loss {curve[-1].loss:.4f}, mAP {curve[-1].map}")
        return TrainingResult(model, curve)


def curve_csv(curve: Sequence[CurvePoint]) -> str:
    lines = ["iteration,epoch,lr,loss,map"]
    for p in curve:
        value = "" if p.map is None else repr(p.map)
        lines.append(f"{p.iteration},{p.epoch},{p.lr!r},{p.loss!r},{value}")
    return "\n".join(lines) + "\n"


def iterations_to_target(curve: Sequence[CurvePoint], target: float) -> int | None:
    """First iteration whose evaluated mAP reaches ``target``."""
    for p in curve:
        if p.map is not None and p.map >= target:
            return p.iteration
    return None


def plateau(curve: Sequence[CurvePoint], window: int = 5) -> float:
    """Mean of the last ``window`` evaluated mAP values."""
    values = [p.map for p in curve if p.map is not None][-window:]
    return float(np.mean(values)) if values else 0.0


@dataclass(frozen=True)
class ConvergenceRun:
    seed: int
    target: float
    with_ign: int | None
    without_ign: int | None

    @property
    def faster_with_ign(self) -> bool:
        if self.with_ign is None:
            return False
        return self.without_ign is None or self.with_ign < self.without_ign


async def compare_cls_ign(
    bundles: Sequence[SceneBundle],
    hgps_cfg: HgpsConfig,
    trainer_cfg: TrainerConfig,
    target_fraction: float = 0.9,
) -> ConvergenceRun:
    """Iterations to reach a fraction of the no-ign plateau.

    Runs once with and once without the ignored-row loss.
    """
    base = replace(trainer_cfg, eval_every=trainer_cfg.eval_every or 1)
    without = await ToyTrainer(hgps_cfg, replace(base, use_cls_ign=False)).fit(bundles)
    with_ign = await ToyTrainer(hgps_cfg, replace(base, use_cls_ign=True)).fit(bundles)
    target = target_fraction * plateau(without.curve)
    run = ConvergenceRun(
        trainer_cfg.seed,
        target,
        iterations_to_target(with_ign.curve, target),
        iterations_to_target(without.curve, target),
    )
    logger.info(
        f"Seed {run.seed}: target mAP {target:.3f} reached at {run.with_ign} with ign, "
        f"{run.without_ign} without"
    )
    return run


# One object class per scene and many far clutter proposals. Clutter rows are
# always ignored, so refinement heads see them only through the ignored-row loss.
CONVERGENCE_SYNTH = SynthConfig(
    num_scenes=16,
    num_classes=4,
    min_present=1,
    max_present=1,
    n_random=12,
    clutter_scale=4.0,
)
CONVERGENCE_TRAINER = TrainerConfig(epochs=10, batch_size=2, lr=0.2, init_scale=0.03, eval_every=1)


async def convergence_study(
    seeds: Sequence[int],
    hgps_cfg: HgpsConfig | None = None,
    synth_cfg: SynthConfig = CONVERGENCE_SYNTH,
    trainer_cfg: TrainerConfig = CONVERGENCE_TRAINER,
    target_fraction: float = 0.9,
) -> list[ConvergenceRun]:
    """Run ``compare_cls_ign`` on a fresh suite and model initialization per seed."""
    hgps_cfg = hgps_cfg or HgpsConfig()
    runs = []
    for seed in seeds:
        bundles = generate_suite(synth_cfg, seed)
        runs.append(
            await compare_cls_ign(
                bundles, hgps_cfg, replace(trainer_cfg, seed=seed), target_fraction
            )
        )
    faster = sum(run.faster_with_ign for run in runs)
    logger.info(f"Ignored-row loss reached the target sooner on {faster} of {len(runs)} seeds")
    return runs


def curve_dict(result: TrainingResult) -> dict[str, Any]:
    return {"curve": [asdict(p) for p in result.curve], "final_map": result.final_map()}
