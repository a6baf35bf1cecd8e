"""Multiple-instance detection heads and score stacks.

The base detector has a classification head (softmax over classes) and a
weighting head (softmax over proposals); their element-wise product summed over
proposals gives the image score. Refinement heads apply a class-wise softmax
only and always output C+1 columns (background last). The base heads have C+1
columns when the background column is on and C columns otherwise.
"""

import json
import logging
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any

import aiofiles
import numpy as np

from . import losses
from .errors import BadInputError, InvariantViolation
from .hgps import AssignedLabels
from .losses import LossTerm

logger = logging.getLogger(__name__)


class HeadRole(str, Enum):
    CLS = "cls"
    WGT = "wgt"
    IR = "ir"


@dataclass(frozen=True)
class LinearHead:
    """Affine map from D features to ``out_dim`` logits."""

    role: HeadRole
    weight: np.ndarray
    bias: np.ndarray
    stage: int = 0

    def __post_init__(self):
        weight = np.asarray(self.weight, dtype=np.float64)
        bias = np.asarray(self.bias, dtype=np.float64)
        if weight.ndim != 2 or bias.shape != (weight.shape[1],):
            raise ValueError(f"Head shapes do not match: weight {weight.shape}, bias {bias.shape}")
        if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
            raise ValueError(f"Head {self.name} has non-finite parameters")
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "bias", bias)

    @property
    def name(self) -> str:
        return f"ir{self.stage}" if self.role == HeadRole.IR else self.role.value

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def zeros(cls, role: HeadRole, in_dim: int, out_dim: int, stage: int = 0) -> "LinearHead":
        return cls(role, np.zeros((in_dim, out_dim)), np.zeros(out_dim), stage)

    @classmethod
    def random(
        cls,
        role: HeadRole,
        in_dim: int,
        out_dim: int,
        rng: np.random.Generator,
        scale: float = 0.01,
        stage: int = 0,
    ) -> "LinearHead":
        return cls(role, rng.normal(0.0, scale, (in_dim, out_dim)), np.zeros(out_dim), stage)

    def logits(self, features: np.ndarray) -> np.ndarray:
        if features.shape[1] != self.in_dim:
            raise ValueError(
                f"Head {self.name} expects {self.in_dim} features, got {features.shape[1]}"
            )
        return features @ self.weight + self.bias


@dataclass(frozen=True)
class BoxLevelImageLabel:
    """(C+1)-vector image label with the background entry fixed to 1."""

    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        if y.ndim != 1 or y.size < 1 or not np.all((y == 0) | (y == 1)):
            raise ValueError(f"Image label must be a 0/1 vector, got {self.y}")
        if y[-1] != 1:
            raise ValueError("Background entry of a box-level image label must be 1")
        object.__setattr__(self, "y", y)

    @classmethod
    def from_image_labels(cls, image_labels: Sequence[int]) -> "BoxLevelImageLabel":
        return cls(np.append(np.asarray(image_labels, dtype=np.float64), 1.0))

    @property
    def num_classes(self) -> int:
        return self.y.size - 1

    @property
    def foreground(self) -> np.ndarray:
        return self.y[:-1]


@dataclass(frozen=True)
class ScoreStack:
    """Intermediate and final scores of the base detector."""

    logits_cls: np.ndarray
    logits_wgt: np.ndarray
    s: np.ndarray
    w: np.ndarray
    ws: np.ndarray
    s_img: np.ndarray


def as_feature_matrix(features: np.ndarray) -> np.ndarray:
    """Validate an ``(R, D)`` feature matrix."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 1 or features.shape[1] < 1:
        raise ValueError(f"Feature matrix must be R x D with R, D >= 1, got {features.shape}")
    if not np.all(np.isfinite(features)):
        raise ValueError("Feature matrix has non-finite entries")
    return features


def softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_cols(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def softmax_rows_backward(p: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits of a row-wise softmax given ``grad`` w.r.t. its output."""
    return p * (grad - np.sum(grad * p, axis=1, keepdims=True))


def softmax_cols_backward(p: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return p * (grad - np.sum(grad * p, axis=0, keepdims=True))


def forward_wsbdn(features: np.ndarray, cls_head: LinearHead, wgt_head: LinearHead) -> ScoreStack:
    """Two-branch base detector forward pass."""
    features = as_feature_matrix(features)
    if cls_head.out_dim != wgt_head.out_dim:
        raise ValueError(
            f"Branch widths differ: cls {cls_head.out_dim}, wgt {wgt_head.out_dim}"
        )
    logits_cls = cls_head.logits(features)
    logits_wgt = wgt_head.logits(features)
    s = softmax_rows(logits_cls)
    w = softmax_cols(logits_wgt)
    ws = s * w
    # Column sums of ws may round just past 1.
    return ScoreStack(logits_cls, logits_wgt, s, w, ws, np.clip(ws.sum(axis=0), 0.0, 1.0))


def forward_ir(features: np.ndarray, head: LinearHead) -> np.ndarray:
    """Class-wise softmax scores of one refinement head."""
    return softmax_rows(head.logits(as_feature_matrix(features)))


@dataclass(frozen=True)
class HeadGrad:
    weight: np.ndarray
    bias: np.ndarray


@dataclass
class ModelGrads:
    """Gradients keyed by head name, plus the optional feature gradient."""

    heads: dict[str, HeadGrad] = field(default_factory=dict)
    features: np.ndarray | None = None

    def add(self, other: "ModelGrads", scale: float = 1.0) -> "ModelGrads":
        heads = dict(self.heads)
        for name, g in other.heads.items():
            if name in heads:
                heads[name] = HeadGrad(
                    heads[name].weight + scale * g.weight, heads[name].bias + scale * g.bias
                )
            else:
                heads[name] = HeadGrad(scale * g.weight, scale * g.bias)
        return ModelGrads(heads, None)

    def flat(self, names: Sequence[str]) -> np.ndarray:
        parts = []
        for name in names:
            g = self.heads[name]
            parts.extend([g.weight.ravel(), g.bias.ravel()])
        return np.concatenate(parts) if parts else np.zeros(0)


@dataclass(frozen=True)
class DetectorModel:
    """Base detector heads plus K refinement heads."""

    cls_head: LinearHead
    wgt_head: LinearHead
    ir_heads: tuple[LinearHead, ...]
    step: int = 0

    @classmethod
    def create(
        cls,
        in_dim: int,
        num_classes: int,
        stages: int,
        background: bool = True,
        rng: np.random.Generator | None = None,
        scale: float = 0.01,
    ) -> "DetectorModel":
        """Initialize heads; zero-initialized when ``rng`` is None."""
        base_dim = num_classes + 1 if background else num_classes

        def make(role: HeadRole, out_dim: int, stage: int = 0) -> LinearHead:
            if rng is None:
                return LinearHead.zeros(role, in_dim, out_dim, stage)
            return LinearHead.random(role, in_dim, out_dim, rng, scale, stage)

        return cls(
            cls_head=make(HeadRole.CLS, base_dim),
            wgt_head=make(HeadRole.WGT, base_dim),
            ir_heads=tuple(make(HeadRole.IR, num_classes + 1, k) for k in range(1, stages + 1)),
        )

    @property
    def background(self) -> bool:
        return self.cls_head.out_dim == self.ir_heads[0].out_dim if self.ir_heads else True

    @property
    def num_classes(self) -> int:
        return self.ir_heads[0].out_dim - 1 if self.ir_heads else self.cls_head.out_dim - 1

    @property
    def stages(self) -> int:
        return len(self.ir_heads)

    def heads(self) -> Iterator[LinearHead]:
        yield self.cls_head
        yield self.wgt_head
        yield from self.ir_heads

    def head_names(self) -> list[str]:
        return [h.name for h in self.heads()]

    def head(self, name: str) -> LinearHead:
        for h in self.heads():
            if h.name == name:
                return h
        raise KeyError(name)

    def with_heads(
        self, updated: dict[str, LinearHead], step: int | None = None
    ) -> "DetectorModel":
        def pick(h: LinearHead) -> LinearHead:
            return updated.get(h.name, h)

        return DetectorModel(
            cls_head=pick(self.cls_head),
            wgt_head=pick(self.wgt_head),
            ir_heads=tuple(pick(h) for h in self.ir_heads),
            step=self.step if step is None else step,
        )


def head_backward(
    features: np.ndarray, head: LinearHead, dlogits: np.ndarray
) -> tuple[HeadGrad, np.ndarray]:
    """Parameter and feature gradients of an affine head."""
    return HeadGrad(features.T @ dlogits, dlogits.sum(axis=0)), dlogits @ head.weight.T


def sgd_step(
    model: DetectorModel, grads: ModelGrads, lr: float, weight_decay: float = 0.0
) -> DetectorModel:
    """``theta <- theta - lr * (g + weight_decay * theta)`` for every head with a gradient."""
    if lr < 0:
        raise ValueError(f"Learning rate must be non-negative, got {lr}")
    updated = {}
    for name, g in grads.heads.items():
        if not (np.all(np.isfinite(g.weight)) and np.all(np.isfinite(g.bias))):
            raise InvariantViolation(f"Non-finite gradient for head {name}")
        head = model.head(name)
        updated[name] = replace(
            head,
            weight=head.weight - lr * (g.weight + weight_decay * head.weight),
            bias=head.bias - lr * (g.bias + weight_decay * head.bias),
        )
    return model.with_heads(updated, step=model.step + 1)


def checkpoint_dict(model: DetectorModel) -> dict[str, Any]:
    return {
        "step": model.step,
        "heads": [
            {
                "role": h.role.value,
                "stage": h.stage,
                "in_dim": h.in_dim,
                "out_dim": h.out_dim,
                "weight": h.weight.ravel().tolist(),
                "bias": h.bias.tolist(),
            }
            for h in model.heads()
        ],
    }


def model_from_checkpoint(data: dict[str, Any]) -> DetectorModel:
    try:
        heads = [
            LinearHead(
                role=HeadRole(h["role"]),
                weight=np.array(h["weight"], dtype=np.float64).reshape(h["in_dim"], h["out_dim"]),
                bias=np.array(h["bias"], dtype=np.float64),
                stage=h["stage"],
            )
            for h in data["heads"]
        ]
    except (KeyError, ValueError, TypeError) as e:
        raise BadInputError(f"Malformed checkpoint: {e}") from e
    by_role = {HeadRole.CLS: [], HeadRole.WGT: [], HeadRole.IR: []}
    for h in heads:
        by_role[h.role].append(h)
    if len(by_role[HeadRole.CLS]) != 1 or len(by_role[HeadRole.WGT]) != 1:
        raise BadInputError("Checkpoint must hold exactly one cls and one wgt head")
    return DetectorModel(
        cls_head=by_role[HeadRole.CLS][0],
        wgt_head=by_role[HeadRole.WGT][0],
        ir_heads=tuple(sorted(by_role[HeadRole.IR], key=lambda h: h.stage)),
        step=int(data.get("step", 0)),
    )


async def save_checkpoint(model: DetectorModel, path: str | Path):
    async with aiofiles.open(path, "w", encoding="utf-8") as f:
        await f.write(json.dumps(checkpoint_dict(model)))


async def load_checkpoint(path: str | Path) -> DetectorModel:
    path = Path(path)
    if not path.exists():
        raise BadInputError(f"Checkpoint does not exist: {path}")
    async with aiofiles.open(path, encoding="utf-8") as f:
        text = await f.read()
    return model_from_checkpoint(json.loads(text))


class LossId(str, Enum):
    IMG = "img"
    CLS = "cls"
    CLS_UNWEIGHTED = "cls_unweighted"
    CLS_IGN = "cls_ign"
    WSDDN = "wsddn"
    OICR = "oicr"
    TOTAL = "total"


REFINEMENT_LOSSES = ("cls", "oicr")


@dataclass(frozen=True)
class StageTargets:
    """Training targets of one image and the objective parts they feed.

    ``labels[0]`` belongs to the base stage (None when the base stage has no
    proposal loss) and ``labels[k]`` to refinement stage k. ``refinement``
    picks the refinement loss: ``"cls"`` (with the optional ignored-row loss)
    or ``"oicr"``.
    """

    image_labels: np.ndarray
    labels: tuple[AssignedLabels | None, ...]
    use_cls_ign: bool = True
    use_img_loss: bool = True
    use_base_cls: bool = True
    refinement: str = "cls"

    def __post_init__(self):
        if self.refinement not in REFINEMENT_LOSSES:
            raise ValueError(
                f"refinement must be one of {REFINEMENT_LOSSES}, got {self.refinement!r}"
            )

    @property
    def box_label(self) -> BoxLevelImageLabel:
        return BoxLevelImageLabel.from_image_labels(self.image_labels)

    def stage_labels(self, stage: int) -> AssignedLabels:
        if not 0 <= stage < len(self.labels) or self.labels[stage] is None:
            raise ValueError(f"No labels for stage {stage}")
        return self.labels[stage]


@dataclass(frozen=True)
class ModelOutputs:
    stack: ScoreStack
    ir_scores: tuple[np.ndarray, ...]

    def scores(self, stage: int) -> np.ndarray:
        return self.stack.s if stage == 0 else self.ir_scores[stage - 1]


@dataclass(frozen=True)
class ObjectiveBreakdown:
    """Named loss components and their sum."""

    terms: dict[str, LossTerm]
    total: float


def forward_model(model: DetectorModel, features: np.ndarray) -> ModelOutputs:
    features = as_feature_matrix(features)
    stack = forward_wsbdn(features, model.cls_head, model.wgt_head)
    return ModelOutputs(stack, tuple(forward_ir(features, h) for h in model.ir_heads))


def _check_targets(model: DetectorModel, features: np.ndarray, targets: StageTargets):
    for stage, labels in enumerate(targets.labels):
        if labels is not None and labels.num_rows != features.shape[0]:
            raise ValueError(
                f"Stage {stage} labels cover {labels.num_rows} rows, "
                f"features have {features.shape[0]}"
            )
    if len(targets.labels) != model.stages + 1:
        raise ValueError(
            f"Expected labels for {model.stages + 1} stages, got {len(targets.labels)}"
        )


def _term(loss_id: LossId, outputs: ModelOutputs, targets: StageTargets, stage: int) -> LossTerm:
    match loss_id:
        case LossId.IMG:
            return losses.loss_img(outputs.stack, targets.box_label)
        case LossId.WSDDN:
            return losses.loss_wsddn_baseline(outputs.stack, targets.image_labels)
        case LossId.CLS:
            return losses.loss_cls(
                outputs.scores(stage), targets.stage_labels(stage), weighted=stage > 0
            )
        case LossId.CLS_UNWEIGHTED:
            return losses.loss_cls(
                outputs.scores(stage), targets.stage_labels(stage), weighted=False
            )
        case LossId.CLS_IGN:
            return losses.loss_cls_ign(
                outputs.scores(stage), targets.stage_labels(stage), targets.box_label
            )
        case LossId.OICR:
            return losses.loss_oicr_baseline(outputs.scores(stage), targets.stage_labels(stage))
    raise ValueError(f"Not a single loss term: {loss_id}")


def _objective_parts(model: DetectorModel, targets: StageTargets) -> list[tuple[str, LossId, int]]:
    """Named (loss, stage) parts of the composite objective."""
    parts: list[tuple[str, LossId, int]] = []
    if model.background:
        if targets.use_img_loss:
            parts.append(("img", LossId.IMG, 0))
        if targets.use_base_cls:
            parts.append(("cls0", LossId.CLS, 0))
            if targets.use_cls_ign:
                parts.append(("cls_ign0", LossId.CLS_IGN, 0))
    else:
        if targets.use_base_cls:
            raise ValueError("The base proposal loss needs a background column")
        if targets.use_img_loss:
            parts.append(("wsddn", LossId.WSDDN, 0))
    for k in range(1, model.stages + 1):
        if targets.refinement == "oicr":
            parts.append((f"oicr{k}", LossId.OICR, k))
            continue
        parts.append((f"cls{k}", LossId.CLS, k))
        if targets.use_cls_ign:
            parts.append((f"cls_ign{k}", LossId.CLS_IGN, k))
    if not parts:
        raise ValueError("The objective has no loss term")
    return parts


def evaluate_objective(
    model: DetectorModel, features: np.ndarray, targets: StageTargets
) -> ObjectiveBreakdown:
    """Every component of the composite objective for one image."""
    features = as_feature_matrix(features)
    _check_targets(model, features, targets)
    outputs = forward_model(model, features)
    terms = {
        name: _term(loss_id, outputs, targets, stage)
        for name, loss_id, stage in _objective_parts(model, targets)
    }
    if model.background and targets.refinement == "cls":
        stage_pairs = [
            (terms[f"cls{k}"], terms.get(f"cls_ign{k}", 0.0)) for k in range(1, model.stages + 1)
        ]
        total = losses.loss_total(
            terms.get("img", 0.0), terms.get("cls0", 0.0), terms.get("cls_ign0", 0.0), stage_pairs
        )
    else:
        total = sum(float(t) for t in terms.values())
    return ObjectiveBreakdown(terms, total)


def evaluate_loss(
    loss_id: LossId,
    model: DetectorModel,
    features: np.ndarray,
    targets: StageTargets,
    stage: int = 0,
) -> float:
    """Value of one named loss (or the composite objective) for one image."""
    if loss_id == LossId.TOTAL:
        return evaluate_objective(model, features, targets).total
    features = as_feature_matrix(features)
    _check_targets(model, features, targets)
    return float(_term(loss_id, forward_model(model, features), targets, stage))


def _score_grads(
    loss_id: LossId, outputs: ModelOutputs, targets: StageTargets, stage: int
) -> tuple[np.ndarray | None, dict[int, np.ndarray]]:
    """Derivatives w.r.t. ``s_img`` and w.r.t. the class scores of each stage."""
    match loss_id:
        case LossId.IMG:
            return losses.loss_img_grad(outputs.stack, targets.box_label), {}
        case LossId.WSDDN:
            return losses.loss_wsddn_baseline_grad(outputs.stack, targets.image_labels), {}
        case LossId.CLS:
            g = losses.loss_cls_grad(outputs.scores(stage), targets.stage_labels(stage), stage > 0)
        case LossId.CLS_UNWEIGHTED:
            g = losses.loss_cls_grad(outputs.scores(stage), targets.stage_labels(stage), False)
        case LossId.CLS_IGN:
            g = losses.loss_cls_ign_grad(
                outputs.scores(stage), targets.stage_labels(stage), targets.box_label
            )
        case LossId.OICR:
            g = losses.loss_oicr_baseline_grad(outputs.scores(stage), targets.stage_labels(stage))
        case _:
            raise ValueError(f"Not a single loss term: {loss_id}")
    return None, {stage: g}


def backward(
    loss_id: LossId,
    model: DetectorModel,
    features: np.ndarray,
    targets: StageTargets,
    stage: int = 0,
    with_features: bool = False,
) -> ModelGrads:
    """Analytic gradients of a named loss w.r.t. every head (and optionally the features)."""
    features = as_feature_matrix(features)
    _check_targets(model, features, targets)
    outputs = forward_model(model, features)

    if loss_id == LossId.TOTAL:
        parts = [(lid, k) for _, lid, k in _objective_parts(model, targets)]
    else:
        parts = [(loss_id, stage)]

    g_img = np.zeros_like(outputs.stack.s_img)
    g_scores = {k: np.zeros_like(outputs.scores(k)) for k in range(model.stages + 1)}
    for lid, k in parts:
        gi, gs = _score_grads(lid, outputs, targets, k)
        if gi is not None:
            g_img += gi
        for key, g in gs.items():
            g_scores[key] += g

    stack = outputs.stack
    # s_img = sum_r s * w, so both factors receive the image gradient.
    g_s = g_img[None, :] * stack.w + g_scores[0]
    g_w = g_img[None, :] * stack.s
    dz_cls = softmax_rows_backward(stack.s, g_s)
    dz_wgt = softmax_cols_backward(stack.w, g_w)

    heads: dict[str, HeadGrad] = {}
    heads["cls"], d_features = head_backward(features, model.cls_head, dz_cls)
    heads["wgt"], d_wgt = head_backward(features, model.wgt_head, dz_wgt)
    d_features = d_features + d_wgt
    for k, head in enumerate(model.ir_heads, start=1):
        dz = softmax_rows_backward(outputs.ir_scores[k - 1], g_scores[k])
        heads[head.name], d_ir = head_backward(features, head, dz)
        d_features = d_features + d_ir

    return ModelGrads(heads, d_features if with_features else None)
