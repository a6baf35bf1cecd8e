"""Loss values and their derivatives with respect to score matrices.

Every log argument is clamped to ``[EPS, 1 - EPS]``; where the clamp is active
the derivative is zero. Losses with an empty normalizer evaluate to 0 and come
back flagged as degenerate.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .hgps import IGNORED, AssignedLabels

if TYPE_CHECKING:
    from .midn import BoxLevelImageLabel, ScoreStack

logger = logging.getLogger(__name__)

EPS = 1e-7


@dataclass(frozen=True)
class LossTerm:
    """A scalar loss value; ``degenerate`` marks an empty normalizer."""

    value: float
    degenerate: bool = False

    def __float__(self) -> float:
        return self.value


def _label_vector(y: "BoxLevelImageLabel | np.ndarray | Sequence[int]") -> np.ndarray:
    return np.asarray(getattr(y, "y", y), dtype=np.float64)


def _check_rows(scores: np.ndarray, labels: AssignedLabels):
    if scores.ndim != 2 or scores.shape[0] != labels.num_rows:
        raise ValueError(f"Score matrix {scores.shape} does not match {labels.num_rows} labels")
    if scores.shape[1] < labels.num_classes + 1:
        raise ValueError(
            f"Score matrix has {scores.shape[1]} columns, need {labels.num_classes + 1}"
        )


def bce_terms(p: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed binary cross-entropy and its derivative w.r.t. ``p``."""
    if p.shape != y.shape:
        raise ValueError(f"Score vector {p.shape} does not match label vector {y.shape}")
    clamped = np.clip(p, EPS, 1.0 - EPS)
    value = -float(np.sum(y * np.log(clamped) + (1.0 - y) * np.log(1.0 - clamped)))
    grad = -y / clamped + (1.0 - y) / (1.0 - clamped)
    active = (p > EPS) & (p < 1.0 - EPS)
    return value, np.where(active, grad, 0.0)


def loss_img(stack: "ScoreStack", y: "BoxLevelImageLabel") -> LossTerm:
    """Binary cross-entropy between the image score and the box-level image label."""
    value, _ = bce_terms(stack.s_img, _label_vector(y))
    return LossTerm(value)


def loss_img_grad(stack: "ScoreStack", y: "BoxLevelImageLabel") -> np.ndarray:
    """Derivative of ``loss_img`` w.r.t. ``s_img``."""
    return bce_terms(stack.s_img, _label_vector(y))[1]


def loss_wsddn_baseline(stack: "ScoreStack", y: Sequence[int] | np.ndarray) -> LossTerm:
    """Image-level BCE over C classes for the background-free baseline heads."""
    value, _ = bce_terms(stack.s_img, _label_vector(y))
    return LossTerm(value)


def loss_wsddn_baseline_grad(stack: "ScoreStack", y: Sequence[int] | np.ndarray) -> np.ndarray:
    return bce_terms(stack.s_img, _label_vector(y))[1]


def _weighted_nll(
    scores: np.ndarray, labels: AssignedLabels, weights: np.ndarray, normalizer: int, name: str
) -> tuple[LossTerm, np.ndarray]:
    grad = np.zeros_like(scores)
    if normalizer == 0:
        logger.debug(f"{name}: empty normalizer, loss is 0")
        return LossTerm(0.0, degenerate=True), grad

    rows = np.flatnonzero(labels.labels != IGNORED)
    cols = labels.labels[rows] - 1
    picked = scores[rows, cols]
    clamped = np.maximum(picked, EPS)
    w = weights[rows]
    value = -float(np.sum(w * np.log(clamped))) / normalizer
    grad[rows, cols] = np.where(picked > EPS, -(w / normalizer) / clamped, 0.0)
    return LossTerm(value), grad


def _cls_terms(
    scores: np.ndarray, labels: AssignedLabels, weighted: bool
) -> tuple[LossTerm, np.ndarray]:
    _check_rows(scores, labels)
    weights = labels.weights if weighted else np.ones(labels.num_rows)
    n_cls = int(np.sum(labels.labels != IGNORED))
    return _weighted_nll(scores, labels, weights, n_cls, "loss_cls")


def loss_cls(scores: np.ndarray, labels: AssignedLabels, weighted: bool = True) -> LossTerm:
    """Cross-entropy over non-ignored rows, normalized by their count."""
    return _cls_terms(scores, labels, weighted)[0]


def loss_cls_grad(scores: np.ndarray, labels: AssignedLabels, weighted: bool = True) -> np.ndarray:
    return _cls_terms(scores, labels, weighted)[1]


def _oicr_terms(scores: np.ndarray, labels: AssignedLabels) -> tuple[LossTerm, np.ndarray]:
    _check_rows(scores, labels)
    return _weighted_nll(scores, labels, labels.weights, labels.num_rows, "loss_oicr_baseline")


def loss_oicr_baseline(scores: np.ndarray, labels: AssignedLabels) -> LossTerm:
    """Weighted cross-entropy normalized by the total row count."""
    return _oicr_terms(scores, labels)[0]


def loss_oicr_baseline_grad(scores: np.ndarray, labels: AssignedLabels) -> np.ndarray:
    return _oicr_terms(scores, labels)[1]


def _cls_ign_terms(
    scores: np.ndarray, labels: AssignedLabels, y: "BoxLevelImageLabel"
) -> tuple[LossTerm, np.ndarray]:
    _check_rows(scores, labels)
    y_vec = _label_vector(y)
    if y_vec.size != scores.shape[1]:
        raise ValueError(f"Image label has {y_vec.size} entries, scores have {scores.shape[1]}")
    grad = np.zeros_like(scores)
    rows = np.flatnonzero(labels.ignored)
    if rows.size == 0:
        logger.debug("loss_cls_ign: no ignored rows, loss is 0")
        return LossTerm(0.0, degenerate=True), grad

    absent = np.flatnonzero(y_vec == 0)
    if absent.size == 0:
        return LossTerm(0.0), grad

    sub = scores[np.ix_(rows, absent)]
    complement = 1.0 - sub
    clamped = np.maximum(complement, EPS)
    value = -float(np.sum(np.log(clamped))) / rows.size
    grad[np.ix_(rows, absent)] = np.where(complement > EPS, (1.0 / rows.size) / clamped, 0.0)
    return LossTerm(value), grad


def loss_cls_ign(scores: np.ndarray, labels: AssignedLabels, y: "BoxLevelImageLabel") -> LossTerm:
    """Push ignored rows' scores on absent classes towards zero."""
    return _cls_ign_terms(scores, labels, y)[0]


def loss_cls_ign_grad(
    scores: np.ndarray, labels: AssignedLabels, y: "BoxLevelImageLabel"
) -> np.ndarray:
    return _cls_ign_terms(scores, labels, y)[1]


def loss_total(
    img: float,
    cls0: float,
    ign0: float,
    stages: Sequence[tuple[float, float]],
) -> float:
    """Base-stage loss plus the sum of per-stage refinement losses.

    ``stages`` holds one ``(cls, cls_ign)`` pair per refinement stage.
    """
    total = float(img) + float(cls0) + float(ign0)
    for cls_k, ign_k in stages:
        total += float(cls_k) + float(ign_k)
    return total
