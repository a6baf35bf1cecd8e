"""Central finite-difference check of the analytic gradients."""

import logging
from collections.abc import Callable
from dataclasses import dataclass, replace

import numpy as np

from .midn import DetectorModel, LossId, StageTargets, backward, evaluate_loss

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5


def numerical_gradient(
    func: Callable[[np.ndarray], float], x: np.ndarray, h: float = DEFAULT_STEP
) -> np.ndarray:
    """Central differences of a scalar function at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        plus = func(x.copy())
        x[idx] = orig - h
        minus = func(x.copy())
        x[idx] = orig
        grad[idx] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Element-wise ``|a - n| / max(|a|, |n|, 1e-6)``."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return np.abs(analytic - numeric) / scale


@dataclass(frozen=True)
class GradCheckReport:
    """Element-wise worst relative error per parameter and the norm-wise error over all of them."""

    max_rel_error: float
    worst: str
    per_param: dict[str, float]
    norm_error: float = 0.0

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error < tolerance


def check_gradients(
    loss_id: LossId,
    model: DetectorModel,
    features: np.ndarray,
    targets: StageTargets,
    stage: int = 0,
    h: float = DEFAULT_STEP,
    with_features: bool = False,
) -> GradCheckReport:
    """Compare ``backward`` against central differences of ``evaluate_loss``."""
    analytic = backward(loss_id, model, features, targets, stage, with_features=with_features)
    per_param: dict[str, float] = {}
    analytic_parts: list[np.ndarray] = []
    numeric_parts: list[np.ndarray] = []

    def record(name: str, a: np.ndarray, n: np.ndarray):
        per_param[name] = float(relative_error(a, n).max())
        analytic_parts.append(np.ravel(a))
        numeric_parts.append(np.ravel(n))

    for head in model.heads():
        g = analytic.heads[head.name]

        def loss_at_weight(w: np.ndarray, head=head) -> float:
            trial = model.with_heads({head.name: replace(head, weight=w)})
            return evaluate_loss(loss_id, trial, features, targets, stage)

        def loss_at_bias(b: np.ndarray, head=head) -> float:
            trial = model.with_heads({head.name: replace(head, bias=b)})
            return evaluate_loss(loss_id, trial, features, targets, stage)

        record(f"{head.name}.weight", g.weight, numerical_gradient(loss_at_weight, head.weight, h))
        record(f"{head.name}.bias", g.bias, numerical_gradient(loss_at_bias, head.bias, h))

    if with_features:
        numeric = numerical_gradient(
            lambda f: evaluate_loss(loss_id, model, f, targets, stage), features, h
        )
        record("features", analytic.features, numeric)

    a, n = np.concatenate(analytic_parts), np.concatenate(numeric_parts)
    norm_error = float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-12))
    worst = max(per_param, key=per_param.get)
    report = GradCheckReport(per_param[worst], worst, per_param, norm_error)
    logger.debug(
        f"Gradient check for {loss_id.value}: max relative error "
        f"{report.max_rel_error:.3e} at {worst}, norm-wise {report.norm_error:.3e}"
    )
    return report
