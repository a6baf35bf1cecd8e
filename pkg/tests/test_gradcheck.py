"""Tests for the finite-difference gradient checker."""

import numpy as np
import pytest

from wsod_labels.gradcheck import check_gradients, numerical_gradient, relative_error
from wsod_labels.hgps import IGNORED, AssignedLabels
from wsod_labels.midn import DetectorModel, LossId, StageTargets


def _labels(labels, weights, num_classes) -> AssignedLabels:
    labels = np.asarray(labels, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    return AssignedLabels(labels, weights, np.zeros(len(labels)), num_classes)


class TestNumericalGradient:
    """Test central differences."""

    def test_quadratic(self):
        """Test the gradient of a sum of squares."""
        x = np.array([[1.0, -2.0], [0.5, 3.0]])
        numeric = numerical_gradient(lambda v: float(np.sum(v**2)), x)
        np.testing.assert_allclose(numeric, 2 * x, rtol=1e-6)

    def test_input_untouched(self):
        """Test that the perturbed array is restored."""
        x = np.array([1.0, 2.0])
        numerical_gradient(lambda v: float(v.sum()), x)
        np.testing.assert_array_equal(x, [1.0, 2.0])

    def test_relative_error_floor(self):
        """Test that tiny gradients are compared on an absolute scale."""
        err = relative_error(np.array([0.0, 1.0]), np.array([1e-9, 1.5]))
        np.testing.assert_allclose(err, [1e-3, 1 / 3])


class TestCheckGradients:
    """Test analytic gradients against finite differences."""

    @pytest.fixture
    def hgps_setup(self):
        """Create a random two-stage model over five proposals and two classes."""
        rng = np.random.default_rng(21)
        model = DetectorModel.create(4, 2, 2, rng=rng, scale=0.5)
        features = rng.normal(size=(5, 4))
        base = _labels([1, 3, 3, IGNORED, 1], [1.0, 1.0, 1.0, 0.0, 1.0], 2)
        stage1 = _labels([1, 3, IGNORED, IGNORED, 1], [0.8, 0.8, 0.0, 0.0, 0.6], 2)
        stage2 = _labels([1, 3, 3, IGNORED, 3], [0.5, 0.5, 0.4, 0.0, 0.4], 2)
        targets = StageTargets(np.array([1, 0]), (base, stage1, stage2))
        return model, features, targets

    def test_image_loss_at_uniform_heads(self):
        """Test the image loss gradient at zero-initialized heads."""
        rng = np.random.default_rng(22)
        model = DetectorModel.create(3, 2, 1)
        features = rng.normal(size=(4, 3))
        labels = _labels([1, 3, IGNORED, 3], [1.0, 1.0, 0.0, 1.0], 2)
        targets = StageTargets(np.array([1, 0]), (labels, labels))
        report = check_gradients(LossId.IMG, model, features, targets)
        assert report.passed(), report.per_param

    @pytest.mark.parametrize(
        "loss_id,stage",
        [
            (LossId.IMG, 0),
            (LossId.CLS, 0),
            (LossId.CLS_UNWEIGHTED, 1),
            (LossId.CLS, 1),
            (LossId.CLS, 2),
            (LossId.CLS_IGN, 0),
            (LossId.CLS_IGN, 2),
            (LossId.TOTAL, 0),
        ],
    )
    def test_each_loss(self, hgps_setup, loss_id, stage):
        """Test every loss against central differences."""
        model, features, targets = hgps_setup
        report = check_gradients(loss_id, model, features, targets, stage)
        assert report.passed(), report.per_param

    def test_feature_gradient(self, hgps_setup):
        """Test the gradient with respect to the features."""
        model, features, targets = hgps_setup
        report = check_gradients(LossId.TOTAL, model, features, targets, with_features=True)
        assert "features" in report.per_param
        assert report.passed(), report.per_param

    def test_norm_error(self, hgps_setup):
        """Test that the norm-wise error over all parameters is tiny for the composite loss."""
        model, features, targets = hgps_setup
        report = check_gradients(LossId.TOTAL, model, features, targets)
        assert 0.0 <= report.norm_error < 1e-6

    def test_baseline_losses(self):
        """Test the baseline losses against central differences."""
        rng = np.random.default_rng(23)
        model = DetectorModel.create(3, 2, 2, background=False, rng=rng, scale=0.5)
        features = rng.normal(size=(4, 3))
        stage1 = _labels([1, 3, IGNORED, 2], [0.6, 0.6, 0.0, 0.3], 2)
        stage2 = _labels([1, 3, 3, 2], [0.5, 0.5, 0.5, 0.2], 2)
        targets = StageTargets(
            np.array([1, 1]), (None, stage1, stage2), use_base_cls=False, refinement="oicr"
        )
        for loss_id, stage in [(LossId.WSDDN, 0), (LossId.OICR, 2), (LossId.TOTAL, 0)]:
            report = check_gradients(loss_id, model, features, targets, stage)
            assert report.passed(), (loss_id, report.per_param)


def _random_instance(rng: np.random.Generator, background: bool):
    """Random model, features and targets for one gradient check."""
    in_dim, num_classes = int(rng.integers(2, 5)), int(rng.integers(1, 4))
    rows, stages = int(rng.integers(2, 7)), int(rng.integers(1, 3))
    model = DetectorModel.create(
        in_dim, num_classes, stages, background=background, rng=rng, scale=0.5
    )

    def stage_labels():
        labels = rng.integers(1, num_classes + 2, rows)
        labels[rng.random(rows) < 0.25] = IGNORED
        weights = np.where(labels == IGNORED, 0.0, rng.uniform(0.1, 1.0, rows))
        return _labels(labels, weights, num_classes)

    base = stage_labels() if background else None
    targets = StageTargets(
        rng.integers(0, 2, num_classes),
        (base, *(stage_labels() for _ in range(stages))),
        use_base_cls=background,
        refinement="cls" if background else "oicr",
    )
    return model, rng.normal(size=(rows, in_dim)), targets


class TestRandomInstances:
    """Test analytic gradients on many random models and targets."""

    @pytest.mark.slow
    @pytest.mark.parametrize(
        "loss_id,stage,background",
        [
            (LossId.IMG, 0, True),
            (LossId.CLS, 0, True),
            (LossId.CLS, 1, True),
            (LossId.CLS_UNWEIGHTED, 1, True),
            (LossId.CLS_IGN, 0, True),
            (LossId.CLS_IGN, 1, True),
            (LossId.TOTAL, 0, True),
            (LossId.WSDDN, 0, False),
            (LossId.OICR, 1, False),
            (LossId.TOTAL, 0, False),
        ],
    )
    def test_fifty_instances(self, loss_id, stage, background):
        """Test each loss against central differences on fifty random instances."""
        rng = np.random.default_rng(100 + stage)
        for trial in range(50):
            model, features, targets = _random_instance(rng, background)
            report = check_gradients(loss_id, model, features, targets, stage)
            assert report.norm_error < 1e-6, (trial, report.per_param)
