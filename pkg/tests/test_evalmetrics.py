"""Tests for detection metrics and pseudo ground-truth diagnostics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wsod_labels.errors import BadInputError
from wsod_labels.evalmetrics import (
    Detection,
    EvalConfig,
    GroundTruth,
    aggregate_quality,
    average_precision,
    corloc,
    evaluate_detections,
    format_detections,
    format_ground_truth,
    match_detections,
    mean_ap,
    parse_detections,
    parse_ground_truth,
    pseudo_gt_quality,
    read_detections,
    top1_per_image_class,
)
from wsod_labels.geometry import Box
from wsod_labels.hgps import PseudoGt, PseudoGtSet
from wsod_labels.synth import oracle_ap


@st.composite
def grid_boxes(draw):
    x = draw(st.integers(0, 6))
    y = draw(st.integers(0, 6))
    w = draw(st.integers(1, 4))
    h = draw(st.integers(1, 4))
    return Box(x, y, x + w, y + h)


@st.composite
def detections(draw):
    return Detection(
        draw(st.integers(0, 1)),
        1,
        draw(grid_boxes()),
        draw(st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.9])),
    )


@st.composite
def ground_truths(draw):
    return GroundTruth(draw(st.integers(0, 1)), 1, draw(grid_boxes()))


class TestAveragePrecision:
    """Test VOC average precision."""

    @pytest.fixture
    def fixture(self):
        """Create two ground truths and three detections (TP, FP, TP)."""
        gts = [GroundTruth(0, 1, Box(0, 0, 10, 10)), GroundTruth(0, 1, Box(20, 20, 30, 30))]
        dets = [
            Detection(0, 1, Box(0, 0, 10, 10), 0.9),
            Detection(0, 1, Box(50, 50, 60, 60), 0.8),
            Detection(0, 1, Box(20, 20, 30, 30), 0.7),
        ]
        return dets, gts

    def test_exact_hit(self):
        """Test that one exact detection of one ground truth scores 1."""
        gts = [GroundTruth(0, 1, Box(0, 0, 5, 5))]
        assert average_precision([Detection(0, 1, Box(0, 0, 5, 5), 0.5)], gts, 1) == 1.0

    def test_disjoint(self):
        """Test that a missed ground truth scores 0."""
        gts = [GroundTruth(0, 1, Box(0, 0, 5, 5))]
        assert average_precision([Detection(0, 1, Box(9, 9, 12, 12), 0.5)], gts, 1) == 0.0

    def test_fixture_all_points(self, fixture):
        """Test the all-points area for TP, FP, TP."""
        dets, gts = fixture
        assert average_precision(dets, gts, 1) == pytest.approx(5 / 6)
        assert oracle_ap(dets, gts, 1) == pytest.approx(5 / 6)

    def test_fixture_eleven_point(self, fixture):
        """Test the 11-point interpolated metric on the same fixture."""
        dets, gts = fixture
        expected = (6 + 5 * 2 / 3) / 11
        assert average_precision(dets, gts, 1, use_07_metric=True) == pytest.approx(expected)

    def test_duplicate_is_false_positive(self):
        """Test that a second detection of a matched ground truth is a false positive."""
        gts = [GroundTruth(0, 1, Box(0, 0, 5, 5))]
        dets = [Detection(0, 1, Box(0, 0, 5, 5), 0.9), Detection(0, 1, Box(0, 0, 5, 5), 0.8)]
        tp, n_gt = match_detections(dets, gts, 1)
        assert list(tp) == [True, False]
        assert n_gt == 1

    def test_other_image_does_not_match(self):
        """Test that detections only match ground truths of their own image."""
        gts = [GroundTruth(0, 1, Box(0, 0, 5, 5))]
        assert average_precision([Detection(1, 1, Box(0, 0, 5, 5), 0.9)], gts, 1) == 0.0

    def test_no_ground_truth(self):
        """Test that a class without ground truth scores 0."""
        assert average_precision([Detection(0, 2, Box(0, 0, 1, 1), 0.9)], [], 2) == 0.0

    def test_rejects_non_finite_score(self):
        """Test that a NaN score is rejected."""
        with pytest.raises(ValueError):
            Detection(0, 1, Box(0, 0, 1, 1), float("nan"))

    @given(st.lists(detections(), max_size=8), st.lists(ground_truths(), min_size=1, max_size=4))
    @settings(max_examples=100)
    def test_matches_oracle(self, dets, gts):
        """Test agreement with exhaustive prefix enumeration."""
        assert average_precision(dets, gts, 1) == pytest.approx(oracle_ap(dets, gts, 1))

    def test_matches_oracle_on_random_cases(self):
        """Test exact agreement with the prefix enumeration on 1000 random cases."""
        rng = np.random.default_rng(17)

        def box():
            x, y = (int(v) for v in rng.integers(0, 7, 2))
            w, h = (int(v) for v in rng.integers(1, 5, 2))
            return Box(x, y, x + w, y + h)

        for trial in range(1000):
            n_gt = rng.integers(1, 4)
            gts = [GroundTruth(int(rng.integers(0, 2)), 1, box()) for _ in range(n_gt)]
            n_det = rng.integers(0, 7)
            scores = [float(rng.choice([0.2, 0.5, 0.8, rng.random()])) for _ in range(n_det)]
            dets = [Detection(int(rng.integers(0, 2)), 1, box(), score) for score in scores]
            assert abs(average_precision(dets, gts, 1) - oracle_ap(dets, gts, 1)) <= 1e-12, trial

    @given(st.lists(detections(), max_size=8), st.lists(ground_truths(), min_size=1, max_size=4))
    @settings(max_examples=100)
    def test_bounded_and_zero_score_fp(self, dets, gts):
        """Test that AP lies in [0, 1] and a zero-score false positive never raises it."""
        ap = average_precision(dets, gts, 1)
        assert 0.0 <= ap <= 1.0
        worse = average_precision(dets + [Detection(0, 1, Box(50, 50, 51, 51), 0.0)], gts, 1)
        assert worse <= ap + 1e-12


class TestMeanAp:
    """Test mean AP over classes."""

    def test_single_class(self):
        """Test that one class's mAP equals its AP."""
        gts = [GroundTruth(0, 1, Box(0, 0, 5, 5))]
        dets = [Detection(0, 1, Box(0, 0, 5, 5), 0.5)]
        assert mean_ap(dets, gts, 1) == average_precision(dets, gts, 1)

    def test_mix(self):
        """Test the mean of a perfect class and a half-recalled class."""
        gts = [
            GroundTruth(0, 1, Box(0, 0, 5, 5)),
            GroundTruth(0, 2, Box(10, 10, 15, 15)),
            GroundTruth(1, 2, Box(10, 10, 15, 15)),
        ]
        dets = [Detection(0, 1, Box(0, 0, 5, 5), 0.9), Detection(0, 2, Box(10, 10, 15, 15), 0.9)]
        assert mean_ap(dets, gts, 2) == pytest.approx(0.75)

    def test_classes_without_truth_are_skipped(self):
        """Test that classes with no ground truth do not count."""
        gts = [GroundTruth(0, 1, Box(0, 0, 5, 5))]
        dets = [Detection(0, 1, Box(0, 0, 5, 5), 0.9), Detection(0, 3, Box(0, 0, 5, 5), 0.9)]
        assert mean_ap(dets, gts, 3) == 1.0


class TestCorLoc:
    """Test correct localization."""

    def test_all_hits(self):
        """Test that the exact box on every positive image scores 1."""
        gts = [GroundTruth(0, 1, Box(0, 0, 5, 5)), GroundTruth(1, 1, Box(2, 2, 6, 6))]
        dets = [Detection(0, 1, Box(0, 0, 5, 5), 0.4), Detection(1, 1, Box(2, 2, 6, 6), 0.3)]
        assert corloc(dets, gts).mean == 1.0

    def test_all_misses(self):
        """Test that disjoint boxes score 0."""
        gts = [GroundTruth(0, 1, Box(0, 0, 5, 5))]
        assert corloc([Detection(0, 1, Box(10, 10, 12, 12), 0.9)], gts).mean == 0.0

    def test_half(self):
        """Test two positive images with one hit."""
        gts = [GroundTruth(0, 1, Box(0, 0, 5, 5)), GroundTruth(1, 1, Box(0, 0, 5, 5))]
        dets = [Detection(0, 1, Box(0, 0, 5, 5), 0.9), Detection(1, 1, Box(10, 10, 12, 12), 0.9)]
        assert corloc(dets, gts).per_class == {1: 0.5}

    def test_missing_candidate_is_a_miss(self):
        """Test that a positive image with no detection counts as a miss."""
        gts = [GroundTruth(0, 1, Box(0, 0, 5, 5)), GroundTruth(1, 1, Box(0, 0, 5, 5))]
        assert corloc([Detection(0, 1, Box(0, 0, 5, 5), 0.9)], gts).per_class == {1: 0.5}

    def test_top_box_only(self):
        """Test that only the highest-scoring box per image and class counts."""
        dets = [
            Detection(0, 1, Box(10, 10, 12, 12), 0.9),
            Detection(0, 1, Box(0, 0, 5, 5), 0.1),
        ]
        top = top1_per_image_class(dets)
        assert top == [dets[0]]
        assert corloc(dets, [GroundTruth(0, 1, Box(0, 0, 5, 5))]).mean == 0.0


class TestPseudoGtQuality:
    """Test pseudo ground-truth diagnostics."""

    def test_perfect(self):
        """Test that exact pseudo boxes recall everything without merges."""
        truth = [GroundTruth(0, 1, Box(0, 0, 10, 10)), GroundTruth(0, 1, Box(20, 0, 30, 10))]
        pseudo = PseudoGtSet(tuple(PseudoGt(g.box, 1.0, 1) for g in truth))
        report = pseudo_gt_quality(pseudo, truth)
        assert report.recall == 1.0
        assert report.merge_count == 0
        assert report.totals.mean_best_iou == 1.0

    def test_merge(self):
        """Test that one box spanning two instances counts as a merge."""
        truth = [GroundTruth(0, 1, Box(0, 0, 10, 10)), GroundTruth(0, 1, Box(10, 0, 20, 10))]
        pseudo = PseudoGtSet((PseudoGt(Box(0, 0, 20, 10), 1.0, 1),))
        assert pseudo_gt_quality(pseudo, truth).merge_count == 1

    def test_part_only(self):
        """Test that a small box inside an instance counts as a part."""
        truth = [GroundTruth(0, 1, Box(0, 0, 10, 10))]
        pseudo = PseudoGtSet((PseudoGt(Box(2, 2, 5, 5), 1.0, 1),))
        report = pseudo_gt_quality(pseudo, truth)
        assert report.part_only_count == 1
        assert report.recall == 0.0

    def test_empty_pseudo(self):
        """Test that no pseudo boxes give zero recall."""
        truth = [GroundTruth(0, 1, Box(0, 0, 10, 10))]
        assert pseudo_gt_quality(PseudoGtSet(), truth).recall == 0.0

    def test_aggregate(self):
        """Test that per-image reports pool into totals."""
        truth_a = [GroundTruth(0, 1, Box(0, 0, 10, 10))]
        truth_b = [GroundTruth(1, 1, Box(0, 0, 10, 10))]
        hit = PseudoGtSet((PseudoGt(Box(0, 0, 10, 10), 1.0, 1),))
        total = aggregate_quality(
            [pseudo_gt_quality(hit, truth_a), pseudo_gt_quality(PseudoGtSet(), truth_b)]
        )
        assert total.totals.num_instances == 2
        assert total.recall == 0.5
        assert total.to_dict()["overall"]["recall"] == 0.5


class TestEvaluateDetections:
    """Test the combined metrics report."""

    def test_perfect(self):
        """Test perfect detections give mAP 1."""
        gts = [GroundTruth(0, 1, Box(0, 0, 5, 5)), GroundTruth(0, 2, Box(5, 5, 9, 9))]
        dets = [Detection(g.image_id, g.class_id, g.box, 0.9) for g in gts]
        metrics = evaluate_detections(dets, gts, 2)
        assert metrics["map"] == 1.0
        assert metrics["mcorloc"] == 1.0
        assert metrics["metric"] == "all_points"

    def test_empty_detections(self):
        """Test that no detections give mAP 0."""
        metrics = evaluate_detections([], [GroundTruth(0, 1, Box(0, 0, 5, 5))], 1)
        assert metrics["map"] == 0.0
        assert metrics["mcorloc"] == 0.0

    def test_eleven_point_switch(self):
        """Test that the metric name follows the config."""
        metrics = evaluate_detections([], [], 1, EvalConfig(use_07_metric=True))
        assert metrics["metric"] == "voc07_11point"


class TestCsvFiles:
    """Test the detection and ground-truth CSV formats."""

    def test_parse_with_header(self):
        """Test parsing rows after a header line."""
        dets = parse_detections("image_id,class_id,x1,y1,x2,y2,score\n3,2,0,0,4,5,0.75\n")
        assert dets == [Detection(3, 2, Box(0, 0, 4, 5), 0.75)]

    def test_ground_truth_ignores_score(self):
        """Test that a trailing score column in a ground-truth file is ignored."""
        gts = parse_ground_truth("1,1,0,0,2,2,0.5\n")
        assert gts == [GroundTruth(1, 1, Box(0, 0, 2, 2))]

    @pytest.mark.parametrize(
        "text",
        ["0,1,0,0,1\n", "0,1,0,0,1,1,x\n", "0,1,5,5,1,1,0.5\n", "0,1,0,0,1,1,nan\n"],
    )
    def test_rejects_malformed(self, text):
        """Test that malformed detection rows are bad input."""
        with pytest.raises(BadInputError):
            parse_detections(text)

    def test_format_parses_back(self):
        """Test that formatted rows parse to the same records."""
        dets = [Detection(0, 1, Box(0.5, 1, 3, 4.25), 0.125)]
        gts = [GroundTruth(2, 3, Box(1, 1, 2, 2))]
        assert parse_detections(format_detections(dets)) == dets
        assert parse_ground_truth(format_ground_truth(gts)) == gts

    @pytest.mark.asyncio
    async def test_read_file(self, tmp_path):
        """Test reading detections from disk."""
        path = tmp_path / "dets.csv"
        path.write_text("0,1,0,0,1,1,0.5\n")
        assert len(await read_detections(path)) == 1

    @pytest.mark.asyncio
    async def test_missing_file(self, tmp_path):
        """Test that a missing file is bad input."""
        with pytest.raises(BadInputError):
            await read_detections(tmp_path / "missing.csv")
