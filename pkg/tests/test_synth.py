"""Tests for the synthetic scene generator and oracles."""

import json

import numpy as np
import pytest

from wsod_labels.geometry import Box
from wsod_labels.heatmap import Level, threshold_regions
from wsod_labels.hgps import HgpsConfig, MemberKind, build_clusters
from wsod_labels.synth import (
    PRNG_ALGORITHM,
    Instance,
    Scene,
    FeatureModel,
    SplitMix64,
    SynthConfig,
    bundle_dict,
    generate_scene,
    generate_suite,
    oracle_cluster_enumeration,
    oracle_connected_components,
    read_bundle,
    read_proposals,
    read_suite,
    render_heatmaps,
    scene_seeds,
    write_bundle,
)


def _gap(a: Box, b: Box) -> float:
    return max(a.x1 - b.x2, b.x1 - a.x2, a.y1 - b.y2, b.y1 - a.y2)


class TestSplitMix64:
    """Test the SplitMix64 class."""

    def test_reference_values(self):
        """Test the first outputs for seed 0 against the published sequence."""
        rng = SplitMix64(0)
        assert rng.next_u64() == 0xE220A8397B1DCDAF
        assert rng.next_u64() == 0x6E789E6AA1B965F4

    def test_block_draws_match_single_draws(self):
        """Test that a vectorized block equals repeated single draws."""
        a, b = SplitMix64(123), SplitMix64(123)
        block = a.uniform_array(50)
        singles = np.array([b.uniform() for _ in range(50)])
        np.testing.assert_array_equal(block, singles)
        assert a.state == b.state

    def test_uniform_range(self):
        """Test that uniform draws lie in [0, 1)."""
        values = SplitMix64(7).uniform_array(1000)
        assert values.min() >= 0.0
        assert values.max() < 1.0

    def test_randint_inclusive(self):
        """Test that randint covers both ends."""
        rng = SplitMix64(9)
        draws = {rng.randint(2, 4) for _ in range(200)}
        assert draws == {2, 3, 4}

    def test_shuffle_is_permutation(self):
        """Test that shuffling keeps every item."""
        items = list(range(20))
        assert sorted(SplitMix64(3).shuffle(items)) == items

    def test_streams_differ(self):
        """Test that sub-streams of one seed are distinct."""
        assert SplitMix64.for_stream(5, 0).next_u64() != SplitMix64.for_stream(5, 1).next_u64()


class TestSynthConfig:
    """Test the SynthConfig class."""

    def test_defaults_valid(self):
        """Test that the defaults fit their grid."""
        cfg = SynthConfig()
        assert cfg.cell == 30
        assert cfg.grid_shape == (3, 3)

    def test_instance_overflow(self):
        """Test that more instances than cells is rejected."""
        with pytest.raises(ValueError):
            SynthConfig(width=40, height=40)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"core_ratio": 1.2},
            {"min_size": 2},
            {"pair_gap": 10},
            {"max_present": 5},
            {"noise": -1.0},
            {"feature_dim": 4},
            {"clutter_scale": -1.0},
            {"context_factor": 0.5},
        ],
    )
    def test_rejects_bad_values(self, kwargs):
        """Test that invalid parameters are rejected."""
        with pytest.raises(ValueError):
            SynthConfig(**kwargs)


class TestHeatmapModel:
    """Test the closed-form heatmap geometry."""

    def test_single_instance(self):
        """Test that one instance gives one region at each threshold."""
        cfg = SynthConfig(noise=0.0)
        scene = Scene(96, 96, (Instance(1, Box(30, 30, 50, 50)),), seed=0)
        hm = render_heatmaps(scene, cfg)[1]
        assert len(threshold_regions(hm, 0.8)) == 1
        assert len(threshold_regions(hm, 0.3)) == 1

    def test_close_pair_shares_a_low_region(self):
        """Test that two instances 4 px apart merge at the low threshold only."""
        cfg = SynthConfig(noise=0.0)
        scene = Scene(
            96,
            96,
            (Instance(1, Box(10, 30, 42, 62), 0), Instance(1, Box(46, 30, 78, 62), 0)),
            seed=0,
        )
        hm = render_heatmaps(scene, cfg)[1]
        assert len(threshold_regions(hm, 0.3, Level.LOW)) == 1
        assert len(threshold_regions(hm, 0.8, Level.HIGH)) == 2

    def test_high_box_inside_instance(self):
        """Test that the high box lies inside the instance and the low box covers it."""
        cfg = SynthConfig(noise=0.0)
        inst = Box(30, 30, 50, 50)
        hm = render_heatmaps(Scene(96, 96, (Instance(1, inst),), seed=0), cfg)[1]
        (high,) = threshold_regions(hm, 0.8)
        (low,) = threshold_regions(hm, 0.3)
        assert inst.x1 <= high.box.x1 and high.box.x2 <= inst.x2
        assert low.box.x1 <= inst.x1 and inst.x2 <= low.box.x2


class TestGenerateScene:
    """Test scene generation."""

    def test_deterministic(self):
        """Test that one seed always yields the same bundle."""
        cfg = SynthConfig()
        a, b = generate_scene(cfg, 42), generate_scene(cfg, 42)
        assert json.dumps(bundle_dict(a)) == json.dumps(bundle_dict(b))
        for class_id in a.heatmaps:
            np.testing.assert_array_equal(a.heatmaps[class_id].values, b.heatmaps[class_id].values)

    def test_no_instances(self):
        """Test that an empty scene has zero labels and no ground truth."""
        bundle = generate_scene(SynthConfig(min_present=0, max_present=0), 1)
        assert not bundle.image_labels.any()
        assert bundle.gt == []
        assert bundle.heatmaps == {}
        assert bundle.features.shape == (len(bundle.proposals), SynthConfig().feature_dim)

    @pytest.mark.parametrize("seed", range(20))
    def test_layout_keeps_gaps(self, seed):
        """Test that instances not in one pair keep the configured gap."""
        cfg = SynthConfig()
        bundle = generate_scene(cfg, seed)
        instances = bundle.scene.instances
        for i, a in enumerate(instances):
            for b in instances[i + 1 :]:
                if a.pair is not None and a.pair == b.pair:
                    assert _gap(a.box, b.box) == cfg.pair_gap
                else:
                    assert _gap(a.box, b.box) >= cfg.gap

    @pytest.mark.parametrize("seed", range(20))
    def test_one_cluster_per_instance(self, seed):
        """Test that clustering a generated scene finds every instance once."""
        bundle = generate_scene(SynthConfig(), seed)
        size = (bundle.scene.width, bundle.scene.height)
        clusters = build_clusters(
            bundle.heatmaps, bundle.image_labels, bundle.proposals, HgpsConfig(), size
        )
        assert len(clusters) == len(bundle.scene.instances)

    def test_labels_match_instances(self):
        """Test that image labels and ground truth follow the instances."""
        bundle = generate_scene(SynthConfig(), 3)
        classes = {inst.class_id for inst in bundle.scene.instances}
        assert {c + 1 for c, y in enumerate(bundle.image_labels) if y} == classes
        assert set(bundle.heatmaps) == classes
        assert len(bundle.gt) == len(bundle.scene.instances)

    def test_features_follow_rows(self):
        """Test that feature rows can be regenerated from the feature model."""
        bundle = generate_scene(SynthConfig(), 4)
        np.testing.assert_array_equal(bundle.box_features(bundle.proposals, 0), bundle.features)

    def test_proposal_kinds(self):
        """Test that every proposal has a kind and a source."""
        bundle = generate_scene(SynthConfig(), 5)
        assert len(bundle.proposal_kinds) == len(bundle.proposals) == len(bundle.proposal_sources)
        assert bundle.proposal_kinds.count("random") == SynthConfig().n_random

    def test_suite(self):
        """Test that a suite has one bundle per seed with distinct ids."""
        bundles = generate_suite(SynthConfig(), 0, 5)
        assert [b.image_id for b in bundles] == [0, 1, 2, 3, 4]
        assert [b.scene.seed for b in bundles] == scene_seeds(0, 5)
        assert generate_suite(SynthConfig(), 0, 0) == []


class TestFeatureModel:
    """Test the FeatureModel class."""

    @pytest.fixture
    def model(self):
        """Test fixture: a noiseless feature model with strong clutter."""
        return FeatureModel.from_config(SynthConfig(feature_noise=0.0, clutter_scale=4.0), 3)

    @pytest.fixture
    def instances(self):
        """Test fixture: one class-2 instance."""
        return (Instance(2, Box(10, 10, 20, 20)),)

    def test_is_far(self, model, instances):
        """Test that only boxes outside the doubled instance box are far."""
        assert model.is_far(Box(30, 30, 40, 40), instances)
        assert not model.is_far(Box(22, 12, 24, 14), instances)
        assert not model.is_far(Box(0, 0, 96, 96), instances)
        assert model.is_far(Box(0, 0, 4, 4), ())

    def test_prototypes(self, model, instances):
        """Test the far, near and object rows of a noiseless model."""
        far, near, obj = model.box_features(
            [Box(30, 30, 40, 40), Box(22, 12, 24, 14), Box(10, 10, 20, 20)], instances
        )
        assert far[0] == 0.0 and far[1] == 4.0
        np.testing.assert_array_equal(far[3:], 0.0)
        np.testing.assert_array_equal(near, model.near_mean)
        np.testing.assert_array_equal(obj, model.class_means[1])

    def test_far_rows_spread(self, model, instances):
        """Test that far rows differ only along the spread axis."""
        boxes = [Box(30 + i, 30, 40 + i, 40) for i in range(8)]
        rows = model.box_features(boxes, instances)
        np.testing.assert_array_equal(rows[:, 1], 4.0)
        assert np.unique(rows[:, 2]).size == len(boxes)

    def test_dict_roundtrip(self, model):
        """Test that the model survives its dict form."""
        again = FeatureModel.from_dict(json.loads(json.dumps(model.to_dict())))
        np.testing.assert_array_equal(again.far_mean, model.far_mean)
        assert again.context_factor == model.context_factor


class TestOracles:
    """Test the brute-force oracles."""

    def test_empty_mask(self):
        """Test that an empty mask has no regions."""
        assert oracle_connected_components(np.zeros((3, 3), dtype=bool)) == []

    def test_full_mask(self):
        """Test that a full mask is one region."""
        assert len(oracle_connected_components(np.ones((3, 3), dtype=bool))) == 1

    def test_checkerboard(self):
        """Test that a checkerboard is one region under 8-connectivity only."""
        mask = (np.indices((3, 3)).sum(axis=0) % 2) == 0
        assert len(oracle_connected_components(mask, 8)) == 1
        assert len(oracle_connected_components(mask, 4)) == 5

    def test_clusters_without_proposals(self):
        """Test that without proposals every cluster holds only its synthetic box."""
        bundle = generate_scene(SynthConfig(), 6)
        clusters = oracle_cluster_enumeration(
            bundle.heatmaps, bundle.image_labels, [], HgpsConfig(), (96, 96)
        )
        assert len(clusters) >= 1
        assert all(len(c.members) == 1 and c.members[0].is_synthetic for c in clusters)

    def test_singleton_without_high(self):
        """Test that a low region without a high region gives a low-box singleton."""
        cfg = SynthConfig(noise=0.0)
        hm = render_heatmaps(Scene(96, 96, (Instance(1, Box(30, 30, 50, 50)),), seed=0), cfg)[1]
        capped = type(hm)(np.minimum(hm.values, 0.5), 1)
        clusters = oracle_cluster_enumeration({1: capped}, [1], [], HgpsConfig(), (96, 96))
        (cluster,) = list(clusters)
        assert cluster.members[0].kind == MemberKind.LOW_BOX
        assert cluster.high_region is None


class TestBundleFiles:
    """Test writing and reading scene bundles."""

    @pytest.mark.asyncio
    async def test_write_then_read(self, tmp_path):
        """Test that a written bundle reads back with the same content."""
        bundle = generate_scene(SynthConfig(), 8, image_id=3)
        path = await write_bundle(bundle, tmp_path)
        assert path.name == "scene_0003"
        loaded = await read_bundle(path)
        assert bundle_dict(loaded) == bundle_dict(bundle)
        for class_id, hm in bundle.heatmaps.items():
            np.testing.assert_array_equal(loaded.heatmaps[class_id].values, hm.values)

    @pytest.mark.asyncio
    async def test_read_suite_in_name_order(self, tmp_path):
        """Test that a directory without a manifest is read in name order."""
        for bundle in generate_suite(SynthConfig(), 1, 3):
            await write_bundle(bundle, tmp_path)
        loaded = await read_suite(tmp_path)
        assert [b.image_id for b in loaded] == [0, 1, 2]

    @pytest.mark.asyncio
    async def test_read_proposals_list(self, tmp_path):
        """Test reading a plain proposal list."""
        path = tmp_path / "proposals.json"
        path.write_text("[[0, 0, 4, 4], [1, 2, 3, 5]]")
        assert await read_proposals(path) == [Box(0, 0, 4, 4), Box(1, 2, 3, 5)]

    def test_prng_name(self):
        """Test the advertised generator name."""
        assert PRNG_ALGORITHM == "splitmix64"
