"""Tests for the overlay renderer."""

import numpy as np
import pytest

from wsod_labels.geometry import Box
from wsod_labels.hgps import ClusterSet, HgpsConfig, build_clusters
from wsod_labels.overlay import (
    HIGH_COLOR,
    LOW_COLOR,
    MEMBER_COLOR,
    draw_rectangle,
    encode_ppm,
    render_overlay,
    write_ppm,
)
from wsod_labels.synth import SynthConfig, generate_scene


class TestDrawRectangle:
    """Test outline drawing."""

    def test_outline(self):
        """Test that only the border of the box is painted."""
        image = np.zeros((6, 6, 3), dtype=np.uint8)
        draw_rectangle(image, Box(1, 1, 4, 4), (255, 0, 0))
        painted = image[:, :, 0] == 255
        assert painted[1, 1:4].all() and painted[3, 1:4].all()
        assert painted[1:4, 1].all() and painted[1:4, 3].all()
        assert not painted[2, 2]
        assert painted.sum() == 8

    def test_clipped_to_image(self):
        """Test that boxes past the border are clipped."""
        image = np.zeros((4, 4, 3), dtype=np.uint8)
        draw_rectangle(image, Box(-3, -3, 10, 10), (0, 255, 0))
        assert image[0, :, 1].all() and image[:, 3, 1].all()


class TestRenderOverlay:
    """Test overlay rendering."""

    def test_scene(self):
        """Test an overlay of a generated scene."""
        bundle = generate_scene(SynthConfig(), 2)
        cfg = HgpsConfig()
        clusters = build_clusters(
            bundle.heatmaps, bundle.image_labels, bundle.proposals, cfg, (96, 96)
        )
        image = render_overlay(bundle.heatmaps, clusters, cfg)
        assert image.shape == (96, 96, 3)
        assert image.dtype == np.uint8
        colors = {tuple(int(v) for v in px) for px in image.reshape(-1, 3)}
        assert LOW_COLOR in colors
        assert HIGH_COLOR in colors
        if any(c.proposal_indices() for c in clusters):
            assert MEMBER_COLOR in colors

    def test_requires_heatmaps(self):
        """Test that an overlay without heatmaps is rejected."""
        with pytest.raises(ValueError):
            render_overlay({}, ClusterSet(0), HgpsConfig())


class TestPpm:
    """Test PPM encoding."""

    def test_header(self):
        """Test the binary pixmap header and payload size."""
        data = encode_ppm(np.zeros((2, 4, 3), dtype=np.uint8))
        assert data.startswith(b"P6\n4 2\n255\n")
        assert len(data) == len(b"P6\n4 2\n255\n") + 24

    @pytest.mark.asyncio
    async def test_write(self, tmp_path):
        """Test writing an overlay to disk."""
        path = tmp_path / "overlay.ppm"
        image = np.full((3, 3, 3), 7, dtype=np.uint8)
        await write_ppm(path, image)
        assert path.read_bytes() == encode_ppm(image)
