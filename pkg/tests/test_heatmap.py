"""Tests for heatmap export and CAM localization scores."""

import math

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from camds.errors import ShapeError
from camds.heatmap import (
    activation_ratio,
    colorize,
    export_cam,
    mean_activation_ratio,
    normalize_heatmap,
    overlay,
    upsample_nearest,
)
from camds.images import read_pnm


class TestHeatmap:
    def test_upsample_nearest(self):
        out = upsample_nearest(np.array([[1.0, 2.0], [3.0, 4.0]]), 4)
        assert out.shape == (4, 4)
        assert_array_equal(out[:2, :2], 1.0)
        assert_array_equal(out[2:, 2:], 4.0)
        with pytest.raises(ShapeError):
            upsample_nearest(np.ones((3, 3)), 4)

    def test_single_hot_cell_fills_one_block(self, tmp_path):
        cam = np.zeros((8, 8))
        cam[3, 5] = 2.0
        gray = export_cam(cam, tmp_path / "hot.pgm", size=256)
        block = np.zeros((256, 256), dtype=bool)
        block[96:128, 160:192] = True
        assert_array_equal(gray[block], 255)
        assert_array_equal(gray[~block], 0)
        raster, _ = read_pnm(tmp_path / "hot.pgm")
        assert_array_equal(raster[:, :, 0], gray)

    def test_normalize_scales_by_max(self):
        gray = normalize_heatmap(np.array([[0.0, 1.0], [2.0, 4.0]]))
        assert_array_equal(gray, [[0, 64], [128, 255]])

    def test_all_zero_map(self):
        assert_array_equal(normalize_heatmap(np.zeros((2, 2))), np.zeros((2, 2), dtype=np.uint8))

    def test_negative_input_rejected(self):
        with pytest.raises(ValueError):
            normalize_heatmap(np.array([[-1.0, 1.0]]))

    def test_colormap_ends(self):
        colors = colorize(np.array([[0, 255]], dtype=np.uint8))
        assert colors.shape == (1, 2, 3)
        np.testing.assert_allclose(colors[0, 0], [0.0, 0.0, 0.5])
        np.testing.assert_allclose(colors[0, 1], [0.5, 0.0, 0.0])

    def test_overlay_blends_half(self):
        image = np.zeros((3, 2, 2))
        out = overlay(image, np.full((2, 2), 255, dtype=np.uint8))
        assert out.dtype == np.uint8
        assert_array_equal(out[0, 0], [64, 0, 0])
        with pytest.raises(ShapeError):
            overlay(image, np.zeros((3, 3), dtype=np.uint8))

    def test_export_writes_files(self, tmp_path):
        cam = np.array([[0.0, 1.0], [0.5, 0.0]])
        image = np.full((3, 8, 8), 0.5)
        gray = export_cam(
            cam, tmp_path / "h.pgm", size=8, image=image, overlay_path=tmp_path / "o.ppm"
        )
        raster, _ = read_pnm(tmp_path / "h.pgm")
        assert raster.shape == (8, 8, 1)
        assert_array_equal(raster[:, :, 0], gray)
        assert gray.max() == 255
        overlay_raster, _ = read_pnm(tmp_path / "o.ppm")
        assert overlay_raster.shape == (8, 8, 3)

    def test_export_zero_map(self, tmp_path):
        gray = export_cam(np.zeros((2, 2)), tmp_path / "h.pgm", size=4)
        assert not gray.any()
        assert (tmp_path / "h.pgm").exists()


class TestActivationRatio:
    def test_inside_versus_outside(self):
        cam = np.array([[4.0, 1.0], [1.0, 1.0]])
        mask = np.zeros((4, 4), dtype=bool)
        mask[:2, :2] = True
        assert activation_ratio(cam, mask) == pytest.approx(4.0)

    def test_negative_activations_are_clamped(self):
        cam = np.array([[2.0, -5.0], [1.0, 1.0]])
        mask = np.zeros((2, 2), dtype=bool)
        mask[0, 0] = True
        assert activation_ratio(cam, mask) == pytest.approx(2.0 / (2.0 / 3.0))

    @pytest.mark.parametrize("fill", [True, False])
    def test_degenerate_masks(self, fill):
        assert math.isnan(activation_ratio(np.ones((2, 2)), np.full((2, 2), fill)))

    def test_zero_outside(self):
        cam = np.array([[1.0, 0.0], [0.0, 0.0]])
        assert math.isnan(activation_ratio(cam, np.array([[True, False], [False, False]])))

    def test_pooled_ratio(self):
        masks = [np.array([[True, False], [False, False]])] * 2
        cams = [np.array([[3.0, 1.0], [1.0, 1.0]]), np.array([[1.0, 1.0], [1.0, 1.0]])]
        # inside mean (3 + 1) / 2, outside mean 6 / 6
        assert mean_activation_ratio(cams, masks) == pytest.approx(2.0)
