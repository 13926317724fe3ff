"""Augmentation pipeline tests: hand values, invariants, and a golden run."""

import os

import numpy as np
import pytest
from numpy.testing import assert_allclose

from mixvae.augment import (
    AugmentConfig, center_crop, center_fit, crop, denormalize, flip_h, flip_v,
    normalize, pipeline, resize_bilinear, rotate, zoom,
)
from mixvae.autodiff import Rng
from mixvae.data import load_image
from mixvae.errors import ConfigError, ShapeError

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def gradient_image(h, w):
    """Smooth test card: distinct per-channel gradients."""
    y = np.linspace(0.0, 1.0, h)[:, None]
    x = np.linspace(0.0, 1.0, w)[None, :]
    return np.stack([y * np.ones_like(x), np.ones_like(y) * x, 0.5 * (y + x) / 1.0],
                    axis=2)


class TestResize:
    def test_hand_values_row_upsample(self):
        # one row [0, 1] widened to 4: half-pixel sampling gives
        # src_x = [-0.25, 0.25, 0.75, 1.25] -> clamped -> [0, 0.25, 0.75, 1]
        img = np.zeros((1, 2, 3))
        img[0, 1] = 1.0
        out = resize_bilinear(img, 1, 4)
        assert_allclose(out[0, :, 0], [0.0, 0.25, 0.75, 1.0], atol=1e-12)

    def test_hand_values_downsample(self):
        # [0, 1, 2, 3] halved: src_x = [0.5, 2.5] -> midpoints 0.5 and 2.5
        img = np.arange(4.0).reshape(1, 4, 1) * np.ones((1, 1, 3))
        out = resize_bilinear(img, 1, 2)
        assert_allclose(out[0, :, 0], [0.5, 2.5], atol=1e-12)

    def test_constant_image_preserved(self):
        img = np.full((7, 5, 3), 0.37)
        for h, w in [(3, 3), (14, 10), (7, 5), (1, 1)]:
            assert_allclose(resize_bilinear(img, h, w), np.full((h, w, 3), 0.37),
                            atol=1e-12)

    def test_identity_resize(self):
        nprng = np.random.default_rng(0)
        img = nprng.random((6, 8, 3))
        assert_allclose(resize_bilinear(img, 6, 8), img, atol=1e-12)

    def test_bad_target_rejected(self):
        with pytest.raises(ConfigError):
            resize_bilinear(np.zeros((4, 4, 3)), 0, 4)


class TestRotate:
    def test_zero_angle_identity(self):
        nprng = np.random.default_rng(1)
        img = nprng.random((5, 5, 3))
        assert_allclose(rotate(img, 0.0), img)

    def test_quarter_turn_moves_corner_mass_clockwise(self):
        img = np.zeros((9, 9, 3))
        img[0, 8] = 1.0  # top-right
        out = rotate(img, 90.0)
        # clockwise as displayed: top-right content lands bottom-right
        assert out[8, 8, 0] > 0.9
        assert out[0, 8, 0] < 0.1

    def test_reflection_conjugation_flips_direction(self):
        # mirroring, rotating, mirroring back equals rotating the other way
        nprng = np.random.default_rng(6)
        img = nprng.random((9, 9, 3))
        assert_allclose(rotate(img, -37.0),
                        flip_h(rotate(flip_h(img), 37.0)), atol=1e-12)

    def test_interior_constant_preserved(self):
        # away from the borders a constant image stays constant under rotation
        img = np.full((11, 11, 3), 0.6)
        out = rotate(img, 30.0)
        assert_allclose(out[4:7, 4:7], np.full((3, 3, 3), 0.6), atol=1e-12)

    def test_outside_fill_is_zero(self):
        img = np.ones((9, 9, 3))
        out = rotate(img, 45.0)
        assert out[0, 0, 0] == 0.0  # corners fall outside the rotated square


class TestZoomAndCrops:
    def test_zoom_identity(self):
        nprng = np.random.default_rng(2)
        img = nprng.random((8, 8, 3))
        assert_allclose(zoom(img, 1.0), img)

    def test_zoom_preserves_shape(self):
        img = np.ones((10, 12, 3))
        for s in (0.8, 1.2, 0.5, 2.0):
            assert zoom(img, s).shape == (10, 12, 3)

    def test_zoom_out_pads_with_zero(self):
        img = np.ones((10, 10, 3))
        out = zoom(img, 0.5)
        assert out[0, 0, 0] == 0.0
        assert out[5, 5, 0] == 1.0

    def test_center_fit_crop_and_pad(self):
        img = np.arange(16.0).reshape(4, 4, 1) * np.ones((1, 1, 3))
        cropped = center_fit(img, 2, 2)
        assert_allclose(cropped[:, :, 0], [[5.0, 6.0], [9.0, 10.0]])
        padded = center_fit(img, 6, 6)
        assert padded[0, 0, 0] == 0.0
        assert_allclose(padded[1:5, 1:5, 0], img[:, :, 0])

    def test_crop_offsets(self):
        img = np.arange(24.0).reshape(4, 6, 1) * np.ones((1, 1, 3))
        out = crop(img, 1, 2, 2, 3)
        assert_allclose(out[:, :, 0], [[8.0, 9.0, 10.0], [14.0, 15.0, 16.0]])

    def test_crop_bounds_checked(self):
        img = np.zeros((4, 4, 3))
        with pytest.raises(ShapeError):
            crop(img, 3, 0, 2, 2)
        with pytest.raises(ShapeError):
            crop(img, 0, 0, 5, 2)

    def test_center_crop_even_and_odd(self):
        img = np.arange(25.0).reshape(5, 5, 1) * np.ones((1, 1, 3))
        assert_allclose(center_crop(img, 3, 3)[:, :, 0],
                        img[1:4, 1:4, 0])
        assert_allclose(center_crop(img, 2, 2)[:, :, 0], img[1:3, 1:3, 0])


class TestFlips:
    def test_involutions(self):
        nprng = np.random.default_rng(3)
        img = nprng.random((6, 7, 3))
        assert_allclose(flip_h(flip_h(img)), img)
        assert_allclose(flip_v(flip_v(img)), img)

    def test_flip_h_moves_columns(self):
        img = np.zeros((2, 3, 3))
        img[:, 0] = 1.0
        assert_allclose(flip_h(img)[:, 2], np.ones((2, 3)))

    def test_flips_commute(self):
        nprng = np.random.default_rng(4)
        img = nprng.random((5, 5, 3))
        assert_allclose(flip_h(flip_v(img)), flip_v(flip_h(img)))


class TestNormalize:
    def test_roundtrip(self):
        nprng = np.random.default_rng(5)
        img = nprng.random((4, 4, 3))
        mean, std = (0.485, 0.456, 0.406), (0.229, 0.224, 0.225)
        assert_allclose(denormalize(normalize(img, mean, std), mean, std), img,
                        atol=1e-12)

    def test_mean_image_maps_to_zero(self):
        mean, std = (0.4, 0.5, 0.6), (0.2, 0.2, 0.2)
        img = np.ones((2, 2, 3)) * np.asarray(mean)
        assert_allclose(normalize(img, mean, std), np.zeros((2, 2, 3)), atol=1e-12)

    def test_zero_std_rejected(self):
        with pytest.raises(ConfigError):
            normalize(np.zeros((2, 2, 3)), (0, 0, 0), (1, 1, 0))


class TestPipeline:
    def small_config(self, mode):
        return AugmentConfig(resize_to=(10, 10), crop_to=(8, 8),
                             rotation_range_deg=(-15, 15), zoom_range=(0.9, 1.1),
                             normalize_mean=(0.5, 0.5, 0.5),
                             normalize_std=(0.25, 0.25, 0.25), mode=mode)

    def test_output_shape_and_layout(self):
        out = pipeline(gradient_image(12, 16), self.small_config("train"), Rng(0))
        assert out.shape == (3, 8, 8)

    def test_train_determinism(self):
        img = gradient_image(12, 16)
        cfg = self.small_config("train")
        a = pipeline(img, cfg, Rng(99)).data
        b = pipeline(img, cfg, Rng(99)).data
        assert np.array_equal(a, b)
        c = pipeline(img, cfg, Rng(100)).data
        assert not np.array_equal(a, c)

    def test_test_mode_ignores_rng(self):
        img = gradient_image(12, 16)
        cfg = self.small_config("test")
        a = pipeline(img, cfg, Rng(1)).data
        b = pipeline(img, cfg, None).data
        assert np.array_equal(a, b)

    def test_test_mode_is_resize_centercrop_normalize(self):
        img = gradient_image(12, 16)
        cfg = self.small_config("test")
        expect = resize_bilinear(img, 10, 10)
        expect = center_crop(expect, 8, 8)
        expect = normalize(np.clip(expect, 0.0, 1.0), cfg.normalize_mean,
                           cfg.normalize_std)
        assert_allclose(pipeline(img, cfg, None).data,
                        expect.transpose(2, 0, 1), atol=1e-12)

    def test_values_clipped_before_normalize(self):
        cfg = self.small_config("test")
        out = pipeline(np.full((12, 12, 3), 2.0), cfg, None).data
        assert_allclose(out, np.full((3, 8, 8), (1.0 - 0.5) / 0.25), atol=1e-12)

    def test_invalid_mode_rejected(self):
        with pytest.raises(ConfigError):
            AugmentConfig(mode="predict")

    def test_crop_larger_than_resize_rejected(self):
        with pytest.raises(ConfigError):
            AugmentConfig(resize_to=(8, 8), crop_to=(16, 16))


class TestGolden:
    """Frozen end-to-end outputs; regenerate only on a deliberate contract change."""

    def load_golden(self, name):
        path = os.path.join(FIXTURES, name)
        with open(path) as fh:
            header = fh.readline().strip()
            shape = tuple(int(s) for s in header.split(","))
            values = np.array([float(line) for line in fh])
        return values.reshape(shape)

    def test_train_pipeline_golden(self):
        img = load_image(os.path.join(FIXTURES, "testcard_12x16.ppm"))
        cfg = AugmentConfig(resize_to=(10, 10), crop_to=(8, 8),
                            rotation_range_deg=(-15, 15), zoom_range=(0.9, 1.1),
                            normalize_mean=(0.5, 0.5, 0.5),
                            normalize_std=(0.25, 0.25, 0.25), mode="train")
        out = pipeline(img, cfg, Rng(123)).data
        assert_allclose(out, self.load_golden("pipeline_train_golden.csv"),
                        atol=1e-5)

    def test_test_pipeline_golden(self):
        img = load_image(os.path.join(FIXTURES, "testcard_12x16.ppm"))
        cfg = AugmentConfig(resize_to=(10, 10), crop_to=(8, 8),
                            normalize_mean=(0.5, 0.5, 0.5),
                            normalize_std=(0.25, 0.25, 0.25), mode="test")
        out = pipeline(img, cfg, None).data
        assert_allclose(out, self.load_golden("pipeline_test_golden.csv"),
                        atol=1e-5)
