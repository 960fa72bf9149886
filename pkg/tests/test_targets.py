import math

import numpy as np
import pytest

from joined.masks import LABEL_BACKGROUND, LABEL_OC, LABEL_OD
from joined.targets import (
    Coordinate,
    LandmarkAnnotation,
    gaussian_heatmap,
    make_detection_target,
    make_distance_map,
    od_center_from_mask,
)


def brute_force_distance_map(shape, annot):
    """Independent oracle: plain double loop over pixels and landmarks."""
    h, w = shape
    landmarks = annot.present()
    dist = np.zeros(shape)
    for y in range(h):
        for x in range(w):
            dist[y, x] = min(
                math.sqrt((x - c.x) ** 2 + (y - c.y) ** 2) for c in landmarks
            )
    return 1.0 - dist / dist.max()


def random_annotation(rng, shape, both=True):
    h, w = shape
    def draw():
        return Coordinate(rng.uniform(0, w - 1), rng.uniform(0, h - 1))
    if both:
        return LandmarkAnnotation(od_center=draw(), fovea=draw())
    return LandmarkAnnotation(fovea=draw())


class TestOdCenterFromMask:
    def test_bounding_box_midpoint(self):
        mask = np.zeros((20, 10), dtype=np.uint8)
        mask[10:15, 2:7] = LABEL_OD  # columns 2..6, rows 10..14
        assert od_center_from_mask(mask) == Coordinate(4.0, 12.0)

    def test_single_pixel(self):
        mask = np.zeros((10, 10), dtype=np.uint8)
        mask[7, 5] = LABEL_OD
        assert od_center_from_mask(mask) == Coordinate(5.0, 7.0)

    def test_all_background(self):
        assert od_center_from_mask(np.zeros((8, 8), dtype=np.uint8)) is None

    def test_oc_counts_as_od(self):
        mask = np.zeros((10, 10), dtype=np.uint8)
        mask[2, 2] = LABEL_OD
        mask[6, 8] = LABEL_OC
        assert od_center_from_mask(mask) == Coordinate(5.0, 4.0)


class TestDistanceMap:
    def test_value_one_at_landmark(self):
        annot = LandmarkAnnotation(od_center=Coordinate(1, 1), fovea=Coordinate(3, 3))
        d = make_distance_map((5, 5), annot)
        assert d.values[1, 1] == 1.0
        assert d.values[3, 3] == 1.0

    def test_matches_brute_force_small(self):
        annot = LandmarkAnnotation(od_center=Coordinate(1, 1), fovea=Coordinate(3, 3))
        d = make_distance_map((5, 5), annot)
        expected = brute_force_distance_map((5, 5), annot)
        np.testing.assert_allclose(d.values, expected, atol=1e-6)

    def test_single_landmark_corners_zero(self):
        annot = LandmarkAnnotation(fovea=Coordinate(2, 2))
        d = make_distance_map((5, 5), annot)
        for y, x in [(0, 0), (0, 4), (4, 0), (4, 4)]:
            assert d.values[y, x] == 0.0

    def test_no_landmark_unsupervised_zero_map(self):
        d = make_distance_map((6, 6), LandmarkAnnotation())
        assert not d.supervised
        assert not d.values.any()

    def test_matches_brute_force_random(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            shape = (int(rng.integers(4, 48)), int(rng.integers(4, 48)))
            annot = random_annotation(rng, shape, both=bool(rng.integers(0, 2)))
            d = make_distance_map(shape, annot)
            expected = brute_force_distance_map(shape, annot)
            np.testing.assert_allclose(d.values, expected, atol=1e-6)
            assert d.values.min() >= 0.0 and d.values.max() <= 1.0


class TestGaussianHeatmap:
    def test_peak_is_one_at_center(self):
        h = gaussian_heatmap((32, 32), Coordinate(20, 11), sigma=2.0)
        assert h[11, 20] == 1.0
        assert h.max() == 1.0

    def test_value_at_sigma(self):
        sigma = 3.0
        h = gaussian_heatmap((64, 64), Coordinate(30, 30), sigma=sigma)
        assert h[30, 33] == pytest.approx(math.exp(-0.5), abs=1e-6)

    def test_absent_center_all_zero(self):
        assert not gaussian_heatmap((16, 16), None, sigma=2.0).any()

    def test_invalid_sigma(self):
        with pytest.raises(ValueError):
            gaussian_heatmap((8, 8), Coordinate(4, 4), sigma=0.0)

    def test_radial_symmetry_integer_center(self):
        h = gaussian_heatmap((41, 41), Coordinate(20, 20), sigma=4.0)
        for dx, dy in [(1, 0), (3, 2), (5, 5), (0, 7)]:
            assert h[20 + dy, 20 + dx] == pytest.approx(h[20 - dy, 20 - dx], abs=1e-9)

    def test_argmax_at_rounded_center(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            shape = (64, 64)
            c = Coordinate(rng.uniform(5, 58), rng.uniform(5, 58))
            sigma = rng.uniform(1.0, 8.0)
            h = gaussian_heatmap(shape, c, sigma)
            y, x = np.unravel_index(np.argmax(h), shape)
            assert (x, y) == (round(c.x), round(c.y))


class TestDetectionTarget:
    def test_both_present(self):
        annot = LandmarkAnnotation(od_center=Coordinate(10, 12), fovea=Coordinate(40, 44))
        heat, mask = make_detection_target((64, 64), annot, sigma=2.0)
        assert heat.channels[0].max() == 1.0
        assert heat.channels[1].max() == 1.0
        assert mask.channels.shape == (2, 64, 64)

    def test_absent_fovea_zero_channel(self):
        annot = LandmarkAnnotation(od_center=Coordinate(10, 12))
        heat, mask = make_detection_target((64, 64), annot, sigma=2.0)
        assert not heat.channels[1].any()
        assert not mask.channels[1].any()

    def test_mask_is_level_set_disk(self):
        # exp(-r^2 / 2 sigma^2) > 0.5  <=>  r < sigma * sqrt(2 ln 2)
        sigma = 4.0
        annot = LandmarkAnnotation(od_center=Coordinate(32, 32))
        heat, mask = make_detection_target((64, 64), annot, sigma=sigma)
        radius = sigma * math.sqrt(2.0 * math.log(2.0))
        ys, xs = np.mgrid[0:64, 0:64]
        r = np.hypot(xs - 32, ys - 32)
        inside = mask.channels[0].astype(bool)
        assert inside[r <= radius - 1.0].all()
        assert not inside[r >= radius + 1.0].any()

    def test_mask_rethreshold_idempotent(self):
        annot = LandmarkAnnotation(od_center=Coordinate(31.3, 17.8), fovea=Coordinate(50.1, 44.9))
        heat, mask = make_detection_target((64, 64), annot, sigma=3.0)
        again = (heat.channels > 0.5).astype(np.uint8)
        np.testing.assert_array_equal(mask.channels, again)
        np.testing.assert_array_equal((mask.channels > 0.5).astype(np.uint8), mask.channels)
