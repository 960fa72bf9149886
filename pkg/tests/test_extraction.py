import numpy as np
import pytest

from joined.extraction import (
    FallbackParams,
    LandmarkEstimate,
    assign_peaks,
    channel_coordinate,
    coords_from_heatmap,
    ensemble_coords,
    fovea_fallback,
    peaks_from_distance_map,
)
from joined.pipeline import RoiBox
from joined.targets import Coordinate, LandmarkAnnotation, gaussian_heatmap, make_distance_map


def two_channel(od_map, fovea_map):
    return np.stack([od_map, fovea_map]).astype(np.float32)


class TestCoordsFromHeatmap:
    def test_delta_peak(self):
        ch = np.zeros((16, 16), dtype=np.float32)
        ch[3, 7] = 1.0
        est = coords_from_heatmap(two_channel(ch, ch))
        assert est.od == Coordinate(7.0, 3.0)
        assert est.confidence_od == 1.0

    def test_generated_gaussian_exact(self):
        od = gaussian_heatmap((64, 64), Coordinate(20, 11), sigma=2.0)
        fovea = gaussian_heatmap((64, 64), Coordinate(44, 50), sigma=2.0)
        est = coords_from_heatmap(two_channel(od, fovea))
        assert est.od == Coordinate(20.0, 11.0)
        assert est.fovea == Coordinate(44.0, 50.0)

    def test_tie_breaks_to_smallest_index(self):
        ch = np.zeros((16, 16), dtype=np.float32)
        ch[5, 4] = 1.0
        ch[5, 9] = 1.0
        c, _ = channel_coordinate(ch)
        assert c.x == 4.0

    def test_confidence_clamped(self):
        ch = np.full((8, 8), 3.0, dtype=np.float32)
        _, conf = channel_coordinate(ch)
        assert conf == 1.0

    def test_axis_accumulation_matches_2d_argmax(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            sigma = rng.uniform(1.0, 8.0)
            c = Coordinate(rng.uniform(10, 53), rng.uniform(10, 53))
            h = gaussian_heatmap((64, 64), c, sigma)
            got, _ = channel_coordinate(h)
            y2, x2 = np.unravel_index(np.argmax(h), h.shape)
            assert abs(got.x - x2) <= 1 and abs(got.y - y2) <= 1


class TestPeaksFromDistanceMap:
    def test_recovers_planted_landmarks(self):
        annot = LandmarkAnnotation(od_center=Coordinate(10, 10), fovea=Coordinate(40, 40))
        d = make_distance_map((64, 64), annot)
        peaks = peaks_from_distance_map(d.values)
        assert not peaks.degenerate
        found = {(p.x, p.y) for p in (peaks.first, peaks.second)}
        assert found == {(10.0, 10.0), (40.0, 40.0)}

    def test_constant_map_degenerate(self):
        peaks = peaks_from_distance_map(np.full((32, 32), 0.7, dtype=np.float32))
        assert peaks.degenerate
        assert peaks.first == Coordinate(0.0, 0.0)

    def test_single_landmark_second_peak_outside_disk(self):
        annot = LandmarkAnnotation(od_center=Coordinate(32, 32))
        d = make_distance_map((64, 64), annot)
        peaks = peaks_from_distance_map(d.values)
        dist = np.hypot(peaks.second.x - peaks.first.x, peaks.second.y - peaks.first.y)
        assert dist > 64 / 8


class TestAssignPeaks:
    def test_nearest_assignment(self):
        detected = LandmarkEstimate(
            od=Coordinate(11, 9), fovea=Coordinate(39, 41), confidence_od=1, confidence_fovea=1
        )
        od, fovea = assign_peaks(detected, (Coordinate(40, 40), Coordinate(10, 10)))
        assert od == Coordinate(10, 10)
        assert fovea == Coordinate(40, 40)

    def test_swapped_detector(self):
        detected = LandmarkEstimate(
            od=Coordinate(39, 41), fovea=Coordinate(11, 9), confidence_od=1, confidence_fovea=1
        )
        od, fovea = assign_peaks(detected, (Coordinate(10, 10), Coordinate(40, 40)))
        assert od == Coordinate(40, 40)
        assert fovea == Coordinate(10, 10)

    def test_permutation_invariance(self):
        detected = LandmarkEstimate(
            od=Coordinate(5, 5), fovea=Coordinate(20, 20), confidence_od=1, confidence_fovea=1
        )
        a = assign_peaks(detected, (Coordinate(4, 6), Coordinate(21, 19)))
        b = assign_peaks(detected, (Coordinate(21, 19), Coordinate(4, 6)))
        assert a == b

    def test_equidistant_scan_order(self):
        # both orderings cost the same; OD must take the scan-order-first peak
        detected = LandmarkEstimate(
            od=Coordinate(10, 10), fovea=Coordinate(10, 10), confidence_od=1, confidence_fovea=1
        )
        peak_a, peak_b = Coordinate(9, 10), Coordinate(11, 10)
        od1, _ = assign_peaks(detected, (peak_a, peak_b))
        od2, _ = assign_peaks(detected, (peak_b, peak_a))
        assert od1 == od2 == peak_a  # same row, smaller x


class TestFovealFallback:
    def test_default_rule(self):
        fovea = fovea_fallback(Coordinate(50, 128), (256, 256))
        assert fovea.x == pytest.approx(50 + 0.3 * 256)
        assert fovea.y == 128.0

    def test_mirrors_toward_center(self):
        fovea = fovea_fallback(Coordinate(200, 128), (256, 256))
        assert fovea.x == pytest.approx(200 - 0.3 * 256)

    def test_clamped_to_frame(self):
        fovea = fovea_fallback(Coordinate(10, 5), (64, 64), FallbackParams(vertical_fraction=-0.5))
        assert 0.0 <= fovea.x <= 63.0
        assert fovea.y == 0.0


class TestEnsemble:
    def test_mean(self):
        assert ensemble_coords(Coordinate(10, 10), Coordinate(12, 14)) == Coordinate(11.0, 12.0)

    def test_identity(self):
        c = Coordinate(3.5, 7.25)
        assert ensemble_coords(c, c) == c

    def test_commutes_with_uncrop(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            box = RoiBox(x0=int(rng.integers(0, 100)), y0=int(rng.integers(0, 100)), size=128)
            a = Coordinate(rng.uniform(0, 127), rng.uniform(0, 127))
            b = Coordinate(rng.uniform(0, 127), rng.uniform(0, 127))
            direct = box.to_global(ensemble_coords(a, b))
            remapped = ensemble_coords(box.to_global(a), box.to_global(b))
            assert direct.x == pytest.approx(remapped.x, abs=1e-9)
            assert direct.y == pytest.approx(remapped.y, abs=1e-9)
