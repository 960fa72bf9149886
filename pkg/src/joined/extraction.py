"""Coordinate extraction from predicted heatmaps and distance maps.

Covers the axis-accumulation argmax read-out of the detection heatmaps, the
two-peak read-out of the distance map, the consistency pairing between the
two, the geometric fovea fallback, and the regression/heatmap ensemble.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .targets import Coordinate

DEFAULT_SUPPRESSION_FRACTION = 1.0 / 8.0


@dataclass
class LandmarkEstimate:
    """OD-center and fovea estimates with their peak confidences."""

    od: Coordinate
    fovea: Coordinate
    confidence_od: float
    confidence_fovea: float
    fovea_via_fallback: bool = False


class DistancePeaks(NamedTuple):
    first: Coordinate
    second: Coordinate
    degenerate: bool


@dataclass(frozen=True)
class FallbackParams:
    """Geometry of the fovea-from-OD fallback rule.

    The fovea is displaced horizontally from the OD center toward the image
    center by ``horizontal_fraction`` of the image width (2.5 assumed OD
    diameters), plus ``vertical_fraction`` of the height downward.
    """

    horizontal_fraction: float = 0.3
    vertical_fraction: float = 0.0
    confidence_threshold: float = 0.05


def channel_coordinate(channel: np.ndarray) -> tuple[Coordinate, float]:
    """Read one heatmap channel via per-axis accumulation.

    The column profile (sum over rows) is argmaxed for x and the row profile
    (sum over columns) for y; ties break toward the smallest index.  The
    confidence is the channel maximum clamped to [0, 1].
    """
    x = int(np.argmax(channel.sum(axis=0)))
    y = int(np.argmax(channel.sum(axis=1)))
    conf = float(np.clip(channel.max(), 0.0, 1.0))
    return Coordinate(float(x), float(y)), conf


def coords_from_heatmap(heatmap: np.ndarray) -> LandmarkEstimate:
    """Extract OD (channel 0) and fovea (channel 1) from a (2, H, W) heatmap."""
    if heatmap.ndim != 3 or heatmap.shape[0] != 2:
        raise ValueError(f"expected (2, H, W) heatmap, got {heatmap.shape}")
    od, conf_od = channel_coordinate(heatmap[0])
    fovea, conf_fovea = channel_coordinate(heatmap[1])
    return LandmarkEstimate(od=od, fovea=fovea, confidence_od=conf_od, confidence_fovea=conf_fovea)


def peaks_from_distance_map(
    dist: np.ndarray, suppression_fraction: float = DEFAULT_SUPPRESSION_FRACTION
) -> DistancePeaks:
    """Two highest peaks of a distance map, H/8 apart at minimum.

    The global argmax is taken first, a disk of radius H * fraction around
    it is suppressed, and the argmax of the remainder gives the second peak.
    A constant map is degenerate: both peaks are (0, 0) with the flag set.
    """
    h, w = dist.shape
    if float(dist.max()) == float(dist.min()):
        return DistancePeaks(Coordinate(0.0, 0.0), Coordinate(0.0, 0.0), True)
    flat = int(np.argmax(dist))
    y1, x1 = divmod(flat, w)
    radius = h * suppression_fraction
    ys, xs = np.mgrid[0:h, 0:w]
    outside = (xs - x1) ** 2 + (ys - y1) ** 2 > radius * radius
    suppressed = np.where(outside, dist, -np.inf)
    flat2 = int(np.argmax(suppressed))
    y2, x2 = divmod(flat2, w)
    return DistancePeaks(
        Coordinate(float(x1), float(y1)), Coordinate(float(x2), float(y2)), False
    )


def _dist(a: Coordinate, b: Coordinate) -> float:
    return float(np.hypot(a.x - b.x, a.y - b.y))


def _scan_order(c: Coordinate) -> tuple[float, float]:
    return (c.y, c.x)


def assign_peaks(
    detected: LandmarkEstimate, peaks: tuple[Coordinate, Coordinate] | DistancePeaks
) -> tuple[Coordinate, Coordinate]:
    """Order the unordered distance-map peaks as (od, fovea).

    Each peak goes to the nearest detector coordinate; the assignment with
    the smaller total distance wins.  On an exact tie the OD takes the peak
    that comes first in row-major scan order.
    """
    a, b = peaks[0], peaks[1]
    straight = _dist(a, detected.od) + _dist(b, detected.fovea)
    swapped = _dist(b, detected.od) + _dist(a, detected.fovea)
    if straight < swapped:
        return a, b
    if swapped < straight:
        return b, a
    first = min((a, b), key=_scan_order)
    second = b if first is a else a
    return first, second


def fovea_fallback(
    od: Coordinate, image_shape: tuple[int, int], params: FallbackParams = FallbackParams()
) -> Coordinate:
    """Estimate the fovea from the OD center by a fixed geometric offset.

    The offset points horizontally toward the image center and is clamped
    into the frame.
    """
    h, w = image_shape
    direction = 1.0 if od.x <= (w - 1) / 2.0 else -1.0
    x = od.x + direction * params.horizontal_fraction * w
    y = od.y + params.vertical_fraction * h
    return Coordinate(
        float(np.clip(x, 0.0, w - 1)), float(np.clip(y, 0.0, h - 1))
    )


def ensemble_coords(c_reg: Coordinate, c_heat: Coordinate) -> Coordinate:
    """Arithmetic mean of the regression and heatmap coordinate estimates."""
    return Coordinate((c_reg.x + c_heat.x) / 2.0, (c_reg.y + c_heat.y) / 2.0)
