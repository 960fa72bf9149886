"""Ground-truth supervision signals: OD center, distance maps, heatmaps.

All coordinates follow the (x = column, y = row) convention with the origin
at the top-left pixel center.  Distances are measured from pixel centers to
the (possibly fractional) landmark coordinate; nothing is rounded except for
peak/argmax assertions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .masks import LABEL_OC, LABEL_OD

HEATMAP_MASK_THRESHOLD = 0.5


class Coordinate(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class LandmarkAnnotation:
    """Optional OD-center and fovea landmarks of one image."""

    od_center: Optional[Coordinate] = None
    fovea: Optional[Coordinate] = None

    @property
    def od_present(self) -> bool:
        return self.od_center is not None

    @property
    def fovea_present(self) -> bool:
        return self.fovea is not None

    def present(self) -> list[Coordinate]:
        return [c for c in (self.od_center, self.fovea) if c is not None]


@dataclass
class DistanceMap:
    """Normalized min-distance-to-landmark field in [0, 1].

    Value 1 sits at the landmarks, 0 at the farthest pixel.  ``supervised``
    is False when no landmark was available (all-zero map, sample excluded
    from the distance-prediction loss).
    """

    values: np.ndarray  # (H, W) float32
    supervised: bool = True


@dataclass
class HeatmapPair:
    """Two-channel landmark heatmap: channel 0 = OD center, channel 1 = fovea."""

    channels: np.ndarray  # (2, H, W) float32, each channel peak-normalized
    sigma: float


@dataclass
class HeatmapMask:
    """Binary 0.5-threshold of a HeatmapPair, channel for channel."""

    channels: np.ndarray  # (2, H, W) uint8


def od_center_from_mask(mask: np.ndarray) -> Optional[Coordinate]:
    """Midpoint of the bounding box of all disc pixels (OC counts as OD).

    Returns None when the mask contains no disc pixel.
    """
    ys, xs = np.nonzero((mask == LABEL_OD) | (mask == LABEL_OC))
    if xs.size == 0:
        return None
    return Coordinate(
        (float(xs.min()) + float(xs.max())) / 2.0,
        (float(ys.min()) + float(ys.max())) / 2.0,
    )


def make_distance_map(shape: tuple[int, int], annot: LandmarkAnnotation) -> DistanceMap:
    """Normalized distance map: 1 - min_k dist(pixel, landmark_k) / max distance.

    The minimum runs over the present landmarks only.  With no landmark the
    map is all-zero and flagged unsupervised.
    """
    h, w = shape
    landmarks = annot.present()
    if not landmarks:
        return DistanceMap(np.zeros((h, w), dtype=np.float32), supervised=False)
    ys, xs = np.mgrid[0:h, 0:w]
    dist = np.full((h, w), np.inf)
    for c in landmarks:
        dist = np.minimum(dist, np.hypot(xs - c.x, ys - c.y))
    peak = dist.max()
    if peak <= 0.0:  # degenerate 1x1 grid sitting on the landmark
        return DistanceMap(np.ones((h, w), dtype=np.float32))
    return DistanceMap((1.0 - dist / peak).astype(np.float32))


def gaussian_heatmap(
    shape: tuple[int, int], center: Optional[Coordinate], sigma: float
) -> np.ndarray:
    """Peak-normalized Gaussian bump around ``center``; all-zero if absent.

    The raw kernel exp(-r^2 / 2 sigma^2) / (2 pi sigma^2) is divided by its
    own grid maximum so the peak value is exactly 1.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    h, w = shape
    if center is None:
        return np.zeros((h, w), dtype=np.float32)
    ys, xs = np.mgrid[0:h, 0:w]
    r2 = (xs - center.x) ** 2 + (ys - center.y) ** 2
    raw = np.exp(-r2 / (2.0 * sigma * sigma)) / (2.0 * math.pi * sigma * sigma)
    peak = raw.max()
    if peak <= 0.0:  # underflow: center too far from every pixel at this sigma
        return np.zeros((h, w), dtype=np.float32)
    return (raw / peak).astype(np.float32)


def make_detection_target(
    shape: tuple[int, int], annot: LandmarkAnnotation, sigma: float
) -> tuple[HeatmapPair, HeatmapMask]:
    """OD/fovea heatmap pair plus its 0.5-thresholded binary mask."""
    od = gaussian_heatmap(shape, annot.od_center, sigma)
    fovea = gaussian_heatmap(shape, annot.fovea, sigma)
    channels = np.stack([od, fovea])
    mask = (channels > HEATMAP_MASK_THRESHOLD).astype(np.uint8)
    return HeatmapPair(channels, sigma), HeatmapMask(mask)
