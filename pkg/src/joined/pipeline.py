"""Coarse-to-fine orchestration: preprocessing, augmentation, ROI geometry,
and the inference path through the three networks.

Frames and coordinates: every crop/resize step is an affine map kept
explicitly (2x3 float64 matrices acting on (x, y) pixel-center
coordinates), so any landmark travels between the original frame, the
field-of-view-cropped coarse frame, and fine-stage crop frames exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import cv2
import numpy as np
import torch

from .extraction import (
    FallbackParams,
    DistancePeaks,
    LandmarkEstimate,
    assign_peaks,
    channel_coordinate,
    coords_from_heatmap,
    ensemble_coords,
    fovea_fallback,
    peaks_from_distance_map,
)
from .masks import labels_from_probs, one_hot
from .nets import FlmNet, FsmNet, JsdmNet
from .targets import (
    Coordinate,
    DistanceMap,
    HeatmapPair,
    LandmarkAnnotation,
    make_detection_target,
    make_distance_map,
    od_center_from_mask,
)

COARSE_RESOLUTION = 256
SEG_CROP_SIZE = 448
LOC_CROP_SIZE = 128
SIGMA_DIVISOR = 100.0


class PipelineError(ValueError):
    pass


# ---------------------------------------------------------------------------
# affine helpers (2x3 matrices over pixel-center coordinates)


def compose_affine(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    """Affine applying ``inner`` first, then ``outer``."""
    m = np.empty((2, 3), dtype=np.float64)
    m[:, :2] = outer[:, :2] @ inner[:, :2]
    m[:, 2] = outer[:, :2] @ inner[:, 2] + outer[:, 2]
    return m


def invert_affine(m: np.ndarray) -> np.ndarray:
    return cv2.invertAffineTransform(m.astype(np.float64))


def transform_coordinate(m: np.ndarray, c: Coordinate) -> Coordinate:
    x = m[0, 0] * c.x + m[0, 1] * c.y + m[0, 2]
    y = m[1, 0] * c.x + m[1, 1] * c.y + m[1, 2]
    return Coordinate(float(x), float(y))


def warp_map(
    src: np.ndarray, m: np.ndarray, out_shape: tuple[int, int], nearest: bool = False
) -> np.ndarray:
    """Resample ``src`` through the forward affine ``m`` into ``out_shape``."""
    h, w = out_shape
    flags = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    return cv2.warpAffine(src, m.astype(np.float64), (w, h), flags=flags, borderValue=0)


# ---------------------------------------------------------------------------
# preprocessing: field-of-view crop + resize to the coarse resolution


@dataclass(frozen=True)
class FovTransform:
    """Affine bookkeeping of the preprocess step (crop box + resize)."""

    x0: int
    y0: int
    width: int
    height: int
    out_w: int
    out_h: int

    def matrix_to_resized(self) -> np.ndarray:
        sx = self.out_w / self.width
        sy = self.out_h / self.height
        return np.array(
            [[sx, 0.0, sx * (0.5 - self.x0) - 0.5], [0.0, sy, sy * (0.5 - self.y0) - 0.5]]
        )

    def matrix_to_original(self) -> np.ndarray:
        return invert_affine(self.matrix_to_resized())

    def to_resized(self, c: Coordinate) -> Coordinate:
        return transform_coordinate(self.matrix_to_resized(), c)

    def to_original(self, c: Coordinate) -> Coordinate:
        return transform_coordinate(self.matrix_to_original(), c)


def preprocess(
    image: np.ndarray, out_size: int = COARSE_RESOLUTION, intensity_floor: int = 10
) -> tuple[np.ndarray, FovTransform]:
    """Crop to the smallest rectangle containing the field of view and resize.

    Returns the float32 [0, 1] coarse-resolution image and the transform for
    mapping coordinates between frames.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise PipelineError(f"expected an RGB image, got shape {image.shape}")
    fov = image.max(axis=2) > intensity_floor
    cols = np.nonzero(fov.any(axis=0))[0]
    rows = np.nonzero(fov.any(axis=1))[0]
    if cols.size == 0:
        raise PipelineError("empty field of view: no pixel above the intensity floor")
    x0, x1 = int(cols[0]), int(cols[-1])
    y0, y1 = int(rows[0]), int(rows[-1])
    crop = image[y0 : y1 + 1, x0 : x1 + 1]
    resized = cv2.resize(crop, (out_size, out_size), interpolation=cv2.INTER_LINEAR)
    transform = FovTransform(x0, y0, x1 - x0 + 1, y1 - y0 + 1, out_size, out_size)
    return resized.astype(np.float32) / 255.0, transform


def preprocess_mask(mask: np.ndarray, transform: FovTransform) -> np.ndarray:
    crop = mask[
        transform.y0 : transform.y0 + transform.height,
        transform.x0 : transform.x0 + transform.width,
    ]
    return cv2.resize(crop, (transform.out_w, transform.out_h), interpolation=cv2.INTER_NEAREST)


# ---------------------------------------------------------------------------
# ROI crops


@dataclass(frozen=True)
class RoiBox:
    """Axis-aligned crop window; ``scale`` is the resize factor applied after
    cropping (1 everywhere in this pipeline)."""

    x0: int
    y0: int
    size: int
    scale: float = 1.0

    def matrix_to_local(self) -> np.ndarray:
        s = self.scale
        return np.array(
            [[s, 0.0, s * (0.5 - self.x0) - 0.5], [0.0, s, s * (0.5 - self.y0) - 0.5]]
        )

    def matrix_to_global(self) -> np.ndarray:
        return invert_affine(self.matrix_to_local())

    def to_local(self, c: Coordinate) -> Coordinate:
        return transform_coordinate(self.matrix_to_local(), c)

    def to_global(self, c: Coordinate) -> Coordinate:
        return transform_coordinate(self.matrix_to_global(), c)

    def crop(self, array: np.ndarray) -> np.ndarray:
        return array[self.y0 : self.y0 + self.size, self.x0 : self.x0 + self.size]


def crop_roi(center: Coordinate, size: int, image_shape: tuple[int, int]) -> RoiBox:
    """Window of ``size`` centered on ``center``, shifted (never shrunk) to
    fit inside the frame."""
    h, w = image_shape[:2]
    if size > min(h, w):
        raise PipelineError(f"crop size {size} exceeds image extent {h}x{w}")
    x0 = int(round(center.x)) - size // 2
    y0 = int(round(center.y)) - size // 2
    x0 = min(max(x0, 0), w - size)
    y0 = min(max(y0, 0), h - size)
    return RoiBox(x0=x0, y0=y0, size=size)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    """Photometric and geometric jitter ranges.  A zeroed policy is identity."""

    color_jitter: float = 0.1  # brightness/contrast/saturation factor bound
    flip_prob: float = 0.5
    rotate_prob: float = 0.5
    rotate_max_degrees: float = 15.0
    gamma_jitter: float = 0.2
    scale_range: tuple[float, float] = (1.0 / 1.1, 1.1)

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(color_jitter=0.0, flip_prob=0.0, rotate_prob=0.0, gamma_jitter=0.0, scale_range=(1.0, 1.0))


def sample_transform(
    policy: AugmentPolicy, rng: np.random.Generator, shape: tuple[int, int]
) -> np.ndarray:
    """Draw one geometric transform (flips, rotation, scale) about the image center."""
    h, w = shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    m = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    if rng.random() < policy.flip_prob:
        m = compose_affine(np.array([[-1.0, 0.0, w - 1.0], [0.0, 1.0, 0.0]]), m)
    if rng.random() < policy.flip_prob:
        m = compose_affine(np.array([[1.0, 0.0, 0.0], [0.0, -1.0, h - 1.0]]), m)
    if rng.random() < policy.rotate_prob:
        angle = rng.uniform(-policy.rotate_max_degrees, policy.rotate_max_degrees)
        m = compose_affine(cv2.getRotationMatrix2D((cx, cy), angle, 1.0), m)
    scale = rng.uniform(*policy.scale_range)
    if scale != 1.0:
        m = compose_affine(cv2.getRotationMatrix2D((cx, cy), 0.0, scale), m)
    return m


def _photometric(image: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    j = policy.color_jitter
    brightness, contrast, saturation = 1.0 + rng.uniform(-j, j, size=3)
    image = image * brightness
    mean = image.mean()
    image = mean + (image - mean) * contrast
    gray = image.mean(axis=2, keepdims=True)
    image = gray + (image - gray) * saturation
    image = np.clip(image, 0.0, 1.0)
    if policy.gamma_jitter > 0.0:
        gamma = 1.0 + rng.uniform(-policy.gamma_jitter, policy.gamma_jitter)
        image = image**gamma
    return image.astype(np.float32)


@dataclass
class CoarseExample:
    """One coarse-stage training sample with all supervision targets."""

    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: Optional[np.ndarray]  # (H, W) uint8 labels
    annot: LandmarkAnnotation
    dist: DistanceMap
    heat: HeatmapPair
    heat_mask: np.ndarray  # (2, H, W) uint8
    onehot: Optional[np.ndarray]  # (3, H, W) float32


def build_coarse_example(
    image: np.ndarray,
    mask: Optional[np.ndarray],
    fovea: Optional[Coordinate],
    resolution: int = COARSE_RESOLUTION,
    sigma_divisor: float = SIGMA_DIVISOR,
) -> tuple[CoarseExample, FovTransform]:
    """Preprocess one raw sample and synthesize its coarse-stage targets."""
    image_c, fov = preprocess(image, out_size=resolution)
    mask_c = preprocess_mask(mask, fov) if mask is not None else None
    od = od_center_from_mask(mask_c) if mask_c is not None else None
    annot = LandmarkAnnotation(
        od_center=od, fovea=fov.to_resized(fovea) if fovea is not None else None
    )
    shape = (resolution, resolution)
    dist = make_distance_map(shape, annot)
    heat, heat_mask = make_detection_target(shape, annot, resolution / sigma_divisor)
    return (
        CoarseExample(
            image=image_c,
            mask=mask_c,
            annot=annot,
            dist=dist,
            heat=heat.channels,
            heat_mask=heat_mask.channels,
            onehot=one_hot(mask_c) if mask_c is not None else None,
        ),
        fov,
    )


def _inside(c: Coordinate, shape: tuple[int, int]) -> bool:
    h, w = shape
    return 0.0 <= c.x <= w - 1 and 0.0 <= c.y <= h - 1


def augment(example: CoarseExample, policy: AugmentPolicy, rng: np.random.Generator) -> CoarseExample:
    """Apply one sampled transform consistently to image, targets, and coordinates.

    Photometric jitter touches the image only.  A landmark pushed out of the
    frame becomes absent and its heatmap channel is zeroed, mirroring the
    missing-landmark rule of the targets.
    """
    shape = example.image.shape[:2]
    m = sample_transform(policy, rng, shape)
    image = warp_map(example.image, m, shape)
    image = _photometric(image, policy, rng)
    mask = warp_map(example.mask, m, shape, nearest=True) if example.mask is not None else None
    dist_values = warp_map(example.dist.values, m, shape)
    heat = np.stack([warp_map(ch, m, shape) for ch in example.heat])

    def move(c: Optional[Coordinate], channel: int) -> Optional[Coordinate]:
        if c is None:
            return None
        moved = transform_coordinate(m, c)
        if not _inside(moved, shape):
            heat[channel] = 0.0
            return None
        return moved

    annot = LandmarkAnnotation(
        od_center=move(example.annot.od_center, 0), fovea=move(example.annot.fovea, 1)
    )
    return CoarseExample(
        image=image,
        mask=mask,
        annot=annot,
        dist=replace(example.dist, values=dist_values),
        heat=heat,
        heat_mask=(heat > 0.5).astype(np.uint8),
        onehot=one_hot(mask) if mask is not None else None,
    )


# ---------------------------------------------------------------------------
# inference stages


@dataclass
class CoarseResult:
    d_p: Optional[np.ndarray]  # (H, W)
    h_d: Optional[np.ndarray]  # (2, H, W)
    p_s: Optional[np.ndarray]  # (3, H, W)
    estimate: LandmarkEstimate
    peaks: Optional[DistancePeaks]
    c_p: Optional[tuple[Coordinate, Coordinate]]
    degenerate: bool


def _to_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None]


def run_coarse(
    net: JsdmNet, image: np.ndarray, fallback: FallbackParams = FallbackParams()
) -> CoarseResult:
    """Forward the coarse net and extract landmark estimates.

    The fovea estimate falls back to the geometric offset rule whenever its
    heatmap confidence is below the fallback threshold.
    """
    net.eval()
    with torch.no_grad():
        outputs = net(_to_tensor(image))
    d_p = outputs.d_p[0, 0].numpy() if outputs.d_p is not None else None
    h_d = outputs.h_d[0].numpy() if outputs.h_d is not None else None
    p_s = outputs.p_s[0].numpy() if outputs.p_s is not None else None
    shape = image.shape[:2]
    peaks = peaks_from_distance_map(d_p) if d_p is not None else None
    degenerate = False
    if h_d is not None:
        estimate = coords_from_heatmap(h_d)
    elif peaks is not None:
        # detector ablated: read both landmarks off the distance map
        estimate = LandmarkEstimate(
            od=peaks.first, fovea=peaks.second, confidence_od=0.0, confidence_fovea=0.0
        )
        degenerate = peaks.degenerate
    else:
        estimate = LandmarkEstimate(
            od=Coordinate((shape[1] - 1) / 2.0, (shape[0] - 1) / 2.0),
            fovea=Coordinate((shape[1] - 1) / 2.0, (shape[0] - 1) / 2.0),
            confidence_od=0.0,
            confidence_fovea=0.0,
        )
        degenerate = True
    c_p = None
    if peaks is not None and not peaks.degenerate and h_d is not None:
        c_p = assign_peaks(estimate, peaks)
    if h_d is not None and estimate.confidence_fovea < fallback.confidence_threshold:
        estimate.fovea = fovea_fallback(estimate.od, shape, fallback)
        estimate.fovea_via_fallback = True
    return CoarseResult(
        d_p=d_p, h_d=h_d, p_s=p_s, estimate=estimate, peaks=peaks, c_p=c_p, degenerate=degenerate
    )


def coarse_conditioning_matrix(box: RoiBox, fov: FovTransform) -> np.ndarray:
    """Affine taking coarse-frame maps into a fine-stage crop frame."""
    return compose_affine(box.matrix_to_local(), fov.matrix_to_original())


def run_fine_seg(
    fsm: FsmNet,
    original_image: np.ndarray,
    coarse: CoarseResult,
    fov: FovTransform,
    crop_size: int = SEG_CROP_SIZE,
) -> tuple[np.ndarray, RoiBox]:
    """Refine the segmentation on an OD-centered crop of the original image.

    The coarse label mask rides along as a fourth input channel (labels
    rescaled to [0, 1]).  The refined labels are pasted back into a
    full-frame mask that is background outside the ROI.
    """
    shape = original_image.shape[:2]
    if coarse.degenerate:
        center = Coordinate((shape[1] - 1) / 2.0, (shape[0] - 1) / 2.0)
    else:
        center = fov.to_original(coarse.estimate.od)
    box = crop_roi(center, crop_size, shape)
    image = original_image.astype(np.float32) / 255.0
    crop = box.crop(image)
    m_s = labels_from_probs(coarse.p_s) if coarse.p_s is not None else np.zeros(
        (fov.out_h, fov.out_w), dtype=np.uint8
    )
    cond = warp_map(m_s, coarse_conditioning_matrix(box, fov), (crop_size, crop_size), nearest=True)
    x = np.concatenate([crop.transpose(2, 0, 1), cond[None].astype(np.float32) / 2.0])
    fsm.eval()
    with torch.no_grad():
        probs = fsm(torch.from_numpy(x)[None])[0].numpy()
    labels_crop = labels_from_probs(probs)
    full = np.zeros(shape, dtype=np.uint8)
    full[box.y0 : box.y0 + box.size, box.x0 : box.x0 + box.size] = labels_crop
    return full, box


@dataclass
class FineLocResult:
    final: Coordinate  # original frame
    c_reg: Coordinate  # crop frame
    c_heat: Coordinate  # crop frame
    box: RoiBox


def run_fine_loc(
    flm: FlmNet,
    original_image: np.ndarray,
    coarse: CoarseResult,
    fov: FovTransform,
    crop_size: int = LOC_CROP_SIZE,
) -> FineLocResult:
    """Refine the fovea estimate on a crop conditioned on coarse outputs.

    The six input channels are the RGB crop plus the coarse distance map and
    the two coarse heatmap channels resampled into the crop frame.  The
    regression and heatmap estimates are ensembled by their mean.
    """
    shape = original_image.shape[:2]
    center = fov.to_original(coarse.estimate.fovea)
    box = crop_roi(center, crop_size, shape)
    image = original_image.astype(np.float32) / 255.0
    crop = box.crop(image)
    m = coarse_conditioning_matrix(box, fov)
    out_shape = (crop_size, crop_size)
    d_crop = (
        warp_map(coarse.d_p, m, out_shape)
        if coarse.d_p is not None
        else np.zeros(out_shape, dtype=np.float32)
    )
    h_crop = (
        np.stack([warp_map(ch, m, out_shape) for ch in coarse.h_d])
        if coarse.h_d is not None
        else np.zeros((2,) + out_shape, dtype=np.float32)
    )
    x = np.concatenate([crop.transpose(2, 0, 1), d_crop[None], h_crop]).astype(np.float32)
    flm.eval()
    with torch.no_grad():
        coords, heatmap = flm(torch.from_numpy(x)[None])
    c_reg = Coordinate(
        float(coords[0, 0]) * (crop_size - 1), float(coords[0, 1]) * (crop_size - 1)
    )
    c_heat, _ = channel_coordinate(heatmap[0, 0].numpy())
    final_local = ensemble_coords(c_reg, c_heat)
    return FineLocResult(final=box.to_global(final_local), c_reg=c_reg, c_heat=c_heat, box=box)


def infer_sample(
    sample,
    jsdm: JsdmNet,
    fsm: Optional[FsmNet] = None,
    flm: Optional[FlmNet] = None,
    *,
    coarse_resolution: int = COARSE_RESOLUTION,
    seg_crop_size: int = SEG_CROP_SIZE,
    loc_crop_size: int = LOC_CROP_SIZE,
    fallback: FallbackParams = FallbackParams(),
):
    """Full prediction for one sample: coarse pass, fine refinements where
    the nets are available, outputs remapped to the original frame."""
    from .data_io import PredictionRecord
    from .metrics import vcdr

    image256, fov = preprocess(sample.image, out_size=coarse_resolution)
    coarse = run_coarse(jsdm, image256, fallback)
    shape = sample.image.shape[:2]
    if coarse.p_s is None:
        mask = np.zeros(shape, dtype=np.uint8)
    elif fsm is not None:
        mask, _ = run_fine_seg(fsm, sample.image, coarse, fov, seg_crop_size)
    else:
        mask = warp_map(
            labels_from_probs(coarse.p_s), fov.matrix_to_original(), shape, nearest=True
        )
    if flm is not None:
        fovea = run_fine_loc(flm, sample.image, coarse, fov, loc_crop_size).final
    else:
        fovea = fov.to_original(coarse.estimate.fovea)
    od = od_center_from_mask(mask)
    if od is None and not coarse.degenerate:
        od = fov.to_original(coarse.estimate.od)
    return PredictionRecord(
        image_id=sample.image_id,
        mask=mask,
        fovea_xy=fovea,
        od_center_xy=od,
        vcdr=vcdr(mask),
        fovea_via_fallback=coarse.estimate.fovea_via_fallback,
    )
