"""Dataset ingestion, the synthetic fundus generator, and persistence.

On-disk dataset convention: ``root/images/<id>.png``, ``root/masks/<id>.png``
(grayscale, default value map 0 -> OC, 128 -> OD, 255 -> background) and a
``root/annotations.csv`` sidecar with header ``image_id,fovea_x,fovea_y``.
The OD center is always derived from the mask bounding box, never annotated.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import cv2
import numpy as np

from .masks import LABEL_BACKGROUND, LABEL_OC, LABEL_OD
from .targets import Coordinate, LandmarkAnnotation, od_center_from_mask

DEFAULT_MASK_ENCODING = {0: LABEL_OC, 128: LABEL_OD, 255: LABEL_BACKGROUND}


class DataError(ValueError):
    pass


@dataclass
class FundusSample:
    image_id: str
    image: np.ndarray  # (H, W, 3) uint8 RGB
    mask: Optional[np.ndarray]  # (H, W) uint8 label mask
    annot: LandmarkAnnotation
    oc_annotated: bool = True


@dataclass
class DatasetManifest:
    root: Path
    entries: list[dict]
    mask_encoding: dict[int, int] = field(default_factory=lambda: dict(DEFAULT_MASK_ENCODING))

    @property
    def oc_annotated(self) -> bool:
        return LABEL_OC in self.mask_encoding.values()


def build_manifest(
    root: str | Path, mask_encoding: Optional[dict[int, int]] = None
) -> DatasetManifest:
    """Scan a dataset folder into a manifest; missing files fail loudly."""
    root = Path(root)
    image_dir = root / "images"
    if not image_dir.is_dir():
        raise DataError(f"no images/ directory under {root}")
    annotations: dict[str, tuple[Optional[float], Optional[float]]] = {}
    csv_path = root / "annotations.csv"
    if csv_path.exists():
        with open(csv_path, newline="") as fh:
            for row in csv.DictReader(fh):
                fx, fy = row.get("fovea_x", ""), row.get("fovea_y", "")
                annotations[row["image_id"]] = (
                    float(fx) if fx not in ("", None) else None,
                    float(fy) if fy not in ("", None) else None,
                )
    entries = []
    for image_file in sorted(image_dir.glob("*.png")):
        image_id = image_file.stem
        mask_file = root / "masks" / f"{image_id}.png"
        fx, fy = annotations.get(image_id, (None, None))
        entries.append(
            {
                "image_id": image_id,
                "image_file": str(image_file),
                "mask_file": str(mask_file) if mask_file.exists() else None,
                "fovea_xy": (fx, fy) if fx is not None and fy is not None else None,
            }
        )
    if not entries:
        raise DataError(f"no images found under {image_dir}")
    return DatasetManifest(root=root, entries=entries, mask_encoding=mask_encoding or dict(DEFAULT_MASK_ENCODING))


def decode_mask(raw: np.ndarray, encoding: dict[int, int], source: str) -> np.ndarray:
    """Map raw grayscale mask values to internal labels; unknown values are
    a hard error naming the offending file."""
    values = np.unique(raw)
    unknown = [int(v) for v in values if int(v) not in encoding]
    if unknown:
        raise DataError(f"mask {source}: values {unknown} not covered by the encoding")
    out = np.zeros(raw.shape, dtype=np.uint8)
    for value, label in encoding.items():
        out[raw == value] = label
    return out


def encode_mask(mask: np.ndarray, encoding: dict[int, int]) -> np.ndarray:
    inverse = {label: value for value, label in encoding.items()}
    for label in np.unique(mask):
        if int(label) not in inverse:
            raise DataError(f"label {int(label)} has no value in the encoding")
    out = np.zeros(mask.shape, dtype=np.uint8)
    for label, value in inverse.items():
        out[mask == label] = value
    return out


def _load_entry(entry: dict, manifest: DatasetManifest) -> FundusSample:
    bgr = cv2.imread(entry["image_file"], cv2.IMREAD_COLOR)
    if bgr is None:
        raise DataError(f"cannot read image {entry['image_file']}")
    image = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
    mask = None
    od = None
    if entry["mask_file"]:
        raw = cv2.imread(entry["mask_file"], cv2.IMREAD_GRAYSCALE)
        if raw is None:
            raise DataError(f"cannot read mask {entry['mask_file']}")
        mask = decode_mask(raw, manifest.mask_encoding, entry["mask_file"])
        od = od_center_from_mask(mask)
    fovea = Coordinate(*entry["fovea_xy"]) if entry["fovea_xy"] else None
    return FundusSample(
        image_id=entry["image_id"],
        image=image,
        mask=mask,
        annot=LandmarkAnnotation(od_center=od, fovea=fovea),
        oc_annotated=manifest.oc_annotated,
    )


def load_dataset(manifest: DatasetManifest, workers: int = 1) -> list[FundusSample]:
    if workers <= 1:
        return [_load_entry(e, manifest) for e in manifest.entries]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda e: _load_entry(e, manifest), manifest.entries))


# ---------------------------------------------------------------------------
# synthetic fundus generator


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic fundus image generator.

    All structural parameters are fractions of the image size.  Ground truth
    is exact by construction: the mask comes from the same ellipse equations
    that paint the image, and the fovea coordinate is the blob center.
    """

    size: int = 256
    fov_radius: float = 0.47
    od_x_range: tuple[float, float] = (0.22, 0.34)
    od_y_range: tuple[float, float] = (0.42, 0.58)
    od_radius_range: tuple[float, float] = (0.055, 0.080)
    cup_ratio_range: tuple[float, float] = (0.3, 0.8)
    fovea_offset_diameters: tuple[float, float] = (2.0, 3.0)
    vessel_count: int = 6
    noise_level: float = 0.02
    seed: int = 0


def _ellipse_mask(shape: tuple[int, int], cx: float, cy: float, rx: float, ry: float) -> np.ndarray:
    ys, xs = np.mgrid[0 : shape[0], 0 : shape[1]]
    return ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0


def _render_sample(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, Coordinate, float]:
    s = spec.size
    shape = (s, s)
    cx, cy = (s - 1) / 2.0, (s - 1) / 2.0
    fov = _ellipse_mask(shape, cx, cy, spec.fov_radius * s, spec.fov_radius * s)

    # retinal background with a gentle radial falloff
    ys, xs = np.mgrid[0:s, 0:s]
    r = np.hypot(xs - cx, ys - cy) / (spec.fov_radius * s)
    base = np.stack(
        [0.72 - 0.10 * r, 0.34 - 0.06 * r, 0.16 - 0.04 * r], axis=-1
    ).astype(np.float32)
    image = np.clip(base, 0.0, 1.0)

    # OD on a random side, pointing the fovea toward the image center
    side = rng.integers(0, 2)  # 0 = left, 1 = right
    fx = rng.uniform(*spec.od_x_range)
    od_x = (fx if side == 0 else 1.0 - fx) * s
    od_y = rng.uniform(*spec.od_y_range) * s
    od_rx = rng.uniform(*spec.od_radius_range) * s
    od_ry = rng.uniform(*spec.od_radius_range) * s
    ratio = rng.uniform(*spec.cup_ratio_range)
    oc_rx, oc_ry = ratio * od_rx, ratio * od_ry
    max_shift = 0.5 * (od_rx - oc_rx)
    oc_x = od_x + rng.uniform(-max_shift, max_shift)
    oc_y = od_y  # vertical extents stay proportional so vCDR matches the draw

    od_region = _ellipse_mask(shape, od_x, od_y, od_rx, od_ry)
    oc_region = _ellipse_mask(shape, oc_x, oc_y, oc_rx, oc_ry)
    mask = np.full(shape, LABEL_BACKGROUND, dtype=np.uint8)
    mask[od_region] = LABEL_OD
    mask[oc_region] = LABEL_OC

    # vessels: dark arcs radiating from the OD center
    vessel_layer = np.zeros(shape, dtype=np.uint8)
    for _ in range(spec.vessel_count):
        angle = rng.uniform(0.0, 2.0 * math.pi)
        length = rng.uniform(0.5, 0.9) * spec.fov_radius * s
        bend = rng.uniform(-0.3, 0.3)
        ts = np.linspace(0.0, 1.0, 24)
        px = od_x + ts * length * math.cos(angle) - bend * length * ts * ts * math.sin(angle)
        py = od_y + ts * length * math.sin(angle) + bend * length * ts * ts * math.cos(angle)
        pts = np.stack([px, py], axis=-1).round().astype(np.int32)
        cv2.polylines(vessel_layer, [pts], False, 1, thickness=1 + int(rng.integers(0, 2)))
    image[vessel_layer.astype(bool)] *= np.array([0.55, 0.4, 0.4], dtype=np.float32)

    image[od_region] = np.array([0.96, 0.82, 0.50], dtype=np.float32)
    image[oc_region] = np.array([1.00, 0.94, 0.72], dtype=np.float32)

    # fovea: darkened Gaussian blob, displaced temporally (toward the center)
    direction = 1.0 if od_x < cx else -1.0
    offset = rng.uniform(*spec.fovea_offset_diameters) * 2.0 * od_rx
    fovea_x = od_x + direction * offset
    fovea_y = od_y + rng.uniform(-0.05, 0.05) * s
    fovea_sigma = 0.03 * s
    blob = np.exp(-((xs - fovea_x) ** 2 + (ys - fovea_y) ** 2) / (2 * fovea_sigma**2))
    image *= (1.0 - 0.55 * blob)[..., None].astype(np.float32)

    image += rng.normal(0.0, spec.noise_level, image.shape).astype(np.float32)
    image = np.clip(image, 0.0, 1.0)
    image[~fov] = 0.0
    mask[~fov] = LABEL_BACKGROUND
    return (image * 255).round().astype(np.uint8), mask, Coordinate(fovea_x, fovea_y), ratio


def generate_synthetic(spec: SyntheticSpec, n: int, out_dir: str | Path) -> DatasetManifest:
    """Write ``n`` synthetic samples (images, masks, annotations.csv)."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    rows = []
    for i in range(n):
        image, mask, fovea, _ = _render_sample(spec, rng)
        image_id = f"synth_{i:04d}"
        cv2.imwrite(str(out_dir / "images" / f"{image_id}.png"), cv2.cvtColor(image, cv2.COLOR_RGB2BGR))
        cv2.imwrite(
            str(out_dir / "masks" / f"{image_id}.png"),
            encode_mask(mask, DEFAULT_MASK_ENCODING),
        )
        rows.append((image_id, f"{fovea.x:.3f}", f"{fovea.y:.3f}"))
    with open(out_dir / "annotations.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "fovea_x", "fovea_y"])
        writer.writerows(rows)
    return build_manifest(out_dir)


# ---------------------------------------------------------------------------
# JND1 binary array cache

_JND_MAGIC = b"JND1"
_JND_DTYPES = {"f4": np.float32, "u1": np.uint8}


def save_array(path: str | Path, array: np.ndarray) -> None:
    """Persist a (H, W) or (C, H, W) array with the JND1 header."""
    if array.ndim == 2:
        array = array[None]
    if array.ndim != 3:
        raise DataError(f"expected 2-D or 3-D array, got shape {array.shape}")
    code = {np.dtype(np.float32): "f4", np.dtype(np.uint8): "u1"}.get(array.dtype)
    if code is None:
        raise DataError(f"unsupported dtype {array.dtype}")
    c, h, w = array.shape
    with open(path, "wb") as fh:
        fh.write(_JND_MAGIC)
        fh.write(code.encode("ascii"))
        fh.write(struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(array).tobytes())


def load_array(path: str | Path) -> np.ndarray:
    """Read a JND1 blob; single-channel arrays come back as (H, W)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _JND_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        code = fh.read(2).decode("ascii")
        if code not in _JND_DTYPES:
            raise DataError(f"{path}: unknown dtype code {code!r}")
        h, w, c = struct.unpack("<III", fh.read(12))
        data = np.frombuffer(fh.read(), dtype=_JND_DTYPES[code])
    if data.size != h * w * c:
        raise DataError(f"{path}: payload holds {data.size} values, header says {h*w*c}")
    array = data.reshape(c, h, w)
    return array[0] if c == 1 else array


# ---------------------------------------------------------------------------
# prediction records (PNG label mask + JSON sidecar)


@dataclass
class PredictionRecord:
    image_id: str
    mask: np.ndarray  # (H, W) label mask in the original frame
    fovea_xy: Optional[Coordinate]
    od_center_xy: Optional[Coordinate]
    vcdr: Optional[float]
    fovea_via_fallback: bool = False


def save_prediction(
    out_dir: str | Path,
    record: PredictionRecord,
    mask_encoding: Optional[dict[int, int]] = None,
) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    encoding = mask_encoding or DEFAULT_MASK_ENCODING
    cv2.imwrite(str(out_dir / f"{record.image_id}.png"), encode_mask(record.mask, encoding))
    payload = {
        "image_id": record.image_id,
        "fovea_xy": list(record.fovea_xy) if record.fovea_xy else None,
        "od_center_xy": list(record.od_center_xy) if record.od_center_xy else None,
        "vcdr": record.vcdr,
        "fovea_via_fallback": record.fovea_via_fallback,
    }
    (out_dir / f"{record.image_id}.json").write_text(json.dumps(payload, indent=1))


def _validate_coord(value, source: str, fieldname: str) -> Optional[Coordinate]:
    if value is None:
        return None
    if (
        not isinstance(value, (list, tuple))
        or len(value) != 2
        or not all(isinstance(v, (int, float)) for v in value)
    ):
        raise DataError(f"{source}: field {fieldname!r} must be null or a [x, y] pair")
    return Coordinate(float(value[0]), float(value[1]))


def load_prediction(
    pred_dir: str | Path, image_id: str, mask_encoding: Optional[dict[int, int]] = None
) -> PredictionRecord:
    pred_dir = Path(pred_dir)
    json_path = pred_dir / f"{image_id}.json"
    if not json_path.exists():
        raise DataError(f"no prediction record {json_path}")
    payload = json.loads(json_path.read_text())
    for key in ("image_id", "fovea_xy", "od_center_xy", "vcdr", "fovea_via_fallback"):
        if key not in payload:
            raise DataError(f"{json_path}: missing field {key!r}")
    if payload["image_id"] != image_id:
        raise DataError(f"{json_path}: field 'image_id' is {payload['image_id']!r}")
    if payload["vcdr"] is not None and not isinstance(payload["vcdr"], (int, float)):
        raise DataError(f"{json_path}: field 'vcdr' must be null or a number")
    if not isinstance(payload["fovea_via_fallback"], bool):
        raise DataError(f"{json_path}: field 'fovea_via_fallback' must be a boolean")
    raw = cv2.imread(str(pred_dir / f"{image_id}.png"), cv2.IMREAD_GRAYSCALE)
    if raw is None:
        raise DataError(f"no prediction mask {pred_dir / f'{image_id}.png'}")
    mask = decode_mask(raw, mask_encoding or DEFAULT_MASK_ENCODING, f"{pred_dir}/{image_id}.png")
    return PredictionRecord(
        image_id=image_id,
        mask=mask,
        fovea_xy=_validate_coord(payload["fovea_xy"], str(json_path), "fovea_xy"),
        od_center_xy=_validate_coord(payload["od_center_xy"], str(json_path), "od_center_xy"),
        vcdr=None if payload["vcdr"] is None else float(payload["vcdr"]),
        fovea_via_fallback=payload["fovea_via_fallback"],
    )


def iter_prediction_ids(pred_dir: str | Path) -> Iterator[str]:
    for json_path in sorted(Path(pred_dir).glob("*.json")):
        yield json_path.stem
