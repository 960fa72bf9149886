"""Evaluation suite: landmark distances, Dice overlap, vCDR error.

All metrics are computed in original-image pixel units.  Per-metric pairs
with a missing side (absent ground truth or prediction) are skipped and
counted rather than scored.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import data_io
from .masks import structure_mask
from .targets import Coordinate, od_center_from_mask


def aed(pred: Coordinate, gt: Coordinate) -> float:
    """Euclidean distance between predicted and true landmark, in pixels."""
    return math.hypot(pred.x - gt.x, pred.y - gt.y)


def dice_score(pred_mask: np.ndarray, gt_mask: np.ndarray, label: str) -> float:
    """Set-overlap Dice 2|A&B| / (|A|+|B|) of one structure ("od"/"oc").

    Both sets empty scores 1.0 (correct absence); exactly one empty scores 0.
    """
    a = structure_mask(pred_mask, label)
    b = structure_mask(gt_mask, label)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def vcdr(mask: np.ndarray) -> Optional[float]:
    """Vertical cup-to-disc ratio from inclusive row extents.

    Returns None when the mask has no cup or no disc pixels.
    """
    cup_rows = np.nonzero(structure_mask(mask, "oc").any(axis=1))[0]
    disc_rows = np.nonzero(structure_mask(mask, "od").any(axis=1))[0]
    if cup_rows.size == 0 or disc_rows.size == 0:
        return None
    cup = int(cup_rows.max()) - int(cup_rows.min()) + 1
    disc = int(disc_rows.max()) - int(disc_rows.min()) + 1
    return cup / disc


@dataclass
class ImageRecord:
    image_id: str
    fovea_aed: Optional[float] = None
    od_aed: Optional[float] = None
    od_dice: Optional[float] = None
    oc_dice: Optional[float] = None
    vcdr_pred: Optional[float] = None
    vcdr_gt: Optional[float] = None
    abs_vcdr_err: Optional[float] = None


# metric key -> (column header with direction marker, percent scale)
_COLUMNS = {
    "fovea_aed": ("Fovea AED (px) ↓", False),
    "od_aed": ("OD AED (px) ↓", False),
    "od_dice": ("OD Dice (%) ↑", True),
    "oc_dice": ("OC Dice (%) ↑", True),
    "abs_vcdr_err": ("vCDR MAE (%) ↓", True),
}


@dataclass
class EvalRecord:
    records: list[ImageRecord]
    unmatched: list[str]

    def aggregate(self) -> dict[str, tuple[float, float, int]]:
        """mean, std and count per metric, skipping missing entries."""
        out = {}
        for key in _COLUMNS:
            values = [getattr(r, key) for r in self.records if getattr(r, key) is not None]
            if values:
                out[key] = (float(np.mean(values)), float(np.std(values)), len(values))
        return out


def score_pair(record: ImageRecord, pred: data_io.PredictionRecord, gt: data_io.FundusSample) -> None:
    if pred.fovea_xy is not None and gt.annot.fovea is not None:
        record.fovea_aed = aed(pred.fovea_xy, gt.annot.fovea)
    if gt.mask is not None:
        gt_od = od_center_from_mask(gt.mask)
        if pred.od_center_xy is not None and gt_od is not None:
            record.od_aed = aed(pred.od_center_xy, gt_od)
        record.od_dice = dice_score(pred.mask, gt.mask, "od")
        if gt.oc_annotated:
            record.oc_dice = dice_score(pred.mask, gt.mask, "oc")
            record.vcdr_pred = vcdr(pred.mask)
            record.vcdr_gt = vcdr(gt.mask)
            if record.vcdr_pred is not None and record.vcdr_gt is not None:
                record.abs_vcdr_err = abs(record.vcdr_pred - record.vcdr_gt)


def evaluate(pred_dir: str | Path, gt_manifest: data_io.DatasetManifest) -> EvalRecord:
    """Score every prediction in ``pred_dir`` against the dataset.

    Image ids present on only one side are reported in ``unmatched``, never
    silently dropped.
    """
    samples = {s.image_id: s for s in data_io.load_dataset(gt_manifest)}
    pred_ids = set(data_io.iter_prediction_ids(pred_dir))
    unmatched = sorted(pred_ids.symmetric_difference(samples))
    records = []
    for image_id in sorted(pred_ids & set(samples)):
        pred = data_io.load_prediction(pred_dir, image_id, gt_manifest.mask_encoding)
        record = ImageRecord(image_id=image_id)
        score_pair(record, pred, samples[image_id])
        records.append(record)
    return EvalRecord(records=records, unmatched=unmatched)


def write_csv(result: EvalRecord, path: str | Path) -> None:
    names = [f.name for f in fields(ImageRecord)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for r in result.records:
            writer.writerow([getattr(r, n) if getattr(r, n) is not None else "" for n in names])


def render_table(result: EvalRecord, method: str = "JOINED") -> str:
    """Markdown comparison table (mean +/- std, percent metrics scaled)."""
    agg = result.aggregate()
    headers, cells = ["Method"], [method]
    for key, (title, percent) in _COLUMNS.items():
        headers.append(title)
        if key not in agg:
            cells.append("-")
            continue
        mean, std, n = agg[key]
        scale = 100.0 if percent else 1.0
        cells.append(f"{mean * scale:.2f} ± {std * scale:.2f} (n={n})")
    lines = [
        "| " + " | ".join(headers) + " |",
        "|" + "|".join("---" for _ in headers) + "|",
        "| " + " | ".join(cells) + " |",
    ]
    if result.unmatched:
        lines.append("")
        lines.append(f"Unmatched image ids: {', '.join(result.unmatched)}")
    return "\n".join(lines)
