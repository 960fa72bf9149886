"""Rendering of loss curves and per-image diagnostic panels."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .data_io import FundusSample
from .masks import labels_from_probs
from .nets import FlmNet, FsmNet, JsdmNet
from .pipeline import CoarseResult, preprocess, run_coarse, run_fine_seg


def plot_loss_curves(csv_path: str | Path, out_png: str | Path) -> None:
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    data = np.array(rows) if rows else np.zeros((0, len(header)))
    fig, ax = plt.subplots(figsize=(7, 4))
    for j, name in enumerate(header[1:], start=1):
        ax.plot(data[:, 0], data[:, j], label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(Path(csv_path).stem)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def _show(ax, image, title, cmap=None):
    ax.imshow(image, cmap=cmap, interpolation="nearest")
    ax.set_title(title, fontsize=8)
    ax.axis("off")


def render_sample_panel(
    sample: FundusSample,
    jsdm: JsdmNet,
    out_png: str | Path,
    fsm: Optional[FsmNet] = None,
    flm: Optional[FlmNet] = None,
    coarse_resolution: int = 256,
) -> None:
    """One figure per image: input, distance map, heatmaps, coarse and fine
    masks, plus the ground truth when available."""
    image256, fov = preprocess(sample.image, out_size=coarse_resolution)
    coarse: CoarseResult = run_coarse(jsdm, image256)
    fine_mask = None
    if fsm is not None and coarse.p_s is not None:
        try:
            fine_mask, _ = run_fine_seg(fsm, sample.image, coarse, fov)
        except ValueError:
            fine_mask = None
    fig, axes = plt.subplots(2, 4, figsize=(12, 6))
    _show(axes[0, 0], image256, "input")
    _show(axes[0, 1], coarse.d_p if coarse.d_p is not None else np.zeros(image256.shape[:2]),
          "distance map", cmap="magma")
    _show(axes[0, 2], coarse.h_d[0] if coarse.h_d is not None else np.zeros(image256.shape[:2]),
          "OD heatmap", cmap="magma")
    _show(axes[0, 3], coarse.h_d[1] if coarse.h_d is not None else np.zeros(image256.shape[:2]),
          "fovea heatmap", cmap="magma")
    _show(axes[1, 0], labels_from_probs(coarse.p_s) if coarse.p_s is not None
          else np.zeros(image256.shape[:2]), "coarse mask", cmap="viridis")
    _show(axes[1, 1], fine_mask if fine_mask is not None else np.zeros(sample.image.shape[:2]),
          "fine mask", cmap="viridis")
    _show(axes[1, 2], sample.mask if sample.mask is not None else np.zeros(sample.image.shape[:2]),
          "ground truth", cmap="viridis")
    axes[1, 3].axis("off")
    est = coarse.estimate
    axes[1, 3].text(
        0.0,
        0.6,
        f"{sample.image_id}\n"
        f"od=({est.od.x:.1f}, {est.od.y:.1f}) conf={est.confidence_od:.2f}\n"
        f"fovea=({est.fovea.x:.1f}, {est.fovea.y:.1f}) conf={est.confidence_fovea:.2f}\n"
        f"fallback={est.fovea_via_fallback}",
        fontsize=8,
        family="monospace",
    )
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
