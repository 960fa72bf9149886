"""Training loops for the coarse net and the two fine-stage nets.

The coarse stage follows the progressive schedule: the distance branch
trains alone first, the detection branch joins after tau0, the segmentation
branch after tau1.  The branch-consistency coordinate term uses temperature-
sharpened soft argmax during training (hard argmax has zero gradient almost
everywhere); inference keeps the exact hard extraction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import losses
from .config import RunConfig
from .data_io import FundusSample
from .extraction import FallbackParams
from .masks import labels_from_probs, one_hot
from .nets import FlmNet, FsmNet, JsdmNet, build_flm, build_fsm, build_jsdm, save_checkpoint
from .pipeline import (
    CoarseExample,
    CoarseResult,
    FovTransform,
    RoiBox,
    augment,
    build_coarse_example,
    coarse_conditioning_matrix,
    crop_roi,
    preprocess_mask,
    run_coarse,
    warp_map,
)
from .targets import Coordinate, gaussian_heatmap, od_center_from_mask

SOFT_ARGMAX_BETA = 25.0


class TrainingError(RuntimeError):
    pass


def set_determinism(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# differentiable coordinate extraction for the consistency term


def _soft_axis_coord(profile: torch.Tensor, beta: float) -> torch.Tensor:
    """Soft argmax of a non-negative profile (..., N), normalized to [0, 1]."""
    n = profile.shape[-1]
    peak = profile.max(dim=-1, keepdim=True).values.clamp_min(1e-8)
    weights = torch.softmax(beta * profile / peak, dim=-1)
    idx = torch.arange(n, dtype=profile.dtype, device=profile.device)
    return (weights * idx).sum(dim=-1) / max(n - 1, 1)


def soft_heatmap_coords(heat: torch.Tensor, beta: float = SOFT_ARGMAX_BETA) -> torch.Tensor:
    """Per-channel axis-accumulated soft coordinates; (B, C, H, W) -> (B, C, 2)."""
    x = _soft_axis_coord(heat.sum(dim=-2), beta)
    y = _soft_axis_coord(heat.sum(dim=-1), beta)
    return torch.stack([x, y], dim=-1)


def soft_distance_peaks(
    dist: torch.Tensor, beta: float = SOFT_ARGMAX_BETA, suppression_fraction: float = 1.0 / 8.0
) -> torch.Tensor:
    """Two soft peaks of (B, 1, H, W) distance maps, normalized to [0, 1].

    Each peak is a local soft argmax: the window (radius H * fraction) is
    anchored at the detached hard argmax, so the two-peak structure survives
    even when both landmarks share the same maximum value.  The second
    window additionally excludes the first suppression disk.
    """
    b, _, h, w = dist.shape
    flat = dist.reshape(b, -1)
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dist.dtype, device=dist.device),
        torch.arange(w, dtype=dist.dtype, device=dist.device),
        indexing="ij",
    )
    xs = xs.reshape(1, -1)
    ys = ys.reshape(1, -1)
    radius2 = (h * suppression_fraction) ** 2
    neg_inf = torch.tensor(float("-inf"), dtype=dist.dtype, device=dist.device)

    def local_soft_peak(valid: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        with torch.no_grad():
            masked = torch.where(valid, flat, neg_inf)
            hard = masked.argmax(dim=-1)
            hx = (hard % w).to(dist.dtype).unsqueeze(-1)
            hy = (hard // w).to(dist.dtype).unsqueeze(-1)
            window = valid & ((xs - hx) ** 2 + (ys - hy) ** 2 <= radius2)
            peak = torch.where(window, flat, neg_inf).max(dim=-1, keepdim=True).values
        logits = torch.where(window, beta * flat / peak.clamp_min(1e-8), neg_inf)
        weights = torch.softmax(logits, dim=-1)
        inside = ((xs - hx) ** 2 + (ys - hy) ** 2 <= radius2)
        return (weights * xs).sum(-1), (weights * ys).sum(-1), inside

    everywhere = torch.ones_like(flat, dtype=torch.bool)
    x1, y1, disk1 = local_soft_peak(everywhere)
    x2, y2, _ = local_soft_peak(~disk1)
    peaks = torch.stack(
        [torch.stack([x1, y1], dim=-1), torch.stack([x2, y2], dim=-1)], dim=1
    )
    scale = torch.tensor([max(w - 1, 1), max(h - 1, 1)], dtype=dist.dtype, device=dist.device)
    return peaks / scale


def order_peaks_like(peaks: torch.Tensor, detected: torch.Tensor) -> torch.Tensor:
    """Reorder each sample's peak pair to minimize total distance to the
    detected (od, fovea) pair; the assignment itself is non-differentiable."""
    with torch.no_grad():
        straight = (peaks - detected).norm(dim=-1).sum(-1)
        swapped = (peaks.flip(1) - detected).norm(dim=-1).sum(-1)
        swap = swapped < straight
    return torch.where(swap[:, None, None], peaks.flip(1), peaks)


# ---------------------------------------------------------------------------
# coarse stage


@dataclass
class PreparedSample:
    sample: FundusSample
    example: CoarseExample
    fov: FovTransform


def prepare_samples(samples: Sequence[FundusSample], config: RunConfig) -> list[PreparedSample]:
    out = []
    for s in samples:
        example, fov = build_coarse_example(
            s.image,
            s.mask,
            s.annot.fovea,
            resolution=config.coarse_resolution,
            sigma_divisor=config.sigma_divisor,
        )
        out.append(PreparedSample(sample=s, example=example, fov=fov))
    return out


def _batch(items: list, size: int) -> list[list]:
    return [items[i : i + size] for i in range(0, len(items), size)]


def _write_log(path: Path, header: list[str], rows: list[list[float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _scalar(value) -> float:
    return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)


def _make_scheduler(optimizer, config: RunConfig, epochs: int):
    if config.lr_schedule == "cosine":
        return torch.optim.lr_scheduler.CosineAnnealingLR(
            optimizer, T_max=epochs, eta_min=config.lr * 0.05
        )
    return None


def _check_finite(value: torch.Tensor, epoch: int, batch_id: int) -> None:
    if not torch.isfinite(value):
        raise TrainingError(f"non-finite loss at epoch {epoch}, batch {batch_id}")


def train_coarse(
    config: RunConfig, samples: Sequence[FundusSample], out_dir: str | Path
) -> tuple[JsdmNet, list[losses.JsdmLossReport]]:
    """Train the coarse net under the progressive schedule; writes the
    checkpoint and the epoch,l_p,l_d,l_s,total loss log."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    set_determinism(config.seed, config.deterministic)
    device = config.torch_device()
    rng = np.random.default_rng(config.seed)
    prepared = prepare_samples(samples, config)
    net = build_jsdm(config.jsdm_spec()).to(device)
    net.train()
    optimizer = torch.optim.Adam(net.parameters(), lr=config.lr)
    scheduler = _make_scheduler(optimizer, config, config.coarse_epochs)
    weights = config.loss_weights()
    enabled = frozenset(config.branches)
    policy = config.augment_policy()
    history: list[losses.JsdmLossReport] = []
    rows = []
    for epoch in range(1, config.coarse_epochs + 1):
        active = losses.active_branches(epoch, weights) & enabled
        epoch_terms = {"P": [], "D": [], "S": []}
        for batch_id, batch in enumerate(_batch(prepared, config.batch_size)):
            examples = [
                augment(p.example, policy, rng) if config.augment else p.example for p in batch
            ]
            l_p, l_d, l_s = _coarse_batch_losses(net, examples, active, config, device)
            total = torch.zeros((), device=device)
            if "P" in active:
                total = total + l_p
                epoch_terms["P"].append(_scalar(l_p))
            if "D" in active:
                total = total + weights.lambda0 * l_d
                epoch_terms["D"].append(_scalar(l_d))
            if "S" in active:
                total = total + weights.lambda1 * l_s
                epoch_terms["S"].append(_scalar(l_s))
            _check_finite(total, epoch, batch_id)
            if active and total.requires_grad:
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
        report = losses.JsdmLossReport.compose(
            l_p=float(np.mean(epoch_terms["P"])) if epoch_terms["P"] else 0.0,
            l_d=float(np.mean(epoch_terms["D"])) if epoch_terms["D"] else 0.0,
            l_s=float(np.mean(epoch_terms["S"])) if epoch_terms["S"] else 0.0,
            active=active,
            weights=weights,
        )
        history.append(report)
        rows.append([epoch, report.l_p, report.l_d, report.l_s, report.total])
        if scheduler is not None:
            scheduler.step()
    _write_log(out_dir / "coarse_loss.csv", ["epoch", "l_p", "l_d", "l_s", "total"], rows)
    net.cpu()
    save_checkpoint(out_dir / "jsdm", net)
    return net, history


def _coarse_batch_losses(
    net: JsdmNet,
    examples: list[CoarseExample],
    active: frozenset[str],
    config: RunConfig,
    device: torch.device,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(
        np.stack([e.image.transpose(2, 0, 1) for e in examples]).astype(np.float32)
    ).to(device)
    outputs = net(x)
    zero = torch.zeros((), device=device)
    l_p = l_d = l_s = zero

    if "P" in active and outputs.d_p is not None:
        target = torch.from_numpy(np.stack([e.dist.values for e in examples]))[:, None].to(device)
        supervised = torch.tensor([e.dist.supervised for e in examples], device=device)
        if bool(supervised.any()):
            per_sample = ((outputs.d_p - target) ** 2).mean(dim=(1, 2, 3))
            l_p = per_sample[supervised].mean()

    if "D" in active and outputs.h_d is not None:
        heat = torch.from_numpy(np.stack([e.heat for e in examples])).to(device)
        heat_mask = torch.from_numpy(
            np.stack([e.heat_mask for e in examples]).astype(np.float32)
        ).to(device)
        l_d = losses.mse(heat, outputs.h_d) + losses.dice_loss(heat_mask, outputs.h_d)
        if outputs.d_p is not None:
            c_d = soft_heatmap_coords(outputs.h_d)
            c_p = order_peaks_like(soft_distance_peaks(outputs.d_p), c_d.detach())
            mode = config.consistency_backprop
            if mode in ("detector", "none"):
                c_p = c_p.detach()
            if mode == "none":
                c_d = c_d.detach()
            l_d = l_d + losses.mse(c_p, c_d)

    if "S" in active and outputs.p_s is not None:
        have = [i for i, e in enumerate(examples) if e.onehot is not None]
        if have:
            onehot = torch.from_numpy(np.stack([examples[i].onehot for i in have])).to(device)
            l_s = losses.segmentor_loss(onehot, outputs.p_s[have])

    return l_p, l_d, l_s


# ---------------------------------------------------------------------------
# fine stages


@dataclass
class FineContext:
    """Per-sample state shared by the fine trainers: original-frame anchors
    plus conditioning maps (coarse predictions, or ground-truth targets when
    no coarse net is supplied)."""

    sample: FundusSample
    fov: FovTransform
    center_seg: Optional[Coordinate]
    center_loc: Optional[Coordinate]
    cond_mask: np.ndarray  # (H256, W256) uint8 labels
    cond_dist: np.ndarray  # (H256, W256) float32
    cond_heat: np.ndarray  # (2, H256, W256) float32


def build_fine_contexts(
    prepared: list[PreparedSample],
    config: RunConfig,
    coarse_net: Optional[JsdmNet],
) -> list[FineContext]:
    contexts = []
    for p in prepared:
        coarse: Optional[CoarseResult] = None
        if coarse_net is not None:
            coarse = run_coarse(coarse_net, p.example.image, config.fallback_params())
        if coarse is not None and coarse.p_s is not None:
            cond_mask = labels_from_probs(coarse.p_s)
        elif p.example.mask is not None:
            cond_mask = p.example.mask
        else:
            cond_mask = np.zeros(p.example.image.shape[:2], dtype=np.uint8)
        cond_dist = coarse.d_p if coarse is not None and coarse.d_p is not None else p.example.dist.values
        cond_heat = coarse.h_d if coarse is not None and coarse.h_d is not None else p.example.heat

        gt_od = od_center_from_mask(p.sample.mask) if p.sample.mask is not None else None
        gt_fovea = p.sample.annot.fovea
        if config.teacher_forcing:
            center_seg, center_loc = gt_od, gt_fovea
        else:
            center_seg = p.fov.to_original(coarse.estimate.od) if coarse else gt_od
            center_loc = p.fov.to_original(coarse.estimate.fovea) if coarse else gt_fovea
        contexts.append(
            FineContext(
                sample=p.sample,
                fov=p.fov,
                center_seg=center_seg,
                center_loc=center_loc,
                cond_mask=cond_mask,
                cond_dist=cond_dist,
                cond_heat=cond_heat,
            )
        )
    return contexts


def _jittered_box(
    center: Coordinate, jitter_px: int, size: int, shape: tuple[int, int], rng: np.random.Generator
) -> RoiBox:
    dx, dy = rng.integers(-jitter_px, jitter_px + 1, size=2)
    return crop_roi(Coordinate(center.x + dx, center.y + dy), size, shape)


def train_fine_seg(
    config: RunConfig,
    samples: Sequence[FundusSample],
    out_dir: str | Path,
    coarse_net: Optional[JsdmNet] = None,
) -> tuple[FsmNet, list[float]]:
    """Train the fine segmenter on OD-centered crops with the coarse mask as
    the fourth input channel."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    set_determinism(config.seed, config.deterministic)
    rng = np.random.default_rng(config.seed + 1)
    prepared = prepare_samples(samples, config)
    contexts = [
        c
        for c in build_fine_contexts(prepared, config, coarse_net)
        if c.sample.mask is not None and c.center_seg is not None
    ]
    if not contexts:
        raise TrainingError("no sample with a mask and an OD center to train on")
    device = config.torch_device()
    net = build_fsm(config.fsm_spec()).to(device)
    net.train()
    optimizer = torch.optim.Adam(net.parameters(), lr=config.lr)
    scheduler = _make_scheduler(optimizer, config, config.fine_seg_epochs)
    size = config.seg_crop_size
    history = []
    rows = []
    for epoch in range(1, config.fine_seg_epochs + 1):
        epoch_losses = []
        for batch_id, batch in enumerate(_batch(contexts, config.batch_size)):
            inputs, targets = [], []
            for ctx in batch:
                shape = ctx.sample.image.shape[:2]
                box = _jittered_box(ctx.center_seg, config.jitter_px, size, shape, rng)
                crop = box.crop(ctx.sample.image).astype(np.float32) / 255.0
                cond = warp_map(
                    ctx.cond_mask, coarse_conditioning_matrix(box, ctx.fov), (size, size), nearest=True
                )
                inputs.append(
                    np.concatenate([crop.transpose(2, 0, 1), cond[None].astype(np.float32) / 2.0])
                )
                targets.append(one_hot(box.crop(ctx.sample.mask)))
            x = torch.from_numpy(np.stack(inputs)).to(device)
            t = torch.from_numpy(np.stack(targets)).to(device)
            loss = losses.segmentor_loss(t, net(x))
            _check_finite(loss, epoch, batch_id)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(_scalar(loss))
        mean_loss = float(np.mean(epoch_losses))
        history.append(mean_loss)
        rows.append([epoch, mean_loss, mean_loss])
        if scheduler is not None:
            scheduler.step()
    _write_log(out_dir / "fine_seg_loss.csv", ["epoch", "l_s", "total"], rows)
    net.cpu()
    save_checkpoint(out_dir / "fsm", net)
    return net, history


def train_fine_loc(
    config: RunConfig,
    samples: Sequence[FundusSample],
    out_dir: str | Path,
    coarse_net: Optional[JsdmNet] = None,
) -> tuple[FlmNet, list[float]]:
    """Train the fine localizer on fovea-centered crops conditioned on the
    coarse distance map and heatmaps."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    set_determinism(config.seed, config.deterministic)
    rng = np.random.default_rng(config.seed + 2)
    prepared = prepare_samples(samples, config)
    contexts = [
        c
        for c in build_fine_contexts(prepared, config, coarse_net)
        if c.sample.annot.fovea is not None and c.center_loc is not None
    ]
    if not contexts:
        raise TrainingError("no sample with a fovea annotation to train on")
    device = config.torch_device()
    net = build_flm(config.flm_spec()).to(device)
    net.train()
    optimizer = torch.optim.Adam(net.parameters(), lr=config.lr)
    scheduler = _make_scheduler(optimizer, config, config.fine_loc_epochs)
    size = config.loc_crop_size
    sigma = size / config.sigma_divisor
    history = []
    rows = []
    for epoch in range(1, config.fine_loc_epochs + 1):
        reg_losses, heat_losses = [], []
        for batch_id, batch in enumerate(_batch(contexts, config.batch_size)):
            inputs, coord_targets, heat_targets = [], [], []
            for ctx in batch:
                shape = ctx.sample.image.shape[:2]
                box = _jittered_box(ctx.center_loc, config.jitter_px, size, shape, rng)
                crop = box.crop(ctx.sample.image).astype(np.float32) / 255.0
                m = coarse_conditioning_matrix(box, ctx.fov)
                d_crop = warp_map(ctx.cond_dist, m, (size, size))
                h_crop = np.stack([warp_map(ch, m, (size, size)) for ch in ctx.cond_heat])
                inputs.append(np.concatenate([crop.transpose(2, 0, 1), d_crop[None], h_crop]))
                local = box.to_local(ctx.sample.annot.fovea)
                coord_targets.append([local.x / (size - 1), local.y / (size - 1)])
                heat_targets.append(gaussian_heatmap((size, size), local, sigma))
            x = torch.from_numpy(np.stack(inputs).astype(np.float32)).to(device)
            c_t = torch.tensor(coord_targets, dtype=torch.float32, device=device)
            h_t = torch.from_numpy(np.stack(heat_targets))[:, None].to(device)
            coords, heatmap = net(x)
            l_reg = losses.mse(c_t, coords)
            l_heat = losses.mse(h_t, heatmap)
            loss = l_reg + l_heat
            _check_finite(loss, epoch, batch_id)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            reg_losses.append(_scalar(l_reg))
            heat_losses.append(_scalar(l_heat))
        l_reg_m, l_heat_m = float(np.mean(reg_losses)), float(np.mean(heat_losses))
        history.append(l_reg_m + l_heat_m)
        rows.append([epoch, l_reg_m, l_heat_m, l_reg_m + l_heat_m])
        if scheduler is not None:
            scheduler.step()
    _write_log(out_dir / "fine_loc_loss.csv", ["epoch", "l_reg", "l_heat", "total"], rows)
    net.cpu()
    save_checkpoint(out_dir / "flm", net)
    return net, history
