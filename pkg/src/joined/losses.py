"""Training objectives and the progressive three-branch schedule.

Every loss here accepts either numpy arrays or torch tensors: only
elementwise arithmetic and sums are used, so the same definitions back the
evaluation-side contracts and the differentiable training path.

Coordinates entering a loss are expected in normalized units (pixel values
divided by (W-1, H-1) of their frame) so the coordinate terms stay
commensurate with heatmap MSE across resolutions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

DICE_EPS = 1e-6

BRANCH_P = "P"
BRANCH_D = "D"
BRANCH_S = "S"
ALL_BRANCHES = frozenset({BRANCH_P, BRANCH_D, BRANCH_S})


def _check_shapes(a: Any, b: Any) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def mse(a: Any, b: Any) -> Any:
    """Mean of squared elementwise differences."""
    _check_shapes(a, b)
    return ((a - b) ** 2).mean()


def dice_loss(m: Any, p: Any, eps: float = DICE_EPS) -> Any:
    """Soft Dice loss 1 - 2*sum(m*p) / (sum(m+p) + eps).

    Inputs with three or more dimensions are treated as stacks of 2-D
    channels; the per-channel losses are averaged.
    """
    _check_shapes(m, p)
    if m.ndim <= 2:
        inter = (m * p).sum()
        total = (m + p).sum()
        return 1.0 - 2.0 * inter / (total + eps)
    inter = (m * p).sum(axis=(-2, -1))
    total = (m + p).sum(axis=(-2, -1))
    return (1.0 - 2.0 * inter / (total + eps)).mean()


def _unwrap(x: Any) -> Any:
    # accept the target dataclasses (DistanceMap.values, HeatmapPair.channels)
    for attr in ("channels", "values"):
        if hasattr(x, attr):
            return getattr(x, attr)
    return x


def normalize_coordinates(coords: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Scale pixel coordinates (..., 2) as (x, y) into [0, 1] by (W-1, H-1)."""
    h, w = shape
    scale = np.array([max(w - 1, 1), max(h - 1, 1)], dtype=np.float64)
    return np.asarray(coords, dtype=np.float64) / scale


def predictor_loss(d_gt: Any, d_pred: Any) -> Any:
    """MSE against the ground-truth distance map.

    Samples without any landmark carry no distance supervision and
    contribute exactly 0 (callers must also exclude them from batch means).
    """
    if getattr(d_gt, "supervised", True) is False:
        return 0.0
    return mse(_unwrap(d_gt), d_pred)


def detector_loss(h_gt: Any, h_pred: Any, c_p: Any, c_d: Any, m_h: Any) -> Any:
    """Heatmap MSE + branch-consistency coordinate MSE + Dice to the heatmap mask."""
    h_gt = _unwrap(h_gt)
    m_h = _unwrap(m_h)
    return mse(h_gt, h_pred) + mse(c_p, c_d) + dice_loss(m_h, h_pred)


def segmentor_loss(m_onehot: Any, p_s: Any) -> Any:
    """Mean per-channel Dice loss over the (OC, OD, background) channels."""
    return dice_loss(m_onehot, p_s)


def localization_loss(c_gt: Any, c_hat: Any, h_crop_gt: Any, h_flm: Any) -> Any:
    """Fine-localization objective: coordinate MSE + crop heatmap MSE."""
    return mse(c_gt, c_hat) + mse(_unwrap(h_crop_gt), h_flm)


@dataclass(frozen=True)
class LossWeights:
    """Balance coefficients and switch epochs of the progressive schedule."""

    lambda0: float = 1.0
    lambda1: float = 1.0
    tau0: int = 50
    tau1: int = 100

    def __post_init__(self) -> None:
        if self.tau0 >= self.tau1:
            raise ValueError(f"tau0 must be < tau1, got {self.tau0} >= {self.tau1}")
        if self.lambda0 < 0 or self.lambda1 < 0:
            raise ValueError("lambdas must be non-negative")


def active_branches(epoch: int, weights: LossWeights) -> frozenset[str]:
    """Branches trained at ``epoch``: P only, then P+D, then P+D+S.

    Boundary semantics: epoch <= tau0 trains P alone; tau0 < epoch <= tau1
    adds D; later epochs add S.
    """
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if epoch <= weights.tau0:
        return frozenset({BRANCH_P})
    if epoch <= weights.tau1:
        return frozenset({BRANCH_P, BRANCH_D})
    return ALL_BRANCHES


@dataclass(frozen=True)
class JsdmLossReport:
    """Per-step record of the coarse-stage loss terms.

    ``total`` sums exactly the active terms: l_p + lambda0*l_d when D is
    active + lambda1*l_s when S is active.  Inactive terms are stored as 0.
    """

    l_p: float
    l_d: float
    l_s: float
    total: float
    active: frozenset[str]

    @classmethod
    def compose(
        cls,
        l_p: float,
        l_d: float,
        l_s: float,
        active: frozenset[str],
        weights: LossWeights,
    ) -> "JsdmLossReport":
        l_p = float(l_p) if BRANCH_P in active else 0.0
        l_d = float(l_d) if BRANCH_D in active else 0.0
        l_s = float(l_s) if BRANCH_S in active else 0.0
        total = l_p
        if BRANCH_D in active:
            total += weights.lambda0 * l_d
        if BRANCH_S in active:
            total += weights.lambda1 * l_s
        return cls(l_p=l_p, l_d=l_d, l_s=l_s, total=total, active=active)
