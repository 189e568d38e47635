"""Training losses and the dense detection target codec.

Occupancy uses masked binary cross entropy over field-of-view voxels; the
detection loss is a focal classification term plus smooth-L1 regression on
positive cells. Two smooth-L1 modes exist: `huber_beta_0_5` (continuous,
default for training) and `paper_literal` (0.5|x| below 0.5, |x|-0.5 above,
discontinuous at the branch point but kept for fidelity testing).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .boxes import BevBox
from .errors import ShapeMismatchError
from .tensor import Tensor, as_tensor
from .voxelgrid import OccupancyGrid, VoxelGridSpec

PROB_EPS = 1e-7
SMOOTH_L1_MODES = ("paper_literal", "huber_beta_0_5")


@dataclass
class LossReport:
    """Scalar loss values plus the voxel/cell counts that produced them."""

    depth_loss: float = 0.0
    focal_loss: float = 0.0
    regression_loss: float = 0.0
    n_voxels: int = 0
    n_cells: int = 0
    n_positive: int = 0

    @property
    def detection_loss(self) -> float:
        return self.focal_loss + self.regression_loss


def _values_tensor(grid: OccupancyGrid) -> Tensor:
    return grid.values if isinstance(grid.values, Tensor) else Tensor(np.asarray(grid.values))


def occupancy_bce(pred: OccupancyGrid, label: OccupancyGrid) -> Tensor:
    """Mean binary cross entropy over voxels inside the field of view.

    Predictions are clamped to [eps, 1-eps] before the log; voxels with
    fov_mask=False contribute neither loss nor gradient. Returns 0 when every
    voxel is masked out.
    """
    pred_values = _values_tensor(pred)
    if tuple(pred_values.shape) != tuple(label.shape):
        raise ShapeMismatchError(f"prediction {pred_values.shape} vs label {label.shape}")
    if pred.fov_mask.shape != label.fov_mask.shape or not np.array_equal(pred.fov_mask, label.fov_mask):
        raise ShapeMismatchError("prediction and label FOV masks differ")
    mask = label.fov_mask.astype(np.float64)
    y = label.values_array()
    p = pred_values.clip(PROB_EPS, 1.0 - PROB_EPS)
    per_voxel = -(T.mul(p.log(), y) + T.mul((1.0 - p).log(), 1.0 - y))
    count = max(1.0, float(mask.sum()))
    return T.mul(per_voxel, mask).sum() / count


def focal(p: float, c: int, alpha: float = 0.25, gamma: float = 2.0) -> float:
    """Focal term for one prediction: down-weights well-classified examples."""
    p = min(max(p, PROB_EPS), 1.0 - PROB_EPS)
    if c == 1:
        return -alpha * (1.0 - p) ** gamma * math.log(p)
    return -(1.0 - alpha) * p**gamma * math.log(1.0 - p)


def focal_map(probs: Tensor, targets: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Elementwise focal loss over a probability tensor with a 0/1 target array."""
    c = np.asarray(targets, dtype=np.float64)
    if tuple(probs.shape) != c.shape:
        raise ShapeMismatchError(f"probs {probs.shape} vs targets {c.shape}")
    p = probs.clip(PROB_EPS, 1.0 - PROB_EPS)
    pos = -alpha * T.mul((1.0 - p) ** gamma * p.log(), c)
    neg = -(1.0 - alpha) * T.mul(p**gamma * (1.0 - p).log(), 1.0 - c)
    return pos + neg


def smooth_l1(x: float, mode: str = "huber_beta_0_5") -> float:
    if mode == "paper_literal":
        return 0.5 * abs(x) if abs(x) < 0.5 else abs(x) - 0.5
    if mode == "huber_beta_0_5":
        return x * x if abs(x) < 0.5 else abs(x) - 0.25
    raise ValueError(f"unknown smooth_l1 mode {mode!r}")


def smooth_l1_map(x: Tensor, mode: str = "huber_beta_0_5") -> Tensor:
    """Elementwise smooth-L1; the branch selection acts as a constant mask."""
    if mode not in SMOOTH_L1_MODES:
        raise ValueError(f"unknown smooth_l1 mode {mode!r}")
    x = as_tensor(x)
    near = (np.abs(x.data) < 0.5).astype(np.float64)
    if mode == "paper_literal":
        inner = 0.5 * x.abs()
        outer = x.abs() - 0.5
    else:
        inner = x * x
        outer = x.abs() - 0.25
    return T.mul(inner, near) + T.mul(outer, 1.0 - near)


@dataclass
class DetectionTargets:
    class_map: np.ndarray  # [Xs, Zs] in {0, 1}
    regression: np.ndarray  # [6, Xs, Zs]: du, dv, log w, log h, sin, cos
    positive: np.ndarray  # [Xs, Zs] bool
    stride: int
    grid: VoxelGridSpec


def bev_cell_centers(grid: VoxelGridSpec, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Metric (u, v) centers of stride x stride BEV cells as [Xs, Zs] arrays."""
    X, _, Z = grid.dims
    xs, zs = X // stride, Z // stride
    res = grid.resolution
    u = grid.x_range[0] + (np.arange(xs) * stride + stride / 2.0) * res
    v = grid.z_range[0] + (np.arange(zs) * stride + stride / 2.0) * res
    return np.broadcast_to(u[:, None], (xs, zs)).copy(), np.broadcast_to(v[None, :], (xs, zs)).copy()


def encode_detection_targets(boxes: list[BevBox], grid: VoxelGridSpec, stride: int = 4) -> DetectionTargets:
    """Rasterize ground-truth boxes onto the stride-4 BEV cell lattice.

    A cell is positive when its center lies inside a box (nearest box center
    wins on overlap); positives carry (du, dv, log w, log h, sin, cos) with
    the offset expressed in meters from the cell center.
    """
    cell_u, cell_v = bev_cell_centers(grid, stride)
    xs, zs = cell_u.shape
    class_map = np.zeros((xs, zs))
    regression = np.zeros((6, xs, zs))
    best_dist = np.full((xs, zs), np.inf)
    for box in boxes:
        du = box.u - cell_u
        dv = box.v - cell_v
        c, s = math.cos(box.theta), math.sin(box.theta)
        local_u = c * du + s * dv
        local_v = -s * du + c * dv
        inside = (np.abs(local_u) <= box.w / 2) & (np.abs(local_v) <= box.h / 2)
        dist = du * du + dv * dv
        take = inside & (dist < best_dist)
        best_dist[take] = dist[take]
        class_map[take] = 1.0
        for ch, value in enumerate((du, dv)):
            regression[ch][take] = value[take]
        regression[2][take] = math.log(box.w)
        regression[3][take] = math.log(box.h)
        regression[4][take] = math.sin(box.theta)
        regression[5][take] = math.cos(box.theta)
    return DetectionTargets(
        class_map=class_map,
        regression=regression,
        positive=class_map > 0,
        stride=stride,
        grid=grid,
    )


def detection_loss(
    cls_logits: Tensor,
    regression: Tensor,
    targets: DetectionTargets,
    alpha: float = 0.25,
    gamma: float = 2.0,
    smooth_mode: str = "huber_beta_0_5",
) -> tuple[Tensor, LossReport]:
    """Focal over every cell (normalized by positives, floor 1) plus smooth-L1
    summed over the six regression channels and averaged over positive cells."""
    cls_logits = as_tensor(cls_logits)
    regression = as_tensor(regression)
    if cls_logits.ndim == 3:
        if cls_logits.shape[0] != 1:
            raise ShapeMismatchError(f"class logits must have one channel, got {cls_logits.shape}")
        cls_logits = cls_logits.reshape(cls_logits.shape[1:])
    if tuple(cls_logits.shape) != targets.class_map.shape:
        raise ShapeMismatchError(f"class logits {cls_logits.shape} vs targets {targets.class_map.shape}")
    if tuple(regression.shape) != targets.regression.shape:
        raise ShapeMismatchError(f"regression {regression.shape} vs targets {targets.regression.shape}")

    n_positive = int(targets.positive.sum())
    norm = float(max(1, n_positive))

    probs = cls_logits.sigmoid()
    focal_total = focal_map(probs, targets.class_map, alpha, gamma).sum() / norm

    residual = regression - Tensor(targets.regression)
    per_element = smooth_l1_map(residual, smooth_mode)
    pos_mask = targets.positive.astype(np.float64)[None, :, :]
    regression_total = T.mul(per_element, pos_mask).sum() / norm

    total = focal_total + regression_total
    report = LossReport(
        depth_loss=0.0,
        focal_loss=focal_total.item(),
        regression_loss=regression_total.item(),
        n_cells=int(targets.class_map.size),
        n_positive=n_positive,
    )
    return total, report
