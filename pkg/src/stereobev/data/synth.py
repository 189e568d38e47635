"""Synthetic stereo scenes: textured boxes on a flat ground plane.

Scenes are fully determined by (seed, index). Surface points are sampled on
the ground and on box faces, given position-hashed colors so that stereo
correspondence is learnable, and splatted into both cameras with a z-buffer.
The rendered disparity is exact by construction: every splat lands at
u_left - fx*baseline/z in the right image. Occupancy labels come from the
same point set, so label and image evidence agree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..boxes import BevBox, rotated_iou
from ..evaluation import GroundTruthBox
from ..geometry import CameraRig
from ..voxelgrid import OccupancyGrid, VoxelGridSpec, occupancy_from_points
from .kitti import StereoSample, save_sample

_DESK_GRID = VoxelGridSpec((-6.4, 6.4), (-1.0, 0.6), (2.0, 14.8), 0.2)  # 64 x 8 x 64
_DESK_RIG = CameraRig(fx=120.0, fy=120.0, cx=64.0, cy=48.0, baseline=0.5, image_w=128, image_h=96)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    seed: int = 0
    grid: VoxelGridSpec = field(default_factory=lambda: _DESK_GRID)
    rig: CameraRig = field(default_factory=lambda: _DESK_RIG)
    box_count: tuple[int, int] = (1, 3)
    center_u: tuple[float, float] = (-1.0, 1.0)
    center_v: tuple[float, float] = (4.0, 6.2)
    size_w: tuple[float, float] = (0.9, 1.3)
    size_l: tuple[float, float] = (1.8, 2.6)
    box_height: tuple[float, float] = (1.3, 1.4)
    ground_y: float = 0.5
    ground_density: float = 50.0  # points per square meter
    surface_density: float = 160.0

    def __post_init__(self):
        if self.ground_density <= 0 or self.surface_density <= 0:
            raise ValueError("point densities must be positive")
        lo, hi = self.center_u
        if not (self.grid.x_range[0] <= lo <= hi <= self.grid.x_range[1]):
            raise ValueError("box centers must lie within the grid x range")
        lo, hi = self.center_v
        if not (self.grid.z_range[0] <= lo <= hi <= self.grid.z_range[1]):
            raise ValueError("box centers must lie within the grid z range")


def _hash01(values: np.ndarray) -> np.ndarray:
    """Cheap deterministic position hash into [0, 1) for texture."""
    return np.modf(np.sin(values) * 43758.5453123)[0] % 1.0


def _point_colors(pts: np.ndarray, base: np.ndarray) -> np.ndarray:
    keys = pts @ np.array([12.9898, 78.233, 37.719])
    tex = 0.55 + 0.45 * _hash01(keys)
    return np.clip(base[None, :] * tex[:, None], 0.0, 1.0)


def _sample_boxes(spec: SyntheticSceneSpec, rng: np.random.Generator) -> list[tuple[BevBox, float]]:
    count = int(rng.integers(spec.box_count[0], spec.box_count[1] + 1))
    boxes: list[tuple[BevBox, float]] = []
    attempts = 0
    while len(boxes) < count and attempts < 200:
        attempts += 1
        candidate = BevBox(
            u=float(rng.uniform(*spec.center_u)),
            v=float(rng.uniform(*spec.center_v)),
            w=float(rng.uniform(*spec.size_w)),
            h=float(rng.uniform(*spec.size_l)),
            theta=float(rng.uniform(-math.pi, math.pi)),
        )
        if all(rotated_iou(candidate, b) < 0.02 for b, _ in boxes):
            boxes.append((candidate, float(rng.uniform(*spec.box_height))))
    return boxes


def _ground_points(spec: SyntheticSceneSpec, rng: np.random.Generator) -> np.ndarray:
    x_lo, x_hi = spec.grid.x_range
    z_lo, z_hi = spec.grid.z_range
    area = (x_hi - x_lo) * (z_hi - z_lo)
    n = int(area * spec.ground_density)
    xs = rng.uniform(x_lo, x_hi, n)
    zs = rng.uniform(z_lo, z_hi, n)
    ys = np.full(n, spec.ground_y)
    return np.column_stack([xs, ys, zs])


def _box_surface_points(box: BevBox, height: float, ground_y: float, density: float, rng) -> np.ndarray:
    c, s = math.cos(box.theta), math.sin(box.theta)
    rot = np.array([[c, -s], [s, c]])
    top_y = ground_y - height
    panels = []
    # four side faces in the local frame: (fixed axis, value, span axis, span)
    for axis, value, span in ((0, -box.w / 2, box.h), (0, box.w / 2, box.h), (1, -box.h / 2, box.w), (1, box.h / 2, box.w)):
        n = max(4, int(span * height * density))
        along = rng.uniform(-span / 2, span / 2, n)
        ys = rng.uniform(top_y, ground_y, n)
        local = np.zeros((n, 2))
        local[:, axis] = value
        local[:, 1 - axis] = along
        panels.append((local, ys))
    n_top = max(4, int(box.w * box.h * density))
    top_local = np.column_stack(
        [rng.uniform(-box.w / 2, box.w / 2, n_top), rng.uniform(-box.h / 2, box.h / 2, n_top)]
    )
    panels.append((top_local, np.full(n_top, top_y)))
    pts = []
    for local, ys in panels:
        plane = local @ rot.T + np.array([box.u, box.v])
        pts.append(np.column_stack([plane[:, 0], ys, plane[:, 1]]))
    return np.vstack(pts)


def _splat(rig: CameraRig, pts: np.ndarray, colors: np.ndarray, right: bool) -> np.ndarray:
    image = np.zeros((3, rig.image_h, rig.image_w))
    z = pts[:, 2]
    front = z > 0
    pts, colors, z = pts[front], colors[front], z[front]
    u = rig.fx * pts[:, 0] / z + rig.cx
    if right:
        u = u - rig.fx * rig.baseline / z
    v = rig.fy * pts[:, 1] / z + rig.cy
    ui = np.round(u).astype(np.int64)
    vi = np.round(v).astype(np.int64)
    ok = (ui >= 0) & (ui < rig.image_w) & (vi >= 0) & (vi < rig.image_h)
    ui, vi, z, colors = ui[ok], vi[ok], z[ok], colors[ok]
    # painter's algorithm: farthest first, nearer splats overwrite
    order = np.argsort(-z, kind="stable")
    image[:, vi[order], ui[order]] = colors[order].T
    return image


def _image_box_height(rig: CameraRig, box: BevBox, height: float, ground_y: float) -> float:
    corners = box.corners()
    vs = []
    for y in (ground_y, ground_y - height):
        for cu, cv in corners:
            if cv > 0:
                vs.append(rig.fy * y / cv + rig.cy)
    if not vs:
        return 0.0
    return float(max(vs) - min(vs))


def synth_scene(spec: SyntheticSceneSpec, index: int = 0) -> tuple[StereoSample, OccupancyGrid]:
    """Generate scene `index` of the stream owned by spec.seed."""
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, index)))
    boxes = _sample_boxes(spec, rng)
    points = [_ground_points(spec, rng)]
    colors = [_point_colors(points[0], np.array([0.45, 0.5, 0.4]))]
    palette = np.array(
        [[0.9, 0.3, 0.25], [0.25, 0.55, 0.95], [0.95, 0.8, 0.25], [0.5, 0.9, 0.45], [0.85, 0.4, 0.9]]
    )
    for i, (box, height) in enumerate(boxes):
        pts = _box_surface_points(box, height, spec.ground_y, spec.surface_density, rng)
        points.append(pts)
        colors.append(_point_colors(pts, palette[i % len(palette)]))
    cloud = np.vstack(points)
    color = np.vstack(colors)
    left = _splat(spec.rig, cloud, color, right=False)
    right = _splat(spec.rig, cloud, color, right=True)
    labels = occupancy_from_points(spec.grid, cloud, rig=spec.rig)
    gt_boxes = [
        GroundTruthBox(
            box=box,
            image_bbox_height=_image_box_height(spec.rig, box, height, spec.ground_y),
            occlusion=0,
            truncation=0.0,
        )
        for box, height in boxes
    ]
    sample = StereoSample(left=left, right=right, rig=spec.rig, cloud=cloud, gt_boxes=gt_boxes)
    return sample, labels


def make_dataset(
    spec: SyntheticSceneSpec, count: int, root=None
) -> list[tuple[StereoSample, OccupancyGrid]]:
    """Generate `count` scenes; also persist them in the directory layout when
    `root` is given."""
    out = []
    for index in range(count):
        sample, labels = synth_scene(spec, index)
        out.append((sample, labels))
        if root is not None:
            save_sample(root, f"{index:06d}", sample)
    return out
