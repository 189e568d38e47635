"""Oriented BEV boxes: decoding, rotated IoU, and non-maximum suppression.

Boxes live in the BEV plane with u lateral and v depth (meters). A box is an
axis-aligned w-by-h rectangle rotated by theta about its center, theta
normalized to [-pi, pi). Intersection areas come from Sutherland-Hodgman
clipping of convex quadrilaterals with shoelace areas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateBoxError, ShapeMismatchError

_EDGE_EPS = 1e-9


def normalize_angle(theta: float) -> float:
    """Wrap into [-pi, pi)."""
    out = math.fmod(theta + math.pi, 2.0 * math.pi)
    if out < 0:
        out += 2.0 * math.pi
    return out - math.pi


@dataclass(frozen=True)
class BevBox:
    u: float
    v: float
    w: float
    h: float
    theta: float = 0.0
    score: float = 1.0
    class_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    def corners(self) -> np.ndarray:
        """[4, 2] counterclockwise corners: rotate the axis-aligned corner set."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        half = np.array(
            [[-self.w / 2, -self.h / 2], [self.w / 2, -self.h / 2], [self.w / 2, self.h / 2], [-self.w / 2, self.h / 2]]
        )
        rot = np.array([[c, -s], [s, c]])
        return half @ rot.T + np.array([self.u, self.v])

    @property
    def area(self) -> float:
        return self.w * self.h

    def translated(self, du: float, dv: float) -> "BevBox":
        return replace(self, u=self.u + du, v=self.v + dv)


def _polygon_area(pts: np.ndarray) -> float:
    if len(pts) < 3:
        return 0.0
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_convex(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Clip a convex polygon by the half-planes of a counterclockwise convex clipper."""
    output = subject
    n = len(clipper)
    for i in range(n):
        if len(output) == 0:
            break
        a = clipper[i]
        b = clipper[(i + 1) % n]
        edge = b - a
        # signed distance to the directed edge; inside = left side
        d = edge[0] * (output[:, 1] - a[1]) - edge[1] * (output[:, 0] - a[0])
        keep: list[np.ndarray] = []
        m = len(output)
        for j in range(m):
            k = (j + 1) % m
            inside_j = d[j] >= -_EDGE_EPS
            inside_k = d[k] >= -_EDGE_EPS
            if inside_j:
                keep.append(output[j])
            if inside_j != inside_k:
                t = d[j] / (d[j] - d[k])
                keep.append(output[j] + t * (output[k] - output[j]))
        output = np.array(keep) if keep else np.empty((0, 2))
    return output


def _axis_aligned_iou(a: BevBox, b: BevBox) -> float:
    iw = min(a.u + a.w / 2, b.u + b.w / 2) - max(a.u - a.w / 2, b.u - b.w / 2)
    ih = min(a.v + a.h / 2, b.v + b.h / 2) - max(a.v - a.h / 2, b.v - b.h / 2)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def intersection_area(a: BevBox, b: BevBox) -> float:
    """Exact overlap area of two oriented rectangles via polygon clipping."""
    return _polygon_area(_clip_convex(a.corners(), b.corners()))


def rotated_iou(a: BevBox, b: BevBox) -> float:
    """Intersection-over-union of two oriented BEV rectangles, symmetric in its arguments.

    Both thetas exactly zero take a closed-form axis-aligned path, which is
    precision-exact; the clipping path is used otherwise.
    """
    for box in (a, b):
        if box.w <= 0 or box.h <= 0:
            raise DegenerateBoxError(f"box has non-positive size: w={box.w}, h={box.h}")
    if a.theta == 0.0 and b.theta == 0.0:
        return _axis_aligned_iou(a, b)
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, inter / union)


def nms(boxes: list[BevBox], iou_threshold: float) -> list[BevBox]:
    """Greedy suppression: keep in descending score, drop overlaps above threshold.

    Ties break on (score desc, u asc, v asc) so the result is deterministic.
    """
    order = sorted(boxes, key=lambda box: (-box.score, box.u, box.v))
    kept: list[BevBox] = []
    for candidate in order:
        if all(rotated_iou(candidate, k) <= iou_threshold for k in kept):
            kept.append(candidate)
    return kept


def decode_boxes(
    class_map: np.ndarray,
    regression_maps: np.ndarray,
    grid,
    stride: int = 4,
    score_threshold: float = 0.5,
) -> list[BevBox]:
    """Dense head outputs -> discrete boxes.

    class_map holds logits [Xs, Zs] (or [1, Xs, Zs]); regression_maps is
    [6, Xs, Zs] with channels (du, dv, log w, log h, sin theta, cos theta).
    Cell (i, k) covers a stride x stride voxel block; its metric center plus
    (du, dv) gives the box center.
    """
    class_map = np.asarray(getattr(class_map, "data", class_map), dtype=np.float64)
    regression_maps = np.asarray(getattr(regression_maps, "data", regression_maps), dtype=np.float64)
    if class_map.ndim == 3:
        class_map = class_map[0]
    if regression_maps.shape[0] != 6 or regression_maps.shape[1:] != class_map.shape:
        raise ShapeMismatchError(
            f"regression maps {regression_maps.shape} do not match class map {class_map.shape}"
        )
    scores = 1.0 / (1.0 + np.exp(-class_map))
    res = grid.resolution
    boxes: list[BevBox] = []
    for i, k in zip(*np.nonzero(scores >= score_threshold)):
        du, dv, lw, lh, sin_t, cos_t = regression_maps[:, i, k]
        cell_u = grid.x_range[0] + (i * stride + stride / 2.0) * res
        cell_v = grid.z_range[0] + (k * stride + stride / 2.0) * res
        boxes.append(
            BevBox(
                u=cell_u + du,
                v=cell_v + dv,
                w=math.exp(lw),
                h=math.exp(lh),
                theta=math.atan2(sin_t, cos_t),
                score=float(scores[i, k]),
            )
        )
    return boxes


def format_detections(boxes: list[BevBox]) -> str:
    """Line-oriented text: 'class u v w h theta score', 9 significant digits."""
    lines = [
        f"{b.class_id} {b.u:.9g} {b.v:.9g} {b.w:.9g} {b.h:.9g} {b.theta:.9g} {b.score:.9g}"
        for b in boxes
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def parse_detections(text: str) -> list[BevBox]:
    boxes = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 7:
            raise ShapeMismatchError(f"detection line needs 7 fields, got {len(fields)}: {line!r}")
        cls = int(fields[0])
        u, v, w, h, theta, score = (float(f) for f in fields[1:])
        boxes.append(BevBox(u=u, v=v, w=w, h=h, theta=theta, score=score, class_id=cls))
    return boxes


def save_detections(path, boxes: list[BevBox]) -> None:
    with open(path, "w") as fh:
        fh.write(format_detections(boxes))


def load_detections(path) -> list[BevBox]:
    with open(path) as fh:
        return parse_detections(fh.read())
