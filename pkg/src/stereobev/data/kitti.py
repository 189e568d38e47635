"""KITTI-format parsers and writers plus the on-disk dataset layout.

Calibration files carry 3x4 projection matrices P2/P3 for the rectified color
pair; labels are 15-field lines; point clouds are packed little-endian
float32 (x, y, z, reflectance) records. A dataset directory uses the standard
subfolders image_2/, image_3/, calib/, label_2/, velodyne/.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from ..boxes import BevBox, normalize_angle
from ..errors import MalformedLineError, MalformedMatrixError, MissingKeyError, TruncatedFileError
from ..evaluation import GroundTruthBox
from ..geometry import CameraRig

# standard full-frame size of the benchmark's color cameras
DEFAULT_IMAGE_SIZE = (1242, 375)


@dataclass
class StereoSample:
    """One stereo frame: images in [0, 1], camera rig, points, ground truth."""

    left: np.ndarray  # [3, H, W]
    right: np.ndarray  # [3, H, W]
    rig: CameraRig
    cloud: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    gt_boxes: list[GroundTruthBox] = field(default_factory=list)


def _matrix_lines(text: str) -> dict[str, np.ndarray]:
    out = {}
    for line in text.splitlines():
        if ":" not in line:
            continue
        key, _, rest = line.partition(":")
        values = rest.split()
        try:
            out[key.strip()] = np.array([float(v) for v in values])
        except ValueError as exc:
            raise MalformedMatrixError(f"non-numeric entry in {key!r}: {exc}") from exc
    return out


def _projection(entries: dict, key: str) -> np.ndarray:
    if key not in entries:
        raise MissingKeyError(f"calibration lacks {key!r}")
    values = entries[key]
    if values.size != 12:
        raise MalformedMatrixError(f"{key} must have 12 entries, got {values.size}")
    return values.reshape(3, 4)


def parse_kitti_calib(text: str, image_w: int = DEFAULT_IMAGE_SIZE[0], image_h: int = DEFAULT_IMAGE_SIZE[1]) -> CameraRig:
    """Rectified rig from the P2/P3 projection rows; baseline from their x-offsets."""
    entries = _matrix_lines(text)
    p2 = _projection(entries, "P2")
    p3 = _projection(entries, "P3")
    fx = p2[0, 0]
    baseline = (p2[0, 3] - p3[0, 3]) / fx
    return CameraRig(
        fx=fx,
        fy=p2[1, 1],
        cx=p2[0, 2],
        cy=p2[1, 2],
        baseline=baseline,
        image_w=image_w,
        image_h=image_h,
    )


def parse_velo_to_cam(text: str) -> Optional[np.ndarray]:
    """Combined 3x4 rectified transform R0_rect @ Tr_velo_to_cam, if present."""
    entries = _matrix_lines(text)
    if "Tr_velo_to_cam" not in entries:
        return None
    tr = _projection(entries, "Tr_velo_to_cam")
    if "R0_rect" in entries:
        r0 = entries["R0_rect"]
        if r0.size != 9:
            raise MalformedMatrixError(f"R0_rect must have 9 entries, got {r0.size}")
        r0 = r0.reshape(3, 3)
    else:
        r0 = np.eye(3)
    combined = np.zeros((3, 4))
    combined[:, :3] = r0 @ tr[:, :3]
    combined[:, 3] = r0 @ tr[:, 3]
    return combined


def write_kitti_calib(rig: CameraRig) -> str:
    # pick the stored offset so that (P2 - P3)/fx recovers the baseline bit-exactly
    t = rig.fx * rig.baseline
    for _ in range(8):
        if t / rig.fx == rig.baseline:
            break
        t = math.nextafter(t, math.inf if t / rig.fx < rig.baseline else -math.inf)
    p2 = [rig.fx, 0.0, rig.cx, 0.0, 0.0, rig.fy, rig.cy, 0.0, 0.0, 0.0, 1.0, 0.0]
    p3 = list(p2)
    p3[3] = -t
    lines = [
        "P2: " + " ".join(f"{v:.17e}" for v in p2),
        "P3: " + " ".join(f"{v:.17e}" for v in p3),
    ]
    return "\n".join(lines) + "\n"


# label lines: type trunc occ alpha x1 y1 x2 y2 h3d w l x y z ry
_CAR_TYPES = ("Car",)


def parse_kitti_labels(text: str) -> list[GroundTruthBox]:
    """BEV ground truth from label lines.

    The BEV box takes (u, v) = (x, z), (w, h) = (width, length) and heading
    from rotation_y; DontCare entries (and non-car types, which the car-only
    protocol must neither reward nor punish) land in the ignored bucket.
    """
    boxes = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 15:
            raise MalformedLineError(f"label line needs 15 fields, got {len(fields)}: {line!r}")
        kind = fields[0]
        try:
            trunc, occ, _alpha, x1, y1, x2, y2, _h3, w3, l3, x, _y, z, ry = (float(v) for v in fields[1:])
        except ValueError as exc:
            raise MalformedLineError(f"bad number in label line {line!r}") from exc
        height_px = y2 - y1
        theta = normalize_angle(-(ry + math.pi / 2.0))
        is_car = kind in _CAR_TYPES
        box = BevBox(
            u=x,
            v=z,
            w=max(w3, 1e-6),
            h=max(l3, 1e-6),
            theta=theta,
            class_id=0 if is_car else -1,
        )
        boxes.append(
            GroundTruthBox(
                box=box,
                image_bbox_height=height_px,
                occlusion=int(occ),
                truncation=trunc,
                difficulty="" if is_car else "ignored",
            )
        )
    return boxes


def write_kitti_labels(boxes: list[GroundTruthBox]) -> str:
    lines = []
    for gt in boxes:
        kind = "Car" if gt.box.class_id == 0 else "DontCare"
        ry = normalize_angle(-gt.box.theta - math.pi / 2.0)
        values = [
            gt.truncation,
            float(gt.occlusion),
            -10.0,
            0.0,
            0.0,
            0.0,
            gt.image_bbox_height,
            1.5,
            gt.box.w,
            gt.box.h,
            gt.box.u,
            0.0,
            gt.box.v,
            ry,
        ]
        lines.append(kind + " " + " ".join(f"{v:.8f}" for v in values))
    return "\n".join(lines) + ("\n" if lines else "")


def read_point_cloud(data: bytes, transform: Optional[np.ndarray] = None) -> np.ndarray:
    """Packed float32 x,y,z,reflectance records -> [N, 3] float64 points.

    A 3x4 `transform` (see parse_velo_to_cam) maps the points into the
    rectified camera frame; reflectance is discarded either way.
    """
    if len(data) % 16:
        raise TruncatedFileError(f"point cloud byte length {len(data)} is not a multiple of 16")
    raw = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    pts = raw[:, :3].astype(np.float64)
    if transform is not None:
        pts = pts @ transform[:, :3].T + transform[:, 3]
    return pts


def write_point_cloud(points: np.ndarray) -> bytes:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    packed = np.zeros((pts.shape[0], 4), dtype="<f4")
    packed[:, :3] = pts
    return packed.tobytes()


def read_image(path) -> np.ndarray:
    """PNG (or any raster) -> [3, H, W] float64 in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return np.transpose(arr, (2, 0, 1))


def write_image(path, image: np.ndarray) -> None:
    arr = np.transpose(np.asarray(image), (1, 2, 0))
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


# -- dataset directory layout ---------------------------------------------------


def _paths(root, frame_id: str) -> dict[str, Path]:
    root = Path(root)
    return {
        "left": root / "image_2" / f"{frame_id}.png",
        "right": root / "image_3" / f"{frame_id}.png",
        "calib": root / "calib" / f"{frame_id}.txt",
        "label": root / "label_2" / f"{frame_id}.txt",
        "velodyne": root / "velodyne" / f"{frame_id}.bin",
    }


def save_sample(root, frame_id: str, sample: StereoSample) -> None:
    paths = _paths(root, frame_id)
    for path in paths.values():
        path.parent.mkdir(parents=True, exist_ok=True)
    write_image(paths["left"], sample.left)
    write_image(paths["right"], sample.right)
    paths["calib"].write_text(write_kitti_calib(sample.rig))
    paths["label"].write_text(write_kitti_labels(sample.gt_boxes))
    paths["velodyne"].write_bytes(write_point_cloud(sample.cloud))


def load_sample(root, frame_id: str) -> StereoSample:
    paths = _paths(root, frame_id)
    left = read_image(paths["left"])
    right = read_image(paths["right"])
    h, w = left.shape[1:]
    calib_text = paths["calib"].read_text()
    rig = parse_kitti_calib(calib_text, image_w=w, image_h=h)
    cloud = np.zeros((0, 3))
    if paths["velodyne"].exists():
        transform = parse_velo_to_cam(calib_text)
        cloud = read_point_cloud(paths["velodyne"].read_bytes(), transform)
    gt_boxes = []
    if paths["label"].exists():
        gt_boxes = parse_kitti_labels(paths["label"].read_text())
    return StereoSample(left=left, right=right, rig=rig, cloud=cloud, gt_boxes=gt_boxes)


def list_frames(root) -> list[str]:
    image_dir = Path(root) / "image_2"
    if not image_dir.is_dir():
        return []
    return sorted(p.stem for p in image_dir.glob("*.png"))
