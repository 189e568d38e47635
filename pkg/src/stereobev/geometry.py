"""Pinhole projection and rectified-stereo disparity/depth conversions.

Coordinate convention: camera frame with x right, y down (image-aligned),
z forward. All quantities are 64-bit floats; every function is pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import NonPositiveDepthError, NonPositiveDisparityError


class PixelCoord(NamedTuple):
    u: float
    v: float


@dataclass(frozen=True)
class CameraRig:
    """Rectified stereo pair: shared intrinsics, horizontal baseline.

    The left camera is the reference; the right camera is offset by
    `baseline` meters along +x, so a point at depth z appears shifted by
    disparity d = fx * baseline / z pixels to the left in the right image.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float
    image_w: int
    image_h: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not self.baseline > 0:
            raise ValueError(f"baseline must be positive, got {self.baseline}")
        if self.image_w < 1 or self.image_h < 1:
            raise ValueError(f"image size must be >= 1, got {self.image_w}x{self.image_h}")

    def scaled(self, factor: float) -> "CameraRig":
        """Rig for a feature map downscaled by `factor` (e.g. 0.5 for half)."""
        return CameraRig(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=self.cx * factor,
            cy=self.cy * factor,
            baseline=self.baseline,
            image_w=max(1, int(round(self.image_w * factor))),
            image_h=max(1, int(round(self.image_h * factor))),
        )


@dataclass(frozen=True)
class Point3:
    """Point in the camera frame (meters): x right, y down, z forward."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.z)):
            raise ValueError(f"point components must be finite, got ({self.x}, {self.y}, {self.z})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


def project_to_image(rig: CameraRig, p: Point3) -> PixelCoord:
    """Project a camera-frame point onto the left image (subpixel, unclamped)."""
    if p.z <= 0:
        raise NonPositiveDepthError(f"cannot project point with z={p.z}")
    return PixelCoord(rig.fx * p.x / p.z + rig.cx, rig.fy * p.y / p.z + rig.cy)


def project_to_right(rig: CameraRig, p: Point3) -> PixelCoord:
    """Project onto the right image: left u minus disparity, same v."""
    u, v = project_to_image(rig, p)
    return PixelCoord(u - rig.fx * rig.baseline / p.z, v)


def depth_to_disparity(rig: CameraRig, z: float) -> float:
    if z <= 0:
        raise NonPositiveDepthError(f"depth must be positive, got {z}")
    return rig.fx * rig.baseline / z


def disparity_to_depth(rig: CameraRig, d: float) -> float:
    if d <= 0:
        raise NonPositiveDisparityError(f"disparity must be positive, got {d}")
    return rig.fx * rig.baseline / d


def in_fov(rig: CameraRig, p: Point3, require_both_cameras: bool = True) -> bool:
    """True iff the point is in front of the rig and projects inside the image.

    With `require_both_cameras` the right-image projection must also land in
    bounds, so stereo features exist for the point.
    """
    if p.z <= 0:
        return False
    u, v = project_to_image(rig, p)
    if not (0.0 <= u <= rig.image_w - 1 and 0.0 <= v <= rig.image_h - 1):
        return False
    if require_both_cameras:
        ur = u - rig.fx * rig.baseline / p.z
        if not 0.0 <= ur <= rig.image_w - 1:
            return False
    return True


# Vectorized counterparts used by the voxel grid and feature-volume code.
# They take [N, 3] arrays and mirror the scalar functions exactly.

def project_points(rig: CameraRig, xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Left-image (u, v) for an [N, 3] array; depths must be masked by the caller."""
    xyz = np.asarray(xyz, dtype=np.float64)
    z = xyz[:, 2]
    u = rig.fx * xyz[:, 0] / z + rig.cx
    v = rig.fy * xyz[:, 1] / z + rig.cy
    return u, v


def fov_mask_points(rig: CameraRig, xyz: np.ndarray, require_both_cameras: bool = True) -> np.ndarray:
    """Boolean in-FOV mask for an [N, 3] array of camera-frame points."""
    xyz = np.asarray(xyz, dtype=np.float64)
    z = xyz[:, 2]
    front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = rig.fx * xyz[:, 0] / z + rig.cx
        v = rig.fy * xyz[:, 1] / z + rig.cy
        ok = front & (u >= 0) & (u <= rig.image_w - 1) & (v >= 0) & (v <= rig.image_h - 1)
        if require_both_cameras:
            ur = u - rig.fx * rig.baseline / z
            ok &= (ur >= 0) & (ur <= rig.image_w - 1)
    return ok
