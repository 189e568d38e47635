"""Metric 3D voxel grid: dimensions, centers, FOV masks, occupancy labels.

Cells are half-open on every axis: voxel i covers [min + i*res, min + (i+1)*res),
so every in-range point belongs to exactly one voxel and points exactly on the
global max boundary are discarded.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from math import ceil
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import IndexOutOfBoundsError, InvalidSpecError, ShapeMismatchError
from .geometry import CameraRig, Point3, fov_mask_points

_MAGIC = b"OCCG"

# Guard against 64/0.2 -> 320.0000000000001-style float noise in dim counts.
_DIM_EPS = 1e-9


def _axis_dims(lo: float, hi: float, res: float) -> int:
    return int(ceil((hi - lo) / res - _DIM_EPS))


@dataclass(frozen=True)
class VoxelGridSpec:
    """Uniform-resolution grid over [min, max) ranges in meters.

    x is lateral (grid width), y is height (camera y, down-positive),
    z is depth (grid depth).
    """

    x_range: tuple[float, float]
    y_range: tuple[float, float]
    z_range: tuple[float, float]
    resolution: float

    def __post_init__(self):
        if not self.resolution > 0:
            raise InvalidSpecError(f"resolution must be positive, got {self.resolution}")
        for name, (lo, hi) in (("x", self.x_range), ("y", self.y_range), ("z", self.z_range)):
            if not hi > lo:
                raise InvalidSpecError(f"{name}_range must satisfy max > min, got [{lo}, {hi})")

    @property
    def dims(self) -> tuple[int, int, int]:
        return (
            _axis_dims(*self.x_range, self.resolution),
            _axis_dims(*self.y_range, self.resolution),
            _axis_dims(*self.z_range, self.resolution),
        )

    @property
    def mins(self) -> np.ndarray:
        return np.array([self.x_range[0], self.y_range[0], self.z_range[0]], dtype=np.float64)

    def translated(self, dx: float = 0.0, dy: float = 0.0, dz: float = 0.0) -> "VoxelGridSpec":
        return VoxelGridSpec(
            (self.x_range[0] + dx, self.x_range[1] + dx),
            (self.y_range[0] + dy, self.y_range[1] + dy),
            (self.z_range[0] + dz, self.z_range[1] + dz),
            self.resolution,
        )


def grid_dims(spec: VoxelGridSpec) -> tuple[int, int, int]:
    """(X, Y, Z) voxel counts for the spec."""
    return spec.dims


def voxel_center(spec: VoxelGridSpec, i: int, j: int, k: int) -> Point3:
    """Metric center of voxel (i, j, k)."""
    dims = spec.dims
    for idx, n in zip((i, j, k), dims):
        if not 0 <= idx < n:
            raise IndexOutOfBoundsError(f"index ({i}, {j}, {k}) outside grid dims {dims}")
    res = spec.resolution
    return Point3(
        spec.x_range[0] + (i + 0.5) * res,
        spec.y_range[0] + (j + 0.5) * res,
        spec.z_range[0] + (k + 0.5) * res,
    )


def voxel_centers(spec: VoxelGridSpec) -> np.ndarray:
    """All voxel centers as an [X, Y, Z, 3] array."""
    X, Y, Z = spec.dims
    res = spec.resolution
    xs = spec.x_range[0] + (np.arange(X) + 0.5) * res
    ys = spec.y_range[0] + (np.arange(Y) + 0.5) * res
    zs = spec.z_range[0] + (np.arange(Z) + 0.5) * res
    out = np.empty((X, Y, Z, 3), dtype=np.float64)
    out[..., 0] = xs[:, None, None]
    out[..., 1] = ys[None, :, None]
    out[..., 2] = zs[None, None, :]
    return out


def _points_array(cloud) -> np.ndarray:
    if isinstance(cloud, np.ndarray):
        pts = cloud.reshape(-1, 3).astype(np.float64, copy=False)
    else:
        pts = np.array([[p.x, p.y, p.z] for p in cloud], dtype=np.float64).reshape(-1, 3)
    return pts

def point_to_voxel(spec: VoxelGridSpec, p: Point3) -> Optional[tuple[int, int, int]]:
    """Voxel index containing p, or None if p is outside the grid."""
    idx = points_to_voxels(spec, np.array([[p.x, p.y, p.z]]))[0]
    if idx[0] < 0:
        return None
    return int(idx[0]), int(idx[1]), int(idx[2])


def points_to_voxels(spec: VoxelGridSpec, pts: np.ndarray) -> np.ndarray:
    """Indices [N, 3] of the voxels containing each point; (-1,-1,-1) if outside.

    floor((p - min)/res) can disagree with the half-open cell intervals by one
    step near boundaries, so indices are nudged until they satisfy
    min + i*res <= p < min + (i+1)*res exactly.
    """
    pts = _points_array(pts)
    res = spec.resolution
    mins = spec.mins
    dims = np.array(spec.dims)
    idx = np.floor((pts - mins) / res).astype(np.int64)
    for _ in range(2):
        lo = mins + idx * res
        idx -= pts < lo
        idx += pts >= lo + res
    inside = np.all((idx >= 0) & (idx < dims), axis=1)
    out = np.where(inside[:, None], idx, -1)
    return out


@dataclass
class OccupancyGrid:
    """Per-voxel occupancy with a field-of-view mask.

    `values` holds probabilities in [0, 1] or binary labels; it may be a plain
    array or an autodiff tensor (for predictions that feed a loss).
    """

    values: object
    fov_mask: np.ndarray
    spec: VoxelGridSpec

    def values_array(self) -> np.ndarray:
        data = getattr(self.values, "data", self.values)
        return np.asarray(data, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, int, int]:
        data = getattr(self.values, "data", self.values)
        return tuple(np.shape(data))


def fov_mask(spec: VoxelGridSpec, rig: CameraRig, require_both_cameras: bool = True) -> np.ndarray:
    """[X, Y, Z] boolean mask: voxel center inside the camera field of view."""
    centers = voxel_centers(spec)
    flat = fov_mask_points(rig, centers.reshape(-1, 3), require_both_cameras)
    return flat.reshape(spec.dims)


def occupancy_from_points(
    spec: VoxelGridSpec,
    cloud,
    rig: Optional[CameraRig] = None,
    require_both_cameras: bool = True,
) -> OccupancyGrid:
    """Binary occupancy: 1 iff at least one point falls inside the voxel.

    Points outside the grid are ignored. The FOV mask is computed from voxel
    centers when a rig is given, otherwise every voxel counts as visible.
    """
    dims = spec.dims
    labels = np.zeros(dims, dtype=np.float64)
    pts = _points_array(cloud)
    if pts.size:
        idx = points_to_voxels(spec, pts)
        idx = idx[idx[:, 0] >= 0]
        labels[idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
    mask = fov_mask(spec, rig, require_both_cameras) if rig is not None else np.ones(dims, dtype=bool)
    return OccupancyGrid(values=labels, fov_mask=mask, spec=spec)


def save_occupancy(grid: OccupancyGrid, path) -> None:
    """Write the flat binary layout: OCCG header, value bytes, mask bytes.

    Values are stored as one byte per voxel in x-major order (x slowest,
    then y, then z); probabilities quantize to round(p * 255).
    """
    values = grid.values_array()
    X, Y, Z = values.shape
    data = struct.pack("<4sIII", _MAGIC, X, Y, Z)
    if np.isin(values, (0.0, 1.0)).all():
        vbytes = values.astype(np.uint8)
    else:
        vbytes = np.clip(np.round(values * 255.0), 0, 255).astype(np.uint8)
    mbytes = grid.fov_mask.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(data)
        fh.write(np.ascontiguousarray(vbytes).tobytes())
        fh.write(np.ascontiguousarray(mbytes).tobytes())


def load_occupancy(path, spec: Optional[VoxelGridSpec] = None) -> OccupancyGrid:
    """Read a grid file written by save_occupancy.

    Byte values 0/1 load as binary labels; anything else as value/255. The
    metric spec is not stored in the file and must be supplied by the caller
    (a unit placeholder is used otherwise).
    """
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != _MAGIC:
            raise InvalidSpecError(f"not an occupancy grid file: {path}")
        _, X, Y, Z = struct.unpack("<4sIII", header)
        n = X * Y * Z
        raw = fh.read(2 * n)
    if len(raw) != 2 * n:
        raise InvalidSpecError(f"truncated occupancy grid file: {path}")
    vbytes = np.frombuffer(raw[:n], dtype=np.uint8).reshape(X, Y, Z)
    mask = np.frombuffer(raw[n:], dtype=np.uint8).reshape(X, Y, Z).astype(bool)
    if vbytes.max(initial=0) <= 1:
        values = vbytes.astype(np.float64)
    else:
        values = vbytes.astype(np.float64) / 255.0
    if spec is None:
        spec = VoxelGridSpec((0.0, float(X)), (0.0, float(Y)), (0.0, float(Z)), 1.0)
    if spec.dims != (X, Y, Z):
        raise ShapeMismatchError(f"spec dims {spec.dims} do not match file dims {(X, Y, Z)}")
    return OccupancyGrid(values=values, fov_mask=mask, spec=spec)
