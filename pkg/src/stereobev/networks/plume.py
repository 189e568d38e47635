"""Metric feature volume built by projecting voxel centers into both images.

Each voxel center is projected into the left and right feature maps, the two
feature vectors are bilinearly sampled and concatenated (optionally with the
voxel's metric coordinates); voxels outside the stereo field of view get
all-zero features. Differentiable with respect to both feature maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..convolution import gather_bilinear
from ..errors import RigMismatchError, ShapeMismatchError
from ..geometry import CameraRig, fov_mask_points
from ..tensor import Tensor, as_tensor
from ..voxelgrid import VoxelGridSpec, voxel_centers


@dataclass
class FeatureVolume:
    values: Tensor  # [C, X, Y, Z]
    spec: VoxelGridSpec

    @property
    def channels(self) -> int:
        return int(self.values.shape[0])


def _projections(spec: VoxelGridSpec, rig: CameraRig, require_both_cameras: bool):
    centers = voxel_centers(spec).reshape(-1, 3)
    valid = fov_mask_points(rig, centers, require_both_cameras)
    z = centers[:, 2]
    safe_z = np.where(z > 0, z, 1.0)
    u_left = np.where(valid, rig.fx * centers[:, 0] / safe_z + rig.cx, 0.0)
    v = np.where(valid, rig.fy * centers[:, 1] / safe_z + rig.cy, 0.0)
    u_right = np.where(valid, u_left - rig.fx * rig.baseline / safe_z, 0.0)
    return centers, valid, u_left, u_right, v


def build_plume(
    left_feat: Tensor,
    right_feat: Tensor,
    spec: VoxelGridSpec,
    rig: CameraRig,
    concat_voxel_coords: bool = False,
    require_both_cameras: bool = True,
) -> FeatureVolume:
    left_feat, right_feat = as_tensor(left_feat), as_tensor(right_feat)
    if left_feat.shape != right_feat.shape:
        raise ShapeMismatchError(f"feature maps differ: {left_feat.shape} vs {right_feat.shape}")
    if left_feat.ndim != 3:
        raise ShapeMismatchError(f"expected [C, H, W] features, got {left_feat.shape}")
    _, h, w = left_feat.shape
    if (rig.image_w, rig.image_h) != (w, h):
        raise RigMismatchError(
            f"rig image size {rig.image_w}x{rig.image_h} does not match feature map {w}x{h}; "
            "rescale intrinsics for reduced-resolution features"
        )
    centers, valid, u_left, u_right, v = _projections(spec, rig, require_both_cameras)
    parts = [
        gather_bilinear(left_feat, u_left, v, valid),
        gather_bilinear(right_feat, u_right, v, valid),
    ]
    if concat_voxel_coords:
        coords = centers.T * valid[None, :]
        parts.append(Tensor(coords))
    stacked = T.concat(parts, axis=0)
    x_dim, y_dim, z_dim = spec.dims
    volume = stacked.reshape((int(stacked.shape[0]), x_dim, y_dim, z_dim))
    return FeatureVolume(values=volume, spec=spec)


def image_feature_fusion(
    left_feat: Tensor,
    right_feat: Tensor,
    occupancy_values,
    bev_features: Tensor,
    spec: VoxelGridSpec,
    rig: CameraRig,
    require_both_cameras: bool = True,
) -> Tensor:
    """Occupancy-weighted image evidence appended to the BEV features.

    Builds an image feature volume exactly like build_plume (without
    coordinates), weights every voxel's feature by its predicted occupancy,
    sums over the height axis, and concatenates onto bev_features channels.
    """
    volume = build_plume(
        left_feat, right_feat, spec, rig, concat_voxel_coords=False, require_both_cameras=require_both_cameras
    ).values
    occ = as_tensor(occupancy_values)
    if tuple(occ.shape) != spec.dims:
        raise ShapeMismatchError(f"occupancy {occ.shape} does not match grid {spec.dims}")
    weighted = T.mul(volume, occ.reshape((1,) + tuple(spec.dims)))
    flattened = weighted.sum(axis=2)  # collapse height -> [2C, X, Z]
    if tuple(bev_features.shape[1:]) != tuple(flattened.shape[1:]):
        raise ShapeMismatchError(
            f"bev features {bev_features.shape} incompatible with fused plane {flattened.shape}"
        )
    return T.concat([bev_features, flattened], axis=0)
