"""Feature-volume processing and the occupancy header.

The hybrid network runs two 3x3x3 convolutions over the metric volume, then
flattens height into channels and applies a 2-D hourglass over the BEV plane.
`bev_only` skips the 3-D stage and flattens the raw volume; `pure_3d` keeps
the whole hourglass in 3-D (stride 2 on the horizontal axes only) and
flattens at the end.
"""

from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..errors import ShapeMismatchError
from ..tensor import Tensor
from ..voxelgrid import OccupancyGrid
from .blocks import Conv3dStrided, ConvLayer
from .config import NetworkConfig


def flatten_height(volume: Tensor) -> Tensor:
    """[C, X, Y, Z] -> [C*Y, X, Z] without loss of information."""
    c, x, y, z = volume.shape
    return volume.transpose((0, 2, 1, 3)).reshape((c * y, x, z))


class _Hourglass2d:
    def __init__(self, rng, c_in: int, c: int, c_mid: int):
        self.conv0 = [ConvLayer(rng, c_in, c), ConvLayer(rng, c, c)]
        self.conv1 = [ConvLayer(rng, c, c), ConvLayer(rng, c, c, relu=False)]
        self.conv2 = [ConvLayer(rng, c, c_mid, stride=2), ConvLayer(rng, c_mid, c_mid)]
        self.conv3 = [ConvLayer(rng, c_mid, c_mid, stride=2), ConvLayer(rng, c_mid, c_mid)]
        self.deconv4 = [
            ConvLayer(rng, c_mid, c_mid, stride=2, transpose=True),
            ConvLayer(rng, c_mid, c_mid, relu=False),
        ]
        self.deconv5 = [ConvLayer(rng, c_mid, c, stride=2, transpose=True), ConvLayer(rng, c, c)]

    def __call__(self, x: Tensor) -> Tensor:
        x0 = self.conv0[1](self.conv0[0](x))
        x1 = (self.conv1[1](self.conv1[0](x0)) + x0).relu()
        x2 = self.conv2[1](self.conv2[0](x1))
        x3 = self.conv3[1](self.conv3[0](x2))
        x4 = (self.deconv4[1](self.deconv4[0](x3)) + x2).relu()
        return self.deconv5[1](self.deconv5[0](x4))

    def named_params(self, prefix: str):
        for stage, layers in (
            ("conv0", self.conv0),
            ("conv1", self.conv1),
            ("conv2", self.conv2),
            ("conv3", self.conv3),
            ("deconv4", self.deconv4),
            ("deconv5", self.deconv5),
        ):
            for i, layer in enumerate(layers):
                yield from layer.named_params(f"{prefix}.{stage}.{i}")


class _Hourglass3d:
    """Same topology with 3-D kernels; height axis keeps stride 1."""

    def __init__(self, rng, c_in: int, c: int, c_mid: int):
        down = (2, 1, 2)
        flat = (1, 1, 1)
        self.conv0 = [Conv3dStrided(rng, c_in, c, flat), Conv3dStrided(rng, c, c, flat)]
        self.conv1 = [Conv3dStrided(rng, c, c, flat), Conv3dStrided(rng, c, c, flat, relu=False)]
        self.conv2 = [Conv3dStrided(rng, c, c_mid, down), Conv3dStrided(rng, c_mid, c_mid, flat)]
        self.conv3 = [Conv3dStrided(rng, c_mid, c_mid, down), Conv3dStrided(rng, c_mid, c_mid, flat)]
        self.deconv4 = [
            Conv3dStrided(rng, c_mid, c_mid, down, transpose=True),
            Conv3dStrided(rng, c_mid, c_mid, flat, relu=False),
        ]
        self.deconv5 = [
            Conv3dStrided(rng, c_mid, c, down, transpose=True),
            Conv3dStrided(rng, c, c, flat),
        ]

    def __call__(self, x: Tensor) -> Tensor:
        x0 = self.conv0[1](self.conv0[0](x))
        x1 = (self.conv1[1](self.conv1[0](x0)) + x0).relu()
        x2 = self.conv2[1](self.conv2[0](x1))
        x3 = self.conv3[1](self.conv3[0](x2))
        x4 = (self.deconv4[1](self.deconv4[0](x3)) + x2).relu()
        return self.deconv5[1](self.deconv5[0](x4))

    named_params = _Hourglass2d.named_params


class VolumeNet:
    def __init__(self, rng: np.random.Generator, config: NetworkConfig, c_in: int):
        self.config = config
        p = config.plan
        y_dim = config.grid.dims[1]
        self.mode = config.volume_net
        self.conv3d = None
        if self.mode in ("hybrid_3d_bev", "pure_3d"):
            self.conv3d = [
                ConvLayer(rng, c_in, p.vol3d, nd=3),
                ConvLayer(rng, p.vol3d, p.vol3d, nd=3),
            ]
        if self.mode == "hybrid_3d_bev":
            self.hourglass = _Hourglass2d(rng, p.vol3d * y_dim, p.bev, p.bev_mid)
            self.out_channels = p.bev
        elif self.mode == "bev_only":
            self.hourglass = _Hourglass2d(rng, c_in * y_dim, p.bev, p.bev_mid)
            self.out_channels = p.bev
        else:
            self.hourglass = _Hourglass3d(rng, p.vol3d, p.bev, p.bev_mid)
            self.out_channels = p.bev * y_dim

    def forward(self, volume: Tensor) -> Tensor:
        if volume.ndim != 4:
            raise ShapeMismatchError(f"expected [C, X, Y, Z] volume, got {volume.shape}")
        _, x_dim, y_dim, z_dim = volume.shape
        if (x_dim, y_dim, z_dim) != self.config.grid.dims:
            raise ShapeMismatchError(
                f"volume dims {(x_dim, y_dim, z_dim)} do not match grid {self.config.grid.dims}"
            )
        if x_dim % 4 or z_dim % 4:
            raise ShapeMismatchError("grid X and Z must be divisible by 4 for the hourglass")
        if self.mode == "hybrid_3d_bev":
            vol = self.conv3d[1](self.conv3d[0](volume))
            return self.hourglass(flatten_height(vol))
        if self.mode == "bev_only":
            return self.hourglass(flatten_height(volume))
        vol = self.conv3d[1](self.conv3d[0](volume))
        return flatten_height(self.hourglass(vol))

    __call__ = forward

    def named_params(self, prefix: str = "volume"):
        if self.conv3d is not None:
            for i, layer in enumerate(self.conv3d):
                yield from layer.named_params(f"{prefix}.conv3d.{i}")
        yield from self.hourglass.named_params(f"{prefix}.hourglass")


class OccupancyHead:
    """Two convolutions mapping BEV features to per-voxel probabilities: the
    second emits one channel per height slab, reshaped to [X, Y, Z] + sigmoid."""

    def __init__(self, rng: np.random.Generator, config: NetworkConfig, c_in: int):
        self.config = config
        p = config.plan
        y_dim = config.grid.dims[1]
        self.conv3 = ConvLayer(rng, c_in, p.occupancy)
        self.conv4 = ConvLayer(rng, p.occupancy, y_dim, relu=False)

    def forward(self, bev: Tensor, fov_mask: np.ndarray) -> OccupancyGrid:
        x_dim, _, z_dim = self.config.grid.dims
        if tuple(bev.shape[1:]) != (x_dim, z_dim):
            raise ShapeMismatchError(f"bev features {bev.shape} do not match grid plane ({x_dim}, {z_dim})")
        logits = self.conv4(self.conv3(bev))  # [Y, X, Z]
        probs = logits.transpose((1, 0, 2)).sigmoid()
        return OccupancyGrid(values=probs, fov_mask=fov_mask, spec=self.config.grid)

    __call__ = forward

    def named_params(self, prefix: str = "occupancy"):
        yield from self.conv3.named_params(f"{prefix}.conv3")
        yield from self.conv4.named_params(f"{prefix}.conv4")
