"""Single-stage BEV detection header: five-block encoder (plain convs, then
bottleneck stages halving resolution to 1/16), a top-down decoder back to
stride 4, and sibling classification/regression branches.

Regression channels at each cell: (du, dv, log w, log h, sin theta, cos theta)
with the offset in meters from the cell center.
"""

from __future__ import annotations

import math

import numpy as np

from .. import convolution as C
from ..errors import ShapeMismatchError
from ..tensor import Tensor
from .blocks import ConvLayer, Sequential, bottleneck_stack
from .config import DETECTOR_STRIDE, NetworkConfig


class DetectionHead:
    def __init__(self, rng: np.random.Generator, config: NetworkConfig, c_in: int):
        self.config = config
        p = config.plan
        counts = p.detector_layers
        chans = p.detector_channels
        block1 = [ConvLayer(rng, c_in, chans[0])]
        block1 += [ConvLayer(rng, chans[0], chans[0]) for _ in range(counts[0] - 1)]
        self.block1 = Sequential(block1)
        self.block2 = bottleneck_stack(rng, chans[0], chans[1], counts[1])
        self.block3 = bottleneck_stack(rng, chans[1], chans[2], counts[2])
        self.block4 = bottleneck_stack(rng, chans[2], chans[3], counts[3])
        self.block5 = bottleneck_stack(rng, chans[3], chans[4], counts[4])
        f = p.detector_fpn
        self.lateral3 = ConvLayer(rng, chans[2], f, k=1, relu=False)
        self.lateral4 = ConvLayer(rng, chans[3], f, k=1, relu=False)
        self.lateral5 = ConvLayer(rng, chans[4], f, k=1, relu=False)
        self.cls_tower = ConvLayer(rng, f, f)
        self.reg_tower = ConvLayer(rng, f, f)
        self.cls_out = ConvLayer(rng, f, 1, k=1, relu=False)
        self.reg_out = ConvLayer(rng, f, 6, k=1, relu=False)
        # prior bias keeps the focal loss finite at initialization
        self.cls_out.bias.data[:] = -math.log((1.0 - 0.01) / 0.01)

    def forward(self, bev: Tensor) -> tuple[Tensor, Tensor]:
        if bev.ndim != 3:
            raise ShapeMismatchError(f"expected [C, X, Z] features, got {bev.shape}")
        _, x_dim, z_dim = bev.shape
        if x_dim % 16 or z_dim % 16:
            raise ShapeMismatchError(f"detector needs dims divisible by 16, got ({x_dim}, {z_dim})")
        c1 = self.block1(bev)
        c2 = self.block2(c1)
        c3 = self.block3(c2)
        c4 = self.block4(c3)
        c5 = self.block5(c4)
        p5 = self.lateral5(c5)
        p4 = self.lateral4(c4) + C.upsample_bilinear(p5, x_dim // 8, z_dim // 8)
        p3 = self.lateral3(c3) + C.upsample_bilinear(p4, x_dim // 4, z_dim // 4)
        cls_logits = self.cls_out(self.cls_tower(p3))
        regression = self.reg_out(self.reg_tower(p3))
        return cls_logits, regression

    __call__ = forward

    @property
    def stride(self) -> int:
        return DETECTOR_STRIDE

    def named_params(self, prefix: str = "detector"):
        for name in ("block1", "block2", "block3", "block4", "block5"):
            yield from getattr(self, name).named_params(f"{prefix}.{name}")
        for name in ("lateral3", "lateral4", "lateral5", "cls_tower", "reg_tower", "cls_out", "reg_out"):
            yield from getattr(self, name).named_params(f"{prefix}.{name}")


def detection_plan(config: NetworkConfig) -> dict:
    """Layer counts, channels, and stride bookkeeping for the header."""
    p = config.plan
    return {
        "layers": p.detector_layers,
        "channels": p.detector_channels,
        "encoder_downsample": 16,
        "output_stride": DETECTOR_STRIDE,
    }
