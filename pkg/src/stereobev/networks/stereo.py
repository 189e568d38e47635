"""Stereo image feature network: pyramid-pooled encoder plus a pyramid decoder
whose finest output matches the input resolution.

The encoder runs conv0 at full resolution, pools to half, and stacks residual
layers down to quarter resolution where four average-pool context branches are
concatenated back in. The decoder builds laterals at quarter/half/full
resolution and sums per-level towers at the output resolution. Half and
quarter output modes keep the encoder and laterals and only shorten the
upsampling towers (dropping the levels finer than the target and the final
3x3 fuse), so their output carries the pyramid width of the variant.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .. import convolution as C
from .. import tensor as T
from ..errors import ShapeMismatchError
from ..tensor import Tensor
from .blocks import ConvLayer, Sequential, residual_stack
from .config import DROPOUT_P, SPP_WINDOWS, NetworkConfig


class StereoFeatureNet:
    def __init__(self, rng: np.random.Generator, config: NetworkConfig):
        self.config = config
        p = config.plan
        self.mode = config.image_feature_resolution
        self.conv0 = Sequential(
            [ConvLayer(rng, 3, p.conv0), ConvLayer(rng, p.conv0, p.conv0), ConvLayer(rng, p.conv0, p.conv0)]
        )
        # the pooled stage narrows channels on the small variant; pooling alone
        # cannot change channel count, so a 1x1 projection carries the change
        self.pool_proj = (
            ConvLayer(rng, p.conv0, p.pool, k=1, relu=False) if p.pool != p.conv0 else None
        )
        b1, b2, b3, b4 = p.encoder_blocks
        self.layer1 = residual_stack(rng, p.pool, p.layer1, b1)
        self.layer2 = residual_stack(rng, p.layer1, p.layer2, b2, stride=2)
        self.layer3 = residual_stack(rng, p.layer2, p.layer3, b3)
        self.layer4 = residual_stack(rng, p.layer3, p.layer4, b4, dilation=2)
        self.branches = [ConvLayer(rng, p.layer4, p.branch) for _ in SPP_WINDOWS]
        concat_c = p.layer2 + p.layer4 + len(SPP_WINDOWS) * p.branch
        self.conv1 = ConvLayer(rng, concat_c, p.conv1)
        self.conv2 = ConvLayer(rng, p.conv1, p.conv2, k=1)
        self.lateral2 = ConvLayer(rng, p.conv1, p.fpn, k=1, relu=False)
        # towers lift each pyramid level to the output resolution; levels finer
        # than the target resolution do not exist in half/quarter modes
        if self.mode == "full":
            self.lateral1 = ConvLayer(rng, p.layer1, p.fpn, k=1, relu=False)
            self.lateral0 = ConvLayer(rng, p.conv0, p.fpn, k=1, relu=False)
            self.tower2 = Sequential([ConvLayer(rng, p.fpn, p.fpn), ConvLayer(rng, p.fpn, p.fpn)])
            self.tower1 = Sequential([ConvLayer(rng, p.fpn, p.fpn)])
            self.tower0 = Sequential([ConvLayer(rng, p.fpn, p.fpn)])
            self.fuse = ConvLayer(rng, p.fpn, p.fpn_out, relu=False)
            self.out_channels = p.fpn_out
        elif self.mode == "half":
            self.lateral1 = ConvLayer(rng, p.layer1, p.fpn, k=1, relu=False)
            self.lateral0 = None
            self.tower2 = Sequential([ConvLayer(rng, p.fpn, p.fpn)])
            self.tower1 = Sequential([ConvLayer(rng, p.fpn, p.fpn)])
            self.tower0 = None
            self.fuse = None
            self.out_channels = p.fpn
        else:  # quarter
            self.lateral1 = None
            self.lateral0 = None
            self.tower2 = Sequential([ConvLayer(rng, p.fpn, p.fpn)])
            self.tower1 = None
            self.tower0 = None
            self.fuse = None
            self.out_channels = p.fpn

    def forward(self, image: Tensor, train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        if image.ndim != 3 or image.shape[0] != 3:
            raise ShapeMismatchError(f"expected [3, H, W] image, got {image.shape}")
        _, h, w = image.shape
        if h % 4 or w % 4:
            raise ShapeMismatchError(f"image dims must be divisible by 4, got {h}x{w}")
        x0 = self.conv0(image)
        pooled = C.max_pool2d(x0, 3, stride=2, padding=1)
        if self.pool_proj is not None:
            pooled = self.pool_proj(pooled)
        x1 = self.layer1(pooled)
        x2 = self.layer2(x1)
        x4 = self.layer4(self.layer3(x2))
        h4, w4 = h // 4, w // 4
        branch_maps = [
            C.upsample_bilinear(conv(C.avg_pool2d(x4, window)), h4, w4)
            for window, conv in zip(SPP_WINDOWS, self.branches)
        ]
        merged = T.concat([x2, x4] + branch_maps, axis=0)
        y1 = self.conv1(merged)
        self.conv2(y1)  # published layout computes this projection; the decoder taps y1
        lat2 = self.lateral2(y1)
        if self.mode == "quarter":
            out = self.tower2(lat2)
        else:
            lat1 = self.lateral1(x1) + C.upsample_bilinear(lat2, h // 2, w // 2)
            if self.mode == "half":
                t2 = C.upsample_bilinear(self.tower2(lat2), h // 2, w // 2)
                out = t2 + self.tower1(lat1)
            else:
                lat0 = self.lateral0(x0) + C.upsample_bilinear(lat1, h, w)
                t2 = self.tower2.layers[0](lat2)
                t2 = C.upsample_bilinear(t2, h // 2, w // 2)
                t2 = C.upsample_bilinear(self.tower2.layers[1](t2), h, w)
                t1 = C.upsample_bilinear(self.tower1(lat1), h, w)
                out = t2 + t1 + self.tower0(lat0)
        out = T.dropout(out, DROPOUT_P, train=train, rng=rng)
        if self.fuse is not None:
            out = self.fuse(out)
        return out

    __call__ = forward

    def named_params(self, prefix: str = "stereo"):
        yield from self.conv0.named_params(f"{prefix}.conv0")
        if self.pool_proj is not None:
            yield from self.pool_proj.named_params(f"{prefix}.pool_proj")
        yield from self.layer1.named_params(f"{prefix}.layer1")
        yield from self.layer2.named_params(f"{prefix}.layer2")
        yield from self.layer3.named_params(f"{prefix}.layer3")
        yield from self.layer4.named_params(f"{prefix}.layer4")
        for i, branch in enumerate(self.branches):
            yield from branch.named_params(f"{prefix}.branch{i + 1}")
        yield from self.conv1.named_params(f"{prefix}.conv1")
        yield from self.conv2.named_params(f"{prefix}.conv2")
        yield from self.lateral2.named_params(f"{prefix}.lateral2")
        for name, layer in (
            ("lateral1", self.lateral1),
            ("lateral0", self.lateral0),
            ("tower2", self.tower2),
            ("tower1", self.tower1),
            ("tower0", self.tower0),
            ("fuse", self.fuse),
        ):
            if layer is not None:
                yield from layer.named_params(f"{prefix}.{name}")
