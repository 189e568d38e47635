"""Parameterized layers: plain convolutions and the two residual block types.

Weights use seeded fan-in-scaled uniform initialization; biases start at zero
unless a prior is set explicitly. Every layer exposes named_params() so the
model can assemble flat checkpoint dictionaries.
"""

from __future__ import annotations

from math import prod, sqrt
from typing import Iterator, Optional

import numpy as np

from .. import convolution as C
from ..tensor import Tensor


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class ConvLayer:
    """Convolution (or transposed convolution) with optional ReLU.

    Padding defaults to the 'same' choice dilation*(k-1)//2 for odd kernels.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        c_in: int,
        c_out: int,
        k: int = 3,
        stride: int = 1,
        padding: Optional[int] = None,
        dilation: int = 1,
        relu: bool = True,
        nd: int = 2,
        transpose: bool = False,
        bias: bool = True,
    ):
        self.c_in, self.c_out = c_in, c_out
        self.stride, self.dilation = stride, dilation
        self.relu, self.nd, self.transpose = relu, nd, transpose
        self.padding = dilation * (k - 1) // 2 if padding is None else padding
        kernel = (k,) * nd
        if transpose:
            shape = (c_in, c_out) + kernel
            self.output_padding = stride - 1
        else:
            shape = (c_out, c_in) + kernel
            self.output_padding = 0
        self.weight = _uniform_init(rng, shape, fan_in=c_in * prod(kernel))
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if self.transpose:
            op = C.conv_transpose2d if self.nd == 2 else C.conv_transpose3d
            out = op(x, self.weight, self.bias, self.stride, self.padding, self.output_padding)
        elif self.nd == 2:
            out = C.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)
        else:
            out = C.conv3d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)
        return out.relu() if self.relu else out

    def named_params(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


class Conv3dStrided(ConvLayer):
    """3-D convolution whose stride/padding may differ per axis (pure-3D hourglass)."""

    def __init__(self, rng, c_in, c_out, stride, relu=True, transpose=False):
        super().__init__(rng, c_in, c_out, k=3, stride=1, relu=relu, nd=3, transpose=transpose)
        self.axis_stride = stride
        self.axis_output_padding = tuple(s - 1 for s in stride) if transpose else (0, 0, 0)

    def __call__(self, x: Tensor) -> Tensor:
        if self.transpose:
            out = C.conv_transpose3d(x, self.weight, self.bias, self.axis_stride, 1, self.axis_output_padding)
        else:
            out = C.conv3d(x, self.weight, self.bias, self.axis_stride, 1, 1)
        return out.relu() if self.relu else out


class BasicBlock:
    """Two 3x3 convolutions with an identity (or 1x1 projected) skip."""

    def __init__(self, rng, c_in: int, c_out: int, stride: int = 1, dilation: int = 1):
        self.conv1 = ConvLayer(rng, c_in, c_out, stride=stride, dilation=dilation, relu=True)
        self.conv2 = ConvLayer(rng, c_out, c_out, dilation=dilation, relu=False)
        if stride != 1 or c_in != c_out:
            self.proj = ConvLayer(rng, c_in, c_out, k=1, stride=stride, relu=False, bias=False)
        else:
            self.proj = None

    def __call__(self, x: Tensor) -> Tensor:
        shortcut = self.proj(x) if self.proj is not None else x
        return (self.conv2(self.conv1(x)) + shortcut).relu()

    def named_params(self, prefix: str):
        yield from self.conv1.named_params(f"{prefix}.conv1")
        yield from self.conv2.named_params(f"{prefix}.conv2")
        if self.proj is not None:
            yield from self.proj.named_params(f"{prefix}.proj")


class Bottleneck:
    """1x1 reduce, 3x3, 1x1 expand residual block (reduction factor 4)."""

    def __init__(self, rng, c_in: int, c_out: int, stride: int = 1):
        mid = max(4, c_out // 4)
        self.conv1 = ConvLayer(rng, c_in, mid, k=1, relu=True)
        self.conv2 = ConvLayer(rng, mid, mid, stride=stride, relu=True)
        self.conv3 = ConvLayer(rng, mid, c_out, k=1, relu=False)
        if stride != 1 or c_in != c_out:
            self.proj = ConvLayer(rng, c_in, c_out, k=1, stride=stride, relu=False, bias=False)
        else:
            self.proj = None

    def __call__(self, x: Tensor) -> Tensor:
        shortcut = self.proj(x) if self.proj is not None else x
        return (self.conv3(self.conv2(self.conv1(x))) + shortcut).relu()

    def named_params(self, prefix: str):
        yield from self.conv1.named_params(f"{prefix}.conv1")
        yield from self.conv2.named_params(f"{prefix}.conv2")
        yield from self.conv3.named_params(f"{prefix}.conv3")
        if self.proj is not None:
            yield from self.proj.named_params(f"{prefix}.proj")


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def named_params(self, prefix: str):
        for i, layer in enumerate(self.layers):
            yield from layer.named_params(f"{prefix}.{i}")


def residual_stack(rng, c_in: int, c_out: int, blocks: int, stride: int = 1, dilation: int = 1) -> Sequential:
    layers = [BasicBlock(rng, c_in, c_out, stride=stride, dilation=dilation)]
    layers += [BasicBlock(rng, c_out, c_out, dilation=dilation) for _ in range(blocks - 1)]
    return Sequential(layers)


def bottleneck_stack(rng, c_in: int, c_out: int, blocks: int, stride: int = 2) -> Sequential:
    layers = [Bottleneck(rng, c_in, c_out, stride=stride)]
    layers += [Bottleneck(rng, c_out, c_out) for _ in range(blocks - 1)]
    return Sequential(layers)
