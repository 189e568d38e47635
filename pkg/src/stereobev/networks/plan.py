"""Layer-by-layer output shapes, computed analytically without allocation.

shape_plan() mirrors the constructors' channel arithmetic and the forward
passes' spatial arithmetic; with symbolic dims (H, W, X, Y, Z) it reproduces
the published architecture table for the three stock variants, and with
concrete dims it must match actually-executed tensor shapes. The transcribed
reference table lives here as data so the CLI can diff against it.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

from .config import SPP_WINDOWS, NetworkConfig


@dataclass(frozen=True)
class Dim:
    """One extent: either a concrete value or mult*symbol/den."""

    sym: Optional[str] = None
    den: int = 1
    mult: int = 1
    val: Optional[int] = None

    @staticmethod
    def of(value) -> "Dim":
        if isinstance(value, Dim):
            return value
        if isinstance(value, str):
            return Dim(sym=value)
        return Dim(val=int(value))

    def div(self, n: int) -> "Dim":
        if self.sym is not None:
            return replace(self, den=self.den * n)
        return Dim(val=self.val // n)

    def __str__(self) -> str:
        if self.sym is None:
            return str(self.val)
        base = self.sym if self.mult == 1 else f"{self.mult}*{self.sym}"
        return base if self.den == 1 else f"{base}/{self.den}"


@dataclass(frozen=True)
class PlanRow:
    name: str
    dims: tuple[Dim, ...]

    def render(self) -> str:
        return f"{self.name}: " + " x ".join(str(d) for d in self.dims)


def _row(name, channels, *spatial) -> PlanRow:
    return PlanRow(name, (Dim.of(channels),) + tuple(Dim.of(s) for s in spatial))


def shape_plan(config: NetworkConfig, image_h=None, image_w=None) -> list[PlanRow]:
    """Output dimension of every stage; symbolic when image dims are omitted."""
    p = config.plan
    symbolic = image_h is None
    h = Dim(sym="H") if symbolic else Dim(val=int(image_h))
    w = Dim(sym="W") if symbolic else Dim(val=int(image_w))
    if symbolic:
        gx, gy, gz = Dim(sym="X"), Dim(sym="Y"), Dim(sym="Z")
        y_count = None
    else:
        dims = config.grid.dims
        gx, gy, gz = Dim(val=dims[0]), Dim(val=dims[1]), Dim(val=dims[2])
        y_count = dims[1]
    h2, w2 = h.div(2), w.div(2)
    h4, w4 = h.div(4), w.div(4)

    rows = [
        _row("image", 3, h, w),
        _row("conv0", p.conv0, h, w),
        _row("maxpool0", p.pool, h2, w2),
        _row("layer1", p.layer1, h2, w2),
        _row("layer2", p.layer2, h4, w4),
        _row("layer3", p.layer3, h4, w4),
        _row("layer4", p.layer4, h4, w4),
    ]
    rows += [_row(f"branch{i + 1}", p.branch, h4, w4) for i in range(len(SPP_WINDOWS))]
    concat_c = p.layer2 + p.layer4 + len(SPP_WINDOWS) * p.branch
    rows += [
        _row("concat", concat_c, h4, w4),
        _row("conv1", p.conv1, h4, w4),
        _row("conv2", p.conv2, h4, w4),
        _row("fpn_conv2", p.fpn, h4, w4),
    ]
    mode = config.image_feature_resolution
    if mode == "full":
        rows += [
            _row("fpn_conv2_up", p.fpn, h, w),
            _row("fpn_conv1", p.fpn, h2, w2),
            _row("fpn_conv1_up", p.fpn, h, w),
            _row("fpn_conv0", p.fpn, h, w),
            _row("fpn_conv0_up", p.fpn, h, w),
            _row("fpn_sum", p.fpn, h, w),
            _row("dropout", p.fpn, h, w),
            _row("fpn_conv", p.fpn_out, h, w),
        ]
        c_img = p.fpn_out
        fh, fw = h, w
    elif mode == "half":
        rows += [
            _row("fpn_conv2_up", p.fpn, h2, w2),
            _row("fpn_conv1", p.fpn, h2, w2),
            _row("fpn_conv1_up", p.fpn, h2, w2),
            _row("fpn_sum", p.fpn, h2, w2),
            _row("dropout", p.fpn, h2, w2),
        ]
        c_img = p.fpn
        fh, fw = h2, w2
    else:
        rows += [
            _row("fpn_conv2_up", p.fpn, h4, w4),
            _row("dropout", p.fpn, h4, w4),
        ]
        c_img = p.fpn
        fh, fw = h4, w4

    c_plume = 2 * c_img + (3 if config.concat_voxel_coords else 0)
    rows.append(_row("plume", c_plume, gx, gy, gz))

    def height_channels(mult: int) -> Dim:
        if symbolic:
            return Dim(sym="Y", mult=mult)
        return Dim(val=mult * y_count)

    gx2, gz2 = gx.div(2), gz.div(2)
    gx4, gz4 = gx.div(4), gz.div(4)
    if config.volume_net == "hybrid_3d_bev":
        rows += [
            _row("3dconv0", p.vol3d, gx, gy, gz),
            PlanRow("reshape", (height_channels(p.vol3d), gx, gz)),
            _row("bev_conv0", p.bev, gx, gz),
            _row("bev_conv1", p.bev, gx, gz),
            _row("bev_conv2", p.bev_mid, gx2, gz2),
            _row("bev_conv3", p.bev_mid, gx4, gz4),
            _row("bev_deconv4", p.bev_mid, gx2, gz2),
            _row("bev_deconv5", p.bev, gx, gz),
        ]
    elif config.volume_net == "bev_only":
        rows += [
            PlanRow("reshape", (height_channels(c_plume), gx, gz)),
            _row("bev_conv0", p.bev, gx, gz),
            _row("bev_conv1", p.bev, gx, gz),
            _row("bev_conv2", p.bev_mid, gx2, gz2),
            _row("bev_conv3", p.bev_mid, gx4, gz4),
            _row("bev_deconv4", p.bev_mid, gx2, gz2),
            _row("bev_deconv5", p.bev, gx, gz),
        ]
    else:
        rows += [
            _row("3dconv0", p.vol3d, gx, gy, gz),
            _row("bev_conv0", p.bev, gx, gy, gz),
            _row("bev_conv1", p.bev, gx, gy, gz),
            _row("bev_conv2", p.bev_mid, gx2, gy, gz2),
            _row("bev_conv3", p.bev_mid, gx4, gy, gz4),
            _row("bev_deconv4", p.bev_mid, gx2, gy, gz2),
            _row("bev_deconv5", p.bev, gx, gy, gz),
            PlanRow("reshape", (height_channels(p.bev), gx, gz)),
        ]
    rows += [
        _row("conv3", p.occupancy, gx, gz),
        PlanRow("conv4", (height_channels(1), gx, gz)),
    ]
    return rows


# Transcription of the published per-variant output-dimension table
# (small, middle, large channel values per named row).

_REFERENCE_CHANNELS = {
    "conv0": (32, 32, 32),
    "maxpool0": (8, 32, 32),
    "layer1": (8, 32, 32),
    "layer2": (16, 64, 64),
    "layer3": (32, 128, 128),
    "layer4": (32, 128, 128),
    "branch": (8, 32, 32),
    "concat": (80, 320, 320),
    "conv1": (32, 128, 128),
    "conv2": (8, 32, 32),
    "fpn": (32, 64, 96),
    "fpn_conv": (32, 32, 32),
    "plume": (64, 64, 64),
    "3dconv0": (12, 32, 48),
    "bev": (96, 160, 256),
    "bev_mid": (192, 320, 512),
    "conv3": (48, 80, 128),
}

_VARIANT_INDEX = {"small": 0, "middle": 1, "large": 2}


def reference_plan(variant: str) -> list[PlanRow]:
    """The published full-resolution plan with symbolic dims, as data."""
    i = _VARIANT_INDEX[variant]

    def c(key):
        return _REFERENCE_CHANNELS[key][i]

    h, w = Dim(sym="H"), Dim(sym="W")
    h2, w2, h4, w4 = h.div(2), w.div(2), h.div(4), w.div(4)
    gx, gy, gz = Dim(sym="X"), Dim(sym="Y"), Dim(sym="Z")
    gx2, gz2, gx4, gz4 = gx.div(2), gz.div(2), gx.div(4), gz.div(4)
    rows = [
        _row("image", 3, h, w),
        _row("conv0", c("conv0"), h, w),
        _row("maxpool0", c("maxpool0"), h2, w2),
        _row("layer1", c("layer1"), h2, w2),
        _row("layer2", c("layer2"), h4, w4),
        _row("layer3", c("layer3"), h4, w4),
        _row("layer4", c("layer4"), h4, w4),
        _row("branch1", c("branch"), h4, w4),
        _row("branch2", c("branch"), h4, w4),
        _row("branch3", c("branch"), h4, w4),
        _row("branch4", c("branch"), h4, w4),
        _row("concat", c("concat"), h4, w4),
        _row("conv1", c("conv1"), h4, w4),
        _row("conv2", c("conv2"), h4, w4),
        _row("fpn_conv2", c("fpn"), h4, w4),
        _row("fpn_conv2_up", c("fpn"), h, w),
        _row("fpn_conv1", c("fpn"), h2, w2),
        _row("fpn_conv1_up", c("fpn"), h, w),
        _row("fpn_conv0", c("fpn"), h, w),
        _row("fpn_conv0_up", c("fpn"), h, w),
        _row("fpn_sum", c("fpn"), h, w),
        _row("dropout", c("fpn"), h, w),
        _row("fpn_conv", c("fpn_conv"), h, w),
        _row("plume", c("plume"), gx, gy, gz),
        _row("3dconv0", c("3dconv0"), gx, gy, gz),
        PlanRow("reshape", (Dim(sym="Y", mult=c("3dconv0")), gx, gz)),
        _row("bev_conv0", c("bev"), gx, gz),
        _row("bev_conv1", c("bev"), gx, gz),
        _row("bev_conv2", c("bev_mid"), gx2, gz2),
        _row("bev_conv3", c("bev_mid"), gx4, gz4),
        _row("bev_deconv4", c("bev_mid"), gx2, gz2),
        _row("bev_deconv5", c("bev"), gx, gz),
        _row("conv3", c("conv3"), gx, gz),
        PlanRow("conv4", (Dim(sym="Y"), gx, gz)),
    ]
    return rows


def plan_diff(plan: list[PlanRow], reference: list[PlanRow]) -> list[str]:
    """Human-readable row differences; empty means an exact match."""
    diffs = []
    for i in range(max(len(plan), len(reference))):
        got = plan[i].render() if i < len(plan) else "<missing>"
        want = reference[i].render() if i < len(reference) else "<missing>"
        if got != want:
            diffs.append(f"row {i}: got [{got}] want [{want}]")
    return diffs
