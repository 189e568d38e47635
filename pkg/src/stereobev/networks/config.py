"""Network variant descriptors and the channel plans they expand to.

Three stock variants (small / middle / large) differ only in channel widths
and two encoder depths. `scale` multiplies every channel count (minimum 4) so
the exact topology can run and gradient-check at desk scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from ..errors import InvalidConfigError
from ..voxelgrid import VoxelGridSpec

VARIANTS = ("small", "middle", "large")
RESOLUTIONS = ("full", "half", "quarter")
VOLUME_NETS = ("hybrid_3d_bev", "bev_only", "pure_3d")

# channel widths per variant, in network order
_WIDTHS = {
    #          conv0 pool l1  l2  l3   l4   spp conv1 conv2 fpn out vol3d bev bev2 occ
    "small": (32, 8, 8, 16, 32, 32, 8, 32, 8, 32, 32, 12, 96, 192, 48),
    "middle": (32, 32, 32, 64, 128, 128, 32, 128, 32, 64, 32, 32, 160, 320, 80),
    "large": (32, 32, 32, 64, 128, 128, 32, 128, 32, 96, 32, 48, 256, 512, 128),
}

_ENCODER_BLOCKS = {
    # residual blocks in layer1..layer4; layer2 downsamples, layer4 dilates
    "small": (3, 6, 2, 2),
    "middle": (3, 6, 2, 2),
    "large": (3, 6, 6, 6),
}

_DETECTOR_LAYERS = {
    "small": (2, 3, 6, 6, 3),
    "middle": (2, 3, 6, 6, 3),
    "large": (3, 3, 6, 6, 3),
}

_DETECTOR_CHANNELS = {
    "small": (32, 96, 128, 192, 192),
    "middle": (32, 96, 192, 256, 384),
    "large": (48, 128, 192, 256, 384),
}

SPP_WINDOWS = (64, 32, 16, 8)
DETECTOR_FPN_CHANNELS = 96
DETECTOR_STRIDE = 4
DROPOUT_P = 0.2

_DEFAULT_GRID = VoxelGridSpec((-32.0, 32.0), (-1.0, 2.0), (2.0, 62.8), 0.2)


@dataclass(frozen=True)
class ChannelPlan:
    conv0: int
    pool: int
    layer1: int
    layer2: int
    layer3: int
    layer4: int
    branch: int
    conv1: int
    conv2: int
    fpn: int
    fpn_out: int
    vol3d: int
    bev: int
    bev_mid: int
    occupancy: int
    encoder_blocks: tuple[int, int, int, int]
    detector_layers: tuple[int, ...]
    detector_channels: tuple[int, ...]
    detector_fpn: int


@dataclass(frozen=True)
class NetworkConfig:
    variant: str = "small"
    image_feature_resolution: str = "full"
    volume_net: str = "hybrid_3d_bev"
    concat_voxel_coords: bool = False
    fusion_enabled: bool = False
    share_stereo_weights: bool = True
    grid: VoxelGridSpec = field(default_factory=lambda: _DEFAULT_GRID)
    scale: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.image_feature_resolution not in RESOLUTIONS:
            raise InvalidConfigError(f"unknown resolution mode {self.image_feature_resolution!r}")
        if self.volume_net not in VOLUME_NETS:
            raise InvalidConfigError(f"unknown volume net {self.volume_net!r}")
        if not self.scale > 0:
            raise InvalidConfigError(f"scale must be positive, got {self.scale}")

    def channels(self, base: int) -> int:
        """Scaled channel count; rounds and clamps to a minimum of 4."""
        if self.scale == 1.0:
            return base
        return max(4, int(round(base * self.scale)))

    @property
    def resolution_factor(self) -> float:
        return {"full": 1.0, "half": 0.5, "quarter": 0.25}[self.image_feature_resolution]

    @property
    def plan(self) -> ChannelPlan:
        widths = [self.channels(c) for c in _WIDTHS[self.variant]]
        return ChannelPlan(
            *widths,
            encoder_blocks=_ENCODER_BLOCKS[self.variant],
            detector_layers=_DETECTOR_LAYERS[self.variant],
            detector_channels=tuple(self.channels(c) for c in _DETECTOR_CHANNELS[self.variant]),
            detector_fpn=self.channels(DETECTOR_FPN_CHANNELS),
        )

    def with_grid(self, grid: VoxelGridSpec) -> "NetworkConfig":
        return replace(self, grid=grid)


def config_to_dict(config: NetworkConfig) -> dict:
    return {
        "variant": config.variant,
        "image_feature_resolution": config.image_feature_resolution,
        "volume_net": config.volume_net,
        "concat_voxel_coords": config.concat_voxel_coords,
        "fusion_enabled": config.fusion_enabled,
        "share_stereo_weights": config.share_stereo_weights,
        "scale": config.scale,
        "grid": {
            "x_range": list(config.grid.x_range),
            "y_range": list(config.grid.y_range),
            "z_range": list(config.grid.z_range),
            "resolution": config.grid.resolution,
        },
    }


def config_from_dict(data: dict) -> NetworkConfig:
    known = {
        "variant",
        "image_feature_resolution",
        "volume_net",
        "concat_voxel_coords",
        "fusion_enabled",
        "share_stereo_weights",
        "scale",
        "grid",
    }
    unknown = set(data) - known
    if unknown:
        raise InvalidConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {k: v for k, v in data.items() if k != "grid"}
    if "grid" in data:
        g = data["grid"]
        kwargs["grid"] = VoxelGridSpec(
            tuple(g["x_range"]), tuple(g["y_range"]), tuple(g["z_range"]), g["resolution"]
        )
    return NetworkConfig(**kwargs)


def load_config(path) -> NetworkConfig:
    """Read a JSON config file (the documented key-value grammar)."""
    with open(path) as fh:
        data = json.load(fh)
    return config_from_dict(data)


def save_config(config: NetworkConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")
