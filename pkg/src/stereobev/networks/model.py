"""Full model wiring: stereo features -> metric volume -> BEV -> both headers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .. import checkpoint as ckpt
from ..errors import RigMismatchError
from ..geometry import CameraRig
from ..tensor import Tensor
from ..voxelgrid import OccupancyGrid, fov_mask
from .config import NetworkConfig
from .detection import DetectionHead
from .plume import FeatureVolume, build_plume, image_feature_fusion
from .stereo import StereoFeatureNet
from .volume import OccupancyHead, VolumeNet


@dataclass
class ModelOutputs:
    occupancy: OccupancyGrid
    cls_logits: Tensor
    regression: Tensor
    bev_features: Tensor
    volume: FeatureVolume


class StereoBevModel:
    """Owns all parameters; per-sample forward passes are free of shared state
    apart from the dropout stream consumed in train mode."""

    def __init__(self, config: NetworkConfig, seed: int = 0):
        self.config = config
        init_ss, drop_ss = np.random.SeedSequence(seed).spawn(2)
        rng = np.random.default_rng(init_ss)
        self.stereo = StereoFeatureNet(rng, config)
        self.stereo_right = None if config.share_stereo_weights else StereoFeatureNet(rng, config)
        c_img = self.stereo.out_channels
        self.plume_channels = 2 * c_img + (3 if config.concat_voxel_coords else 0)
        self.volume_net = VolumeNet(rng, config, self.plume_channels)
        self.occupancy_head = OccupancyHead(rng, config, self.volume_net.out_channels)
        detector_in = self.volume_net.out_channels + (2 * c_img if config.fusion_enabled else 0)
        self.detection_head = DetectionHead(rng, config, detector_in)
        self.dropout_rng = np.random.default_rng(drop_ss)

    # -- parameter bookkeeping -------------------------------------------------

    def backbone_params(self) -> dict[str, Tensor]:
        params = dict(self.stereo.named_params("stereo"))
        if self.stereo_right is not None:
            params.update(self.stereo_right.named_params("stereo_right"))
        params.update(self.volume_net.named_params("volume"))
        params.update(self.occupancy_head.named_params("occupancy"))
        return params

    def detector_params(self) -> dict[str, Tensor]:
        return dict(self.detection_head.named_params("detector"))

    def params(self) -> dict[str, Tensor]:
        params = self.backbone_params()
        params.update(self.detector_params())
        return params

    def set_trainable(self, names, trainable: bool) -> None:
        for tensor in names.values() if isinstance(names, dict) else names:
            tensor.requires_grad = trainable

    def save(self, path) -> None:
        ckpt.save_params(path, self.params())

    def load(self, path) -> None:
        ckpt.assign_params(self.params(), ckpt.load_params(path))

    # -- forward pieces ----------------------------------------------------------

    def feature_rig(self, rig: CameraRig) -> CameraRig:
        factor = self.config.resolution_factor
        return rig if factor == 1.0 else rig.scaled(factor)

    def stereo_features(self, left: Tensor, right: Tensor, train: bool = False):
        rng = self.dropout_rng if train else None
        left_feat = self.stereo.forward(left, train=train, rng=rng)
        right_net = self.stereo_right if self.stereo_right is not None else self.stereo
        right_feat = right_net.forward(right, train=train, rng=rng)
        return left_feat, right_feat

    def build_volume(self, left_feat: Tensor, right_feat: Tensor, rig: CameraRig) -> FeatureVolume:
        return build_plume(
            left_feat,
            right_feat,
            self.config.grid,
            self.feature_rig(rig),
            concat_voxel_coords=self.config.concat_voxel_coords,
        )

    def _trunk(self, left: Tensor, right: Tensor, rig: CameraRig, train: bool, with_fusion: bool = True):
        feature_rig = self.feature_rig(rig)
        expected = (feature_rig.image_h, feature_rig.image_w)
        if tuple(left.shape[1:]) != (rig.image_h, rig.image_w):
            raise RigMismatchError(f"image {left.shape} does not match rig {rig.image_w}x{rig.image_h}")
        left_feat, right_feat = self.stereo_features(left, right, train=train)
        if tuple(left_feat.shape[1:]) != expected:
            raise RigMismatchError(f"feature map {left_feat.shape} does not match scaled rig {expected}")
        volume = self.build_volume(left_feat, right_feat, rig)
        bev = self.volume_net(volume.values)
        mask = fov_mask(self.config.grid, feature_rig)
        occupancy = self.occupancy_head(bev, mask)
        detector_input = bev
        if with_fusion and self.config.fusion_enabled:
            detector_input = image_feature_fusion(
                left_feat, right_feat, occupancy.values, bev, self.config.grid, feature_rig
            )
        return volume, occupancy, detector_input

    def forward_occupancy(self, left: Tensor, right: Tensor, rig: CameraRig, train: bool = False) -> OccupancyGrid:
        """Stereo -> volume -> occupancy, skipping the detection header."""
        _, occupancy, _ = self._trunk(left, right, rig, train, with_fusion=False)
        return occupancy

    def detector_features(self, left: Tensor, right: Tensor, rig: CameraRig) -> Tensor:
        """Eval-mode detector input (BEV features plus fused image evidence)."""
        _, _, detector_input = self._trunk(left, right, rig, train=False)
        return detector_input

    def forward(self, left: Tensor, right: Tensor, rig: CameraRig, train: bool = False) -> ModelOutputs:
        volume, occupancy, detector_input = self._trunk(left, right, rig, train)
        cls_logits, regression = self.detection_head(detector_input)
        return ModelOutputs(
            occupancy=occupancy,
            cls_logits=cls_logits,
            regression=regression,
            bev_features=detector_input,
            volume=volume,
        )
