from .config import (
    DETECTOR_STRIDE,
    NetworkConfig,
    config_from_dict,
    config_to_dict,
    load_config,
    save_config,
)
from .detection import DetectionHead, detection_plan
from .model import ModelOutputs, StereoBevModel
from .plan import PlanRow, plan_diff, reference_plan, shape_plan
from .plume import FeatureVolume, build_plume, image_feature_fusion
from .stereo import StereoFeatureNet
from .volume import OccupancyHead, VolumeNet, flatten_height

__all__ = [
    "DETECTOR_STRIDE",
    "DetectionHead",
    "FeatureVolume",
    "ModelOutputs",
    "NetworkConfig",
    "OccupancyHead",
    "PlanRow",
    "StereoBevModel",
    "StereoFeatureNet",
    "VolumeNet",
    "build_plume",
    "config_from_dict",
    "config_to_dict",
    "detection_plan",
    "flatten_height",
    "image_feature_fusion",
    "load_config",
    "plan_diff",
    "reference_plan",
    "save_config",
    "shape_plan",
]
