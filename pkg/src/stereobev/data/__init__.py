from .kitti import (
    StereoSample,
    list_frames,
    load_sample,
    parse_kitti_calib,
    parse_kitti_labels,
    parse_velo_to_cam,
    read_image,
    read_point_cloud,
    save_sample,
    write_image,
    write_kitti_calib,
    write_kitti_labels,
    write_point_cloud,
)
from .synth import SyntheticSceneSpec, make_dataset, synth_scene

__all__ = [
    "StereoSample",
    "SyntheticSceneSpec",
    "list_frames",
    "load_sample",
    "make_dataset",
    "parse_kitti_calib",
    "parse_kitti_labels",
    "parse_velo_to_cam",
    "read_image",
    "read_point_cloud",
    "save_sample",
    "synth_scene",
    "write_image",
    "write_kitti_calib",
    "write_kitti_labels",
    "write_point_cloud",
]
