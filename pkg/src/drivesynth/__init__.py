"""Desk-scale driving-scene synthesis toolkit: BEV LiDAR codec with ray-marched
rendering, layout control maps, lift-splat, rectified-flow DiT blocks,
structured captions and Chamfer evaluation.
"""

from .geometry import (CameraIntrinsics, CameraView, PointCloud, Pose, backproject, project_points,
                       transform_points)
from .scene import EgoTrajectory, LidarPattern, SceneLayout, SceneParams, cast_rays, gen_rig, gen_scene
from .bev import (BevCodec, BevFeatureGrid, BevGridSpec, BevLatent, decode_bev, encode_bev,
                  postprocess_filter, reconstruct_cloud, render_rays, voxelize)
from .metrics import chamfer, chamfer_horizons, crop_cloud, frechet_gaussian

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "CameraView", "PointCloud", "Pose", "backproject", "project_points",
    "transform_points", "EgoTrajectory", "LidarPattern", "SceneLayout", "SceneParams", "cast_rays",
    "gen_rig", "gen_scene", "BevCodec", "BevFeatureGrid", "BevGridSpec", "BevLatent", "decode_bev",
    "encode_bev", "postprocess_filter", "reconstruct_cloud", "render_rays", "voxelize", "chamfer",
    "chamfer_horizons", "crop_cloud", "frechet_gaussian",
]
