"""
Layout control maps and lift-splat
==================================

Project the scene layout into every camera, then lift per-pixel features
with a depth distribution and splat them into the BEV grid.
"""
from __future__ import annotations

import numpy as np

from drivesynth.bev import BevGridSpec
from drivesynth.geometry import transform_points
from drivesynth.liftsplat import DepthBinning, ImageFeatureMap, avg_pool, lift, one_hot_depth, splat
from drivesynth.layout import rasterize_layout
from drivesynth.pipeline import scaled_view, true_depth_map
from drivesynth.scene import gen_rig, gen_scene, rig_at

layout, traj = gen_scene(seed=2)
views = rig_at(gen_rig(), traj.poses[0])

# Control maps: lanes, box masks and pedestrian keypoints per camera.
maps = [rasterize_layout(layout, v) for v in views]
for v, m in zip(views, maps):
    cover = m.channels.reshape(-1, 3).mean(0)
    print(f"view {v.view_id}: lane {cover[0]:.3f}  box {cover[1]:.3f}  skeleton {cover[2]:.3f}")

# Lift the pooled control maps with a one-hot true-depth distribution.
spec = BevGridSpec()
binning = DepthBinning()
to_sensor = traj.sensor_pose(0).inverse()
bev = np.zeros((spec.H, spec.W, 3))
for v, m in zip(views, maps):
    small = scaled_view(v, 8)
    fmap = ImageFeatureMap(v.view_id, avg_pool(m.channels, 8), one_hot_depth(true_depth_map(layout, small), binning))
    xyz, feats = lift(fmap, small, binning)
    bev += splat(transform_points(to_sensor, xyz), feats, spec)
print("BEV feature mass per channel:", np.round(bev.sum((0, 1)), 1))
print("occupied BEV cells:", int((bev.sum(-1) > 0).sum()), "of", spec.H * spec.W)
