"""
A synthetic street and its LiDAR sweep
======================================

Generate a procedural scene, cast a LiDAR sweep from the ego sensor and
look at what the rays hit.
"""
from __future__ import annotations

import numpy as np

from drivesynth.scene import LidarPattern, cast_rays, gen_scene

# A scene is lanes, boxes and pedestrian skeletons plus an ego trajectory.
layout, traj = gen_scene(seed=0)
print(f"{len(layout.lanes)} lanes, {len(layout.boxes)} boxes, {len(layout.skeletons)} pedestrians, "
      f"{len(traj)} frames")

# The sensor sits 1.84 m above the ground at each trajectory pose.
sensor = traj.sensor_pose(0)
print("sensor position:", sensor.translation)

# Cast a 360 x 32 sweep; points come back in world coordinates.
cloud = cast_rays(layout, sensor, LidarPattern())
ground = np.abs(cloud.points[:, 2]) < 1e-4
print(f"{len(cloud)} returns, {ground.mean():.0%} on the ground")

# Ranges show the street geometry: near ground rings, far box faces.
r = np.linalg.norm(cloud.points - sensor.translation, axis=1)
print("range quartiles [m]:", np.round(np.percentile(r, [25, 50, 75]), 1))

# Move into the sensor frame, where voxelization and evaluation happen.
local = cloud.transformed(sensor.inverse())
print("ground height in the sensor frame:", round(float(local.points[ground, 2].mean()), 2))
