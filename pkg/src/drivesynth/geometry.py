"""Rigid poses, pinhole cameras and point clouds.

Extrinsics are stored world->camera, so projecting a world point is a single
``R @ p + t`` followed by the pinhole divide. The camera frame is x right,
y down, z forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

ORTHO_TOL = 1e-9


def yaw_matrix(yaw: float) -> np.ndarray:
    """Rotation about +z by ``yaw`` radians."""
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("pose contains non-finite values")
        if np.abs(r.T @ r - np.eye(3)).max() > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> Pose:
        return cls(yaw_matrix(yaw), np.asarray(translation, dtype=np.float64))

    def inverse(self) -> Pose:
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: Pose) -> Pose:
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    __hash__ = None


def transform_points(pose: Pose, pts) -> np.ndarray:
    """Apply ``R @ p + t`` to every row of an (N, 3) array (float64 out)."""
    p = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    return p @ pose.rotation.T + pose.translation


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CameraView:
    view_id: int
    intrinsics: CameraIntrinsics
    extrinsics: Pose  # world -> camera

    @property
    def camera_to_world(self) -> Pose:
        return self.extrinsics.inverse()

    @property
    def center(self) -> np.ndarray:
        return self.camera_to_world.translation


class Projection(NamedTuple):
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    valid: np.ndarray


def project_points(view: CameraView, pts) -> Projection:
    """Pinhole projection of world points.

    A point is valid when it lies in front of the camera and its pixel
    coordinate falls in the half-open image rectangle [0, W) x [0, H).
    """
    pc = transform_points(view.extrinsics, pts)
    k = view.intrinsics
    z = pc[:, 2]
    front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(front, k.fx * pc[:, 0] / np.where(front, z, 1.0) + k.cx, np.nan)
        v = np.where(front, k.fy * pc[:, 1] / np.where(front, z, 1.0) + k.cy, np.nan)
    inside = front & (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    return Projection(u, v, z, inside)


def backproject(view: CameraView, u, v, depth) -> np.ndarray:
    """Inverse of :func:`project_points` for points with known depth."""
    k = view.intrinsics
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    pc = np.stack([(u - k.cx) / k.fx * d, (v - k.cy) / k.fy * d, d], axis=-1)
    return transform_points(view.camera_to_world, pc.reshape(-1, 3))


def _f32_points(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    return p


@dataclass(frozen=True, eq=False)
class PointCloud:
    """LiDAR sweep: float32 storage, promoted to float64 by consumers."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.float32))
    intensity: np.ndarray | None = None
    timestamp: float = 0.0

    def __post_init__(self):
        p = _f32_points(self.points)
        if not np.all(np.isfinite(p)):
            raise ValueError("point cloud contains non-finite coordinates")
        if self.intensity is None:
            i = np.zeros(len(p), dtype=np.float32)
        else:
            i = np.asarray(self.intensity, dtype=np.float32).reshape(-1)
        if len(i) != len(p):
            raise ValueError(f"intensity length {len(i)} != point count {len(p)}")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "intensity", i)

    def __len__(self):
        return len(self.points)

    def subset(self, mask) -> PointCloud:
        return PointCloud(self.points[mask], self.intensity[mask], self.timestamp)

    def transformed(self, pose: Pose) -> PointCloud:
        return PointCloud(transform_points(pose, self.points), self.intensity, self.timestamp)

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return (np.array_equal(self.points, other.points)
                and np.array_equal(self.intensity, other.intensity)
                and self.timestamp == other.timestamp)

    __hash__ = None
