"""Procedural toy driving scenes and an exact analytic LiDAR.

The ground is the infinite plane z = 0. Boxes are yawed rectangular prisms
hit with a slab test; pedestrians never occlude LiDAR rays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, CameraView, PointCloud, Pose, yaw_matrix

N_JOINTS = 17
# COCO-17 joint order: nose, eyes, ears, shoulders, elbows, wrists, hips, knees, ankles.
LIMBS = (
    (15, 13), (13, 11), (16, 14), (14, 12), (11, 12), (5, 11), (6, 12), (5, 6),
    (5, 7), (6, 8), (7, 9), (8, 10), (1, 2), (0, 1), (0, 2), (1, 3), (2, 4),
    (3, 5), (4, 6),
)
# Standing pose in a body frame: x forward, y left, z up (meters).
_JOINT_TEMPLATE = np.array([
    [0.10, 0.00, 1.62], [0.08, 0.04, 1.66], [0.08, -0.04, 1.66],
    [0.02, 0.08, 1.64], [0.02, -0.08, 1.64], [0.00, 0.20, 1.42],
    [0.00, -0.20, 1.42], [0.02, 0.26, 1.12], [0.02, -0.26, 1.12],
    [0.06, 0.28, 0.86], [0.06, -0.28, 0.86], [0.00, 0.11, 0.92],
    [0.00, -0.11, 0.92], [0.02, 0.11, 0.50], [0.02, -0.11, 0.50],
    [0.00, 0.11, 0.08], [0.00, -0.11, 0.08],
])

CATEGORY_SIZES = {0: (4.5, 1.9, 1.6), 1: (8.0, 2.5, 3.2), 2: (1.8, 0.7, 1.5)}
CATEGORY_NAMES = {0: "car", 1: "truck", 2: "cyclist"}

LIDAR_HEIGHT = 1.84
CAMERA_HEIGHT = 1.5


@dataclass(frozen=True)
class Box:
    center: tuple
    size: tuple
    yaw: float
    category: int = 0

    def __post_init__(self):
        if min(self.size) <= 0:
            raise ValueError(f"box size must be positive, got {self.size}")

    def corners(self) -> np.ndarray:
        """(8, 3) world corners; bit k of the index picks the +/- half extent on axis k."""
        half = np.asarray(self.size, dtype=np.float64) / 2
        signs = np.array([[(i >> a) & 1 for a in range(3)] for i in range(8)]) * 2.0 - 1.0
        local = signs * half
        return local @ yaw_matrix(self.yaw).T + np.asarray(self.center, dtype=np.float64)


@dataclass(frozen=True)
class Skeleton:
    joints: np.ndarray  # (J, 3) world
    visible: np.ndarray  # (J,) bool

    def __post_init__(self):
        j = np.asarray(self.joints, dtype=np.float64).reshape(-1, 3)
        vis = np.asarray(self.visible, dtype=bool).reshape(-1)
        if len(vis) != len(j):
            raise ValueError("visibility length must match joint count")
        object.__setattr__(self, "joints", j)
        object.__setattr__(self, "visible", vis)


@dataclass(frozen=True)
class SceneLayout:
    lanes: list = field(default_factory=list)
    skeletons: list = field(default_factory=list)
    boxes: list = field(default_factory=list)

    def __post_init__(self):
        lanes = [np.asarray(l, dtype=np.float64).reshape(-1, 3) for l in self.lanes]
        for l in lanes:
            if len(l) < 2:
                raise ValueError("lane polylines need at least 2 vertices")
        object.__setattr__(self, "lanes", lanes)

    def transformed(self, pose: Pose) -> SceneLayout:
        """Rigidly move every element of the layout by ``pose``."""
        from .geometry import transform_points

        yaw = float(np.arctan2(pose.rotation[1, 0], pose.rotation[0, 0]))
        boxes = []
        for b in self.boxes:
            c = transform_points(pose, np.asarray(b.center))[0]
            boxes.append(Box(tuple(c), b.size, b.yaw + yaw, b.category))
        return SceneLayout(
            lanes=[transform_points(pose, l) for l in self.lanes],
            skeletons=[Skeleton(transform_points(pose, s.joints), s.visible)
                       for s in self.skeletons],
            boxes=boxes,
        )


@dataclass(frozen=True)
class EgoTrajectory:
    poses: list  # ego -> world, one per frame
    frame_period: float = 0.5

    def __post_init__(self):
        if not self.frame_period > 0:
            raise ValueError("frame period must be positive")

    def __len__(self):
        return len(self.poses)

    def sensor_pose(self, k: int, height: float = LIDAR_HEIGHT) -> Pose:
        """LiDAR sensor -> world pose at frame ``k``."""
        return self.poses[k].compose(Pose(np.eye(3), [0.0, 0.0, height]))


@dataclass(frozen=True)
class LidarPattern:
    azimuth_count: int = 360
    elevations: tuple = tuple(np.round(np.linspace(-30.67, 10.67, 32), 4) * np.pi / 180)
    max_range: float = 80.0

    def __post_init__(self):
        if self.azimuth_count < 1:
            raise ValueError("azimuth count must be >= 1")
        if not self.max_range > 0:
            raise ValueError("max range must be positive")
        object.__setattr__(self, "elevations", tuple(float(e) for e in self.elevations))

    def directions(self) -> np.ndarray:
        """Unit ray directions in the sensor frame, elevation-major."""
        az = 2 * np.pi * np.arange(self.azimuth_count) / self.azimuth_count
        el = np.asarray(self.elevations, dtype=np.float64)
        e, a = np.meshgrid(el, az, indexing="ij")
        d = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1)
        return d.reshape(-1, 3)


@dataclass(frozen=True)
class SceneParams:
    n_lanes: int = 4
    n_boxes: int = 6
    n_pedestrians: int = 3
    n_frames: int = 7
    frame_period: float = 0.5
    extent: float = 40.0
    ego_speed: float = 4.0

    def validate(self) -> list[str]:
        errors = []
        for name in ("n_lanes", "n_boxes", "n_pedestrians"):
            v = getattr(self, name)
            if not 0 <= v <= 64:
                errors.append(f"{name} must be in [0, 64], got {v}")
        if self.n_lanes == 0 and self.n_boxes == 0:
            errors.append("scene needs at least one lane or one box")
        if not 1 <= self.n_frames <= 1000:
            errors.append(f"n_frames must be in [1, 1000], got {self.n_frames}")
        if not self.frame_period > 0:
            errors.append("frame_period must be positive")
        if not 10.0 <= self.extent <= 200.0:
            errors.append(f"extent must be in [10, 200], got {self.extent}")
        if not 0.0 <= self.ego_speed <= 40.0:
            errors.append(f"ego_speed must be in [0, 40], got {self.ego_speed}")
        return errors


def _skeleton_at(x: float, y: float, heading: float, rng) -> Skeleton:
    scale = rng.uniform(0.9, 1.1)
    pts = _JOINT_TEMPLATE * scale
    pts = pts @ yaw_matrix(heading).T + np.array([x, y, 0.0])
    visible = rng.uniform(size=N_JOINTS) > 0.1
    return Skeleton(pts, visible)


def gen_scene(seed: int, params: SceneParams | None = None) -> tuple[SceneLayout, EgoTrajectory]:
    """Deterministic toy street: parallel lanes along +x, parked/moving boxes, pedestrians."""
    params = params or SceneParams()
    errors = params.validate()
    if errors:
        raise ValueError("; ".join(errors))
    rng = np.random.default_rng(seed)
    ext = params.extent

    lanes = []
    lane_width = 3.5
    offsets = (np.arange(params.n_lanes + 1) - params.n_lanes / 2) * lane_width
    bend = rng.uniform(-0.002, 0.002)
    xs = np.linspace(-ext, ext, 9)
    for off in offsets[: params.n_lanes]:
        ys = off + bend * xs ** 2
        lanes.append(np.stack([xs, ys, np.zeros_like(xs)], axis=1))

    # ego drives along y ~ 0 over [0, speed * duration]; keep that corridor clear
    path_len = params.ego_speed * params.frame_period * params.n_frames
    boxes: list[Box] = []
    tries = 0
    while len(boxes) < params.n_boxes:
        tries += 1
        if tries > 10000:
            raise RuntimeError("could not place boxes; lower n_boxes or raise extent")
        cat = int(rng.choice([0, 0, 0, 1, 2]))
        l, w, h = CATEGORY_SIZES[cat]
        size = (l * rng.uniform(0.9, 1.1), w * rng.uniform(0.9, 1.1), h * rng.uniform(0.9, 1.1))
        radius = 0.5 * np.hypot(size[0], size[1])
        lim = ext - radius
        cx, cy = rng.uniform(-lim, lim, size=2)
        if abs(cy) < 2.5 + radius and -8.0 - radius < cx < path_len + 8.0 + radius:
            continue
        if any(np.hypot(cx - b.center[0], cy - b.center[1])
               < radius + 0.5 * np.hypot(b.size[0], b.size[1]) + 0.5 for b in boxes):
            continue
        yaw = float(rng.choice([0.0, np.pi]) + rng.normal(0.0, 0.15))
        boxes.append(Box((float(cx), float(cy), size[2] / 2), size, yaw, cat))

    skeletons = []
    for _ in range(params.n_pedestrians):
        side = rng.choice([-1.0, 1.0])
        x = rng.uniform(-ext * 0.8, ext * 0.8)
        y = side * rng.uniform(params.n_lanes * lane_width / 2 + 1.0,
                               params.n_lanes * lane_width / 2 + 4.0)
        skeletons.append(_skeleton_at(x, y, rng.uniform(-np.pi, np.pi), rng))

    poses = [Pose(np.eye(3), [params.ego_speed * params.frame_period * k, 0.0, 0.0])
             for k in range(params.n_frames)]
    return (SceneLayout(lanes=lanes, skeletons=skeletons, boxes=boxes),
            EgoTrajectory(poses, params.frame_period))


def intersect_boxes(origins: np.ndarray, dirs: np.ndarray, boxes) -> np.ndarray:
    """Nearest positive hit distance of each ray against any box (inf on miss)."""
    best = np.full(len(origins), np.inf)
    for b in boxes:
        rot = yaw_matrix(b.yaw)
        o = (origins - np.asarray(b.center)) @ rot  # world -> box frame
        d = dirs @ rot
        half = np.asarray(b.size) / 2
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-half - o) * inv
            t2 = (half - o) * inv
        # axis-parallel rays: inside the slab -> (-inf, inf), outside -> empty
        par = d == 0
        inside = np.abs(o) <= half
        lo = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
        hi = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
        tmin = lo.max(axis=1)
        tmax = hi.min(axis=1)
        hit = tmax >= np.maximum(tmin, 0.0)
        t = np.where(tmin > 1e-9, tmin, tmax)
        t = np.where(hit & (t > 1e-9), t, np.inf)
        best = np.minimum(best, t)
    return best


def intersect_ground(origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -origins[:, 2] / dirs[:, 2]
    return np.where((dirs[:, 2] != 0) & (t > 1e-9), t, np.inf)


def cast_rays(layout: SceneLayout, sensor: Pose, pattern: LidarPattern) -> PointCloud:
    """Exact LiDAR sweep. ``sensor`` is sensor -> world; points are returned in world coordinates."""
    dirs = pattern.directions() @ sensor.rotation.T
    origins = np.broadcast_to(sensor.translation, dirs.shape)
    t = np.minimum(intersect_ground(origins, dirs), intersect_boxes(origins, dirs, layout.boxes))
    keep = t <= pattern.max_range
    pts = origins[keep] + dirs[keep] * t[keep, None]
    intensity = np.clip(0.8 * np.exp(-t[keep] / 60.0), 0.0, 1.0)
    return PointCloud(pts, intensity)


def default_intrinsics(width: int = 160, height: int = 96, hfov_deg: float = 70.0) -> CameraIntrinsics:
    f = (width / 2) / np.tan(np.radians(hfov_deg) / 2)
    return CameraIntrinsics(f, f, width / 2, height / 2, width, height)


def camera_extrinsics(yaw: float, position) -> Pose:
    """world -> camera for a level camera looking along ``yaw`` from ``position``."""
    c, s = np.cos(yaw), np.sin(yaw)
    cam_to_world = np.array([[s, 0.0, c], [-c, 0.0, s], [0.0, -1.0, 0.0]])
    return Pose(cam_to_world, position).inverse()


def gen_rig(n_views: int = 6, intrinsics: CameraIntrinsics | None = None,
            height: float = CAMERA_HEIGHT) -> list[CameraView]:
    """Cameras evenly spaced in yaw around the ego origin; view 0 looks along +x."""
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    k = intrinsics or default_intrinsics()
    return [CameraView(i, k, camera_extrinsics(2 * np.pi * i / n_views, [0.0, 0.0, height]))
            for i in range(n_views)]


def view_yaw(view: CameraView) -> float:
    """Heading of the optical axis in the world xy-plane (radians)."""
    fwd = view.camera_to_world.rotation[:, 2]
    return float(np.arctan2(fwd[1], fwd[0]))


def rig_at(rig: list[CameraView], ego: Pose) -> list[CameraView]:
    """Re-anchor an ego-frame rig at an ego -> world pose."""
    to_ego = ego.inverse()
    return [CameraView(v.view_id, v.intrinsics, v.extrinsics.compose(to_ego)) for v in rig]
