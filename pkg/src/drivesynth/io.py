"""On-disk formats.

GPC1 point clouds and GBV1 grids are little-endian binary; calibration,
layouts, grid specs, LiDAR patterns and parameter manifests are JSON.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, CameraView, PointCloud, Pose
from .scene import Box, EgoTrajectory, LidarPattern, SceneLayout, Skeleton

CLOUD_MAGIC = b"GPC1"
GRID_MAGIC = b"GBV1"


class FormatError(ValueError):
    pass


# ------------------------------------------------------------------- binary

def cloud_to_bytes(cloud: PointCloud) -> bytes:
    rec = np.empty((len(cloud), 4), dtype="<f4")
    rec[:, :3] = cloud.points
    rec[:, 3] = cloud.intensity
    return CLOUD_MAGIC + struct.pack("<I", len(cloud)) + rec.tobytes()


def cloud_from_bytes(data: bytes, timestamp: float = 0.0) -> PointCloud:
    if data[:4] != CLOUD_MAGIC:
        raise FormatError(f"bad point cloud magic {data[:4]!r}")
    (n,) = struct.unpack_from("<I", data, 4)
    body = data[8:]
    if len(body) != 16 * n:
        raise FormatError(f"point cloud header says {n} points, payload holds {len(body) / 16:g}")
    rec = np.frombuffer(body, dtype="<f4").reshape(n, 4)
    return PointCloud(rec[:, :3].astype(np.float32), rec[:, 3].astype(np.float32), timestamp)


def write_cloud(path, cloud: PointCloud) -> None:
    Path(path).write_bytes(cloud_to_bytes(cloud))


def read_cloud(path, timestamp: float = 0.0) -> PointCloud:
    return cloud_from_bytes(Path(path).read_bytes(), timestamp)


def grid_to_bytes(values: np.ndarray) -> bytes:
    v = np.asarray(values)
    if v.ndim == 2:
        v = v[..., None]
    if v.ndim != 3:
        raise FormatError(f"grid must be (H, W, C), got {v.shape}")
    h, w, c = v.shape
    return GRID_MAGIC + struct.pack("<III", h, w, c) + np.ascontiguousarray(v, dtype="<f4").tobytes()


def grid_from_bytes(data: bytes) -> np.ndarray:
    if data[:4] != GRID_MAGIC:
        raise FormatError(f"bad grid magic {data[:4]!r}")
    h, w, c = struct.unpack_from("<III", data, 4)
    body = data[16:]
    if len(body) != 4 * h * w * c:
        raise FormatError(f"grid header says {h}x{w}x{c}, payload holds {len(body) // 4} values")
    return np.frombuffer(body, dtype="<f4").reshape(h, w, c).astype(np.float32)


def write_grid(path, values: np.ndarray) -> None:
    Path(path).write_bytes(grid_to_bytes(values))


def read_grid(path) -> np.ndarray:
    return grid_from_bytes(Path(path).read_bytes())


def write_params(path, params: dict) -> None:
    """Flatten a name -> array dict into one GBV1 column plus a JSON manifest beside it."""
    path = Path(path)
    names = sorted(params)
    manifest = {"format": "GBV1", "tensors": []}
    offset = 0
    flat = []
    for name in names:
        a = np.asarray(params[name], dtype=np.float64)
        manifest["tensors"].append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        flat.append(a.reshape(-1))
    values = np.concatenate(flat) if flat else np.zeros(0)
    write_grid(path, values.reshape(1, -1, 1))
    manifest_path(path).write_text(json.dumps(manifest, indent=1))


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def read_params(path) -> dict:
    path = Path(path)
    flat = read_grid(path).reshape(-1).astype(np.float64)
    manifest = json.loads(manifest_path(path).read_text())
    out = {}
    for t in manifest["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        out[t["name"]] = flat[t["offset"]: t["offset"] + n].reshape(t["shape"]).copy()
    return out


# --------------------------------------------------------------------- JSON

def _dump(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))


def _load(path):
    return json.loads(Path(path).read_text())


def pose_to_dict(p: Pose) -> dict:
    return {"rotation": p.rotation.tolist(), "translation": p.translation.tolist()}


def pose_from_dict(d: dict) -> Pose:
    return Pose(np.array(d["rotation"], dtype=np.float64), np.array(d["translation"], dtype=np.float64))


def rig_to_dict(views: list[CameraView]) -> dict:
    out = []
    for v in views:
        k = v.intrinsics
        out.append({"view_id": v.view_id, "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
                    "width": k.width, "height": k.height, **pose_to_dict(v.extrinsics)})
    return {"views": out}


def rig_from_dict(d: dict) -> list[CameraView]:
    views = []
    for v in d["views"]:
        k = CameraIntrinsics(float(v["fx"]), float(v["fy"]), float(v["cx"]), float(v["cy"]),
                             int(v["width"]), int(v["height"]))
        views.append(CameraView(int(v["view_id"]), k, pose_from_dict(v)))
    ids = [v.view_id for v in views]
    if len(set(ids)) != len(ids):
        raise FormatError(f"duplicate view ids in calibration: {ids}")
    return views


def write_rig(path, views) -> None:
    _dump(path, rig_to_dict(views))


def read_rig(path) -> list[CameraView]:
    return rig_from_dict(_load(path))


def layout_to_dict(layout: SceneLayout, trajectory: EgoTrajectory | None = None) -> dict:
    d = {
        "lanes": [l.tolist() for l in layout.lanes],
        "skeletons": [{"joints": s.joints.tolist(), "visible": s.visible.tolist()}
                      for s in layout.skeletons],
        "boxes": [{"center": list(map(float, b.center)), "size": list(map(float, b.size)),
                   "yaw": float(b.yaw), "category": int(b.category)} for b in layout.boxes],
    }
    if trajectory is not None:
        d["trajectory"] = {"frame_period": trajectory.frame_period,
                           "poses": [pose_to_dict(p) for p in trajectory.poses]}
    return d


def layout_from_dict(d: dict) -> tuple[SceneLayout, EgoTrajectory | None]:
    layout = SceneLayout(
        lanes=[np.array(l, dtype=np.float64) for l in d.get("lanes", [])],
        skeletons=[Skeleton(np.array(s["joints"]), np.array(s["visible"], dtype=bool))
                   for s in d.get("skeletons", [])],
        boxes=[Box(tuple(b["center"]), tuple(b["size"]), float(b["yaw"]), int(b["category"]))
               for b in d.get("boxes", [])],
    )
    traj = None
    if "trajectory" in d:
        t = d["trajectory"]
        traj = EgoTrajectory([pose_from_dict(p) for p in t["poses"]], float(t["frame_period"]))
    return layout, traj


def write_layout(path, layout, trajectory=None) -> None:
    _dump(path, layout_to_dict(layout, trajectory))


def read_layout(path):
    return layout_from_dict(_load(path))


def write_spec(path, spec) -> None:
    from dataclasses import asdict

    _dump(path, asdict(spec))


def read_spec(path):
    from .bev import BevGridSpec

    return BevGridSpec(**_load(path))


def write_pattern(path, pattern: LidarPattern) -> None:
    _dump(path, {"azimuth_count": pattern.azimuth_count,
                 "elevations": list(pattern.elevations), "max_range": pattern.max_range})


def read_pattern(path) -> LidarPattern:
    d = _load(path)
    return LidarPattern(int(d["azimuth_count"]), tuple(d["elevations"]), float(d["max_range"]))


def write_json(path, obj) -> None:
    _dump(path, obj)


def read_json(path):
    return _load(path)
