"""End-to-end run: synth -> voxelize/encode -> project/splat -> caption -> sample
-> reconstruct -> eval. Every stage writes its outputs to disk.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import io
from .bev import BevCodec, BevGridSpec, BevLatent, encode_bev, reconstruct_cloud, voxelize
from .datacrafter import (build_structured_caption, caption_embed, caption_to_json, filter_clips,
                          fuse_captions, score_clip, sharpness_subscores, ViewCaptionSet)
from .flow import HatFlowModel, sample_flow, train_toy_flow
from .geometry import CameraIntrinsics, CameraView, PointCloud, Pose, transform_points
from .layout import LayoutEncoder, encode_layout, rasterize_layout, rasterize_layout_bev
from .liftsplat import DepthBinning, ImageFeatureMap, avg_pool, concat_bev_conditions, lift, one_hot_depth, splat
from .metrics import CHAMFER_CONVENTION, chamfer, crop_cloud, horizon_indices
from .scene import (CATEGORY_NAMES, LidarPattern, SceneParams, cast_rays, default_intrinsics, gen_rig,
                    gen_scene, intersect_boxes, intersect_ground, rig_at)

log = logging.getLogger("drivesynth")


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    n_lanes: int = 4
    n_boxes: int = 6
    n_pedestrians: int = 3
    n_frames: int = 7
    frame_period: float = 0.5
    extent: float = 40.0
    ego_speed: float = 4.0
    grid_x_min: float = -51.2
    grid_x_max: float = 51.2
    grid_y_min: float = -51.2
    grid_y_max: float = 51.2
    grid_z_min: float = -3.0
    grid_z_max: float = 5.0
    grid_cell: float = 0.4
    grid_z_bins: int = 20
    lidar_azimuths: int = 360
    lidar_rings: int = 32
    lidar_elev_min: float = -30.67
    lidar_elev_max: float = 10.67
    lidar_max_range: float = 80.0
    n_views: int = 6
    image_width: int = 160
    image_height: int = 96
    hfov_deg: float = 70.0
    feature_stride: int = 8
    depth_min: float = 1.0
    depth_max: float = 60.0
    depth_bins: int = 59
    layout_channels: int = 4
    flow_steps: int = 100
    train_steps: int = 200
    flow_lr: float = 0.05
    occ_threshold: float = 0.5
    clip_tau: float = 0.1
    out_dir: str = "run"

    # ------------------------------------------------------------ derived
    def grid_spec(self) -> BevGridSpec:
        return BevGridSpec(self.grid_x_min, self.grid_x_max, self.grid_y_min, self.grid_y_max,
                           self.grid_z_min, self.grid_z_max, self.grid_cell, self.grid_z_bins)

    def scene_params(self) -> SceneParams:
        return SceneParams(self.n_lanes, self.n_boxes, self.n_pedestrians, self.n_frames,
                           self.frame_period, self.extent, self.ego_speed)

    def pattern(self) -> LidarPattern:
        el = np.radians(np.linspace(self.lidar_elev_min, self.lidar_elev_max, self.lidar_rings))
        return LidarPattern(self.lidar_azimuths, tuple(el), self.lidar_max_range)

    def binning(self) -> DepthBinning:
        return DepthBinning(self.depth_min, self.depth_max, self.depth_bins)

    def rig(self) -> list[CameraView]:
        return gen_rig(self.n_views, default_intrinsics(self.image_width, self.image_height, self.hfov_deg))

    def validate(self) -> list[str]:
        errors = []
        spec_err = BevGridSpec.validate(_UncheckedSpec(self))
        errors += [f"grid spec: {e}" for e in spec_err]
        if not spec_err:
            spec = self.grid_spec()
            if spec.H % 8 or spec.W % 8:
                errors.append(f"grid spec: {spec.H}x{spec.W} cells not divisible by 8")
        errors += [f"scene: {e}" for e in self.scene_params().validate()]
        if self.seed < 0:
            errors.append("seed must be >= 0")
        if self.lidar_azimuths < 1 or self.lidar_rings < 1:
            errors.append("lidar: azimuths and rings must be >= 1")
        if not self.lidar_elev_min <= self.lidar_elev_max:
            errors.append("lidar: elev_min must be <= elev_max")
        if not self.lidar_max_range > 0:
            errors.append("lidar: max_range must be positive")
        if not 1 <= self.n_views <= 64:
            errors.append(f"n_views must be in [1, 64], got {self.n_views}")
        if not 0.0 < self.hfov_deg < 180.0:
            errors.append("hfov_deg must be in (0, 180)")
        if self.feature_stride < 1 or self.image_width % self.feature_stride \
                or self.image_height % self.feature_stride or self.image_width < 1 or self.image_height < 1:
            errors.append("image size must be positive and divisible by feature_stride")
        if not (0 < self.depth_min < self.depth_max and self.depth_bins >= 1):
            errors.append("depth binning needs 0 < depth_min < depth_max and depth_bins >= 1")
        if self.layout_channels < 1:
            errors.append("layout_channels must be >= 1")
        if not 1 <= self.flow_steps <= 100000:
            errors.append("flow_steps must be in [1, 100000]")
        if self.train_steps < 0:
            errors.append("train_steps must be >= 0")
        if not self.flow_lr >= 0:
            errors.append("flow_lr must be >= 0")
        for name in ("occ_threshold", "clip_tau"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                errors.append(f"{name} must be in [0, 1]")
        if self.frame_period > 0:
            try:
                last = horizon_indices(1.0 / self.frame_period)[-1]
                if self.n_frames <= last:
                    errors.append(f"n_frames must be > {last} to reach the 3 s horizon")
            except ValueError as e:
                errors.append(f"frame_period: {e}")
        return errors


class _UncheckedSpec:
    """Attribute view of the grid fields, so validation can run without raising."""

    def __init__(self, cfg: RunConfig):
        self.x_min, self.x_max = cfg.grid_x_min, cfg.grid_x_max
        self.y_min, self.y_max = cfg.grid_y_min, cfg.grid_y_max
        self.z_min, self.z_max = cfg.grid_z_min, cfg.grid_z_max
        self.cell_size_xy, self.n_z_bins = cfg.grid_cell, cfg.grid_z_bins


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(kind: str, raw: str):
    if kind == "int":
        return int(raw)
    if kind == "float":
        v = float(raw)
        if not np.isfinite(v):
            raise ValueError("not finite")
        return v
    return raw


def validate_config(text: str) -> tuple[RunConfig, list[str]]:
    """Parse ``key = value`` lines into a :class:`RunConfig`.

    Returns the config and a list of warnings (unknown keys). Raises
    :class:`ConfigError` carrying every violation found.
    """
    values: dict = {}
    errors: list[str] = []
    warnings: list[str] = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {n}: expected key = value")
            continue
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            warnings.append(f"line {n}: unknown key '{key}' ignored")
            continue
        try:
            values[key] = _convert(_TYPES[key], raw)
        except ValueError:
            errors.append(f"line {n}: {key} expects {_TYPES[key]}, got {raw!r}")
    cfg = RunConfig(**values)
    errors += cfg.validate()
    if errors:
        raise ConfigError(errors)
    return cfg, warnings


def config_text(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())


@contextmanager
def stage(name: str):
    log.info("stage %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as e:  # noqa: BLE001 - every failure is reported with its stage
        raise StageError(name, e) from e


# ----------------------------------------------------------------- helpers

def scaled_view(view: CameraView, stride: int) -> CameraView:
    k = view.intrinsics
    ki = CameraIntrinsics(k.fx / stride, k.fy / stride, k.cx / stride, k.cy / stride,
                          k.width // stride, k.height // stride)
    return CameraView(view.view_id, ki, view.extrinsics)


def true_depth_map(layout, view: CameraView) -> np.ndarray:
    """Optical-axis depth of the first scene surface behind each pixel center (inf on miss)."""
    k = view.intrinsics
    vv, uu = np.meshgrid(np.arange(k.height) + 0.5, np.arange(k.width) + 0.5, indexing="ij")
    rays_c = np.stack([(uu - k.cx) / k.fx, (vv - k.cy) / k.fy, np.ones_like(uu)], axis=-1).reshape(-1, 3)
    norm = np.linalg.norm(rays_c, axis=1)
    c2w = view.camera_to_world
    dirs = (rays_c / norm[:, None]) @ c2w.rotation.T
    origins = np.broadcast_to(c2w.translation, dirs.shape)
    t = np.minimum(intersect_ground(origins, dirs), intersect_boxes(origins, dirs, layout.boxes))
    return (t / norm).reshape(k.height, k.width)


def _position(bearing: float) -> str:
    a = (np.degrees(bearing) + 180.0) % 360.0 - 180.0
    if -45.0 <= a < 45.0:
        return "Front"
    if 45.0 <= a < 135.0:
        return "Left"
    if -135.0 <= a < -45.0:
        return "Right"
    return "Behind"


def view_caption(layout, view: CameraView, seed: int, n_lanes: int):
    """Structured caption of what one view sees, derived from the layout."""
    rng = np.random.default_rng(seed)
    weather = str(rng.choice(["Sunny", "Cloudy", "Overcast"]))
    lane = {0: "No visible sign", 1: "Single Lane", 2: "Dual Lane"}.get(n_lanes, "Multi-Lane")
    center = view.center
    objects, traffic = [], []
    k = view.intrinsics
    for b in layout.boxes:
        proj = transform_points(view.extrinsics, b.corners())
        if np.any(proj[:, 2] <= 0.1):
            continue
        u = k.fx * proj[:, 0] / proj[:, 2] + k.cx
        v = k.fy * proj[:, 1] / proj[:, 2] + k.cy
        x1, x2 = max(u.min(), 0.0), min(u.max(), k.width)
        y1, y2 = max(v.min(), 0.0), min(v.max(), k.height)
        if not (x1 < x2 and y1 < y2):
            continue
        rel = np.asarray(b.center[:2]) - center[:2]
        dist = int(round(float(np.hypot(*rel))))
        name = CATEGORY_NAMES[b.category]
        pos = _position(float(np.arctan2(rel[1], rel[0])))
        objects.append({"category": name, "bbox": [x1, y1, x2, y2],
                        "description": f"parked {name} {dist} m away"})
        traffic.append(f"{pos} {name} parked")
    scene = {"time": "Daytime", "weather": weather, "road_type": "Urban Road",
             "road_surface": "Asphalt", "lane": lane, "environment_type": "Urban Road",
             "surroundings": f"street with {len(layout.boxes)} vehicles and "
                             f"{len(layout.skeletons)} pedestrians",
             "traffic": "; ".join(sorted(traffic)) or "no vehicles"}
    return build_structured_caption(scene, objects)


def _rel(path: Path, root: Path) -> str:
    return path.relative_to(root).as_posix()


# ------------------------------------------------------------------- stages

def run_pipeline(cfg: RunConfig, out_dir=None) -> dict:
    """Execute every stage for ``cfg`` and return the run manifest (also written to disk)."""
    errors = cfg.validate()
    if errors:
        raise ConfigError(errors)
    root = Path(out_dir if out_dir is not None else cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    for sub in ("scene", "gt", "grid", "latent", "control", "features", "bev_img",
                "layout_latent", "cond", "model", "sample", "recon", "gen", "caption"):
        (root / sub).mkdir(exist_ok=True)
    (root / "config.txt").write_text(config_text(cfg))
    art: dict[str, list[str]] = {}

    def record(stage_name, path):
        art.setdefault(stage_name, []).append(_rel(Path(path), root))

    spec = cfg.grid_spec()
    pattern = cfg.pattern()
    rig = cfg.rig()
    nf = cfg.n_frames

    with stage("synth"):
        layout, traj = gen_scene(cfg.seed, cfg.scene_params())
        io.write_layout(root / "scene/layout.json", layout, traj)
        io.write_rig(root / "scene/rig.json", rig)
        io.write_pattern(root / "scene/pattern.json", pattern)
        io.write_spec(root / "scene/spec.json", spec)
        for p in ("layout", "rig", "pattern", "spec"):
            record("synth", root / f"scene/{p}.json")
        sensors = [traj.sensor_pose(k) for k in range(nf)]
        gt = []
        for k in range(nf):
            world = cast_rays(layout, sensors[k], pattern)
            cloud = PointCloud(world.transformed(sensors[k].inverse()).points, world.intensity,
                               k * cfg.frame_period)
            io.write_cloud(root / f"gt/frame_{k:02d}.gpc", cloud)
            record("synth", root / f"gt/frame_{k:02d}.gpc")
            gt.append(io.read_cloud(root / f"gt/frame_{k:02d}.gpc", cloud.timestamp))

    codec = BevCodec.identity_like(spec)
    with stage("voxelize"):
        grids = []
        for k in range(nf):
            g = voxelize(gt[k], spec)
            io.write_grid(root / f"grid/frame_{k:02d}.gbv", g.values)
            record("voxelize", root / f"grid/frame_{k:02d}.gbv")
            grids.append(g)

    with stage("encode"):
        latents = []
        for k in range(nf):
            lat = encode_bev(grids[k], codec)
            io.write_grid(root / f"latent/frame_{k:02d}.gbv", lat.values)
            record("encode", root / f"latent/frame_{k:02d}.gbv")
            latents.append(io.read_grid(root / f"latent/frame_{k:02d}.gbv").astype(np.float64))

    with stage("project"):
        maps = {}
        for k in range(nf):
            views = rig_at(rig, traj.poses[k])
            for v in views:
                cm = rasterize_layout(layout, v, frame=k)
                path = root / f"control/f{k:02d}_v{v.view_id}.gbv"
                io.write_grid(path, cm.channels)
                record("project", path)
                maps[k, v.view_id] = cm

    binning = cfg.binning()
    with stage("splat"):
        img_bev = []
        s = cfg.feature_stride
        for k in range(nf):
            views = rig_at(rig, traj.poses[k])
            to_sensor = sensors[k].inverse()
            acc = np.zeros((spec.H, spec.W, 3))
            for v in views:
                small = scaled_view(v, s)
                feats = avg_pool(maps[k, v.view_id].channels, s) if s > 1 else maps[k, v.view_id].channels
                depth = one_hot_depth(true_depth_map(layout, small), binning)
                fmap = ImageFeatureMap(v.view_id, feats, depth)
                path = root / f"features/f{k:02d}_v{v.view_id}.npz"
                np.savez(path, view_id=v.view_id, features=fmap.features, depth_dist=fmap.depth_dist,
                         binning=np.array([binning.d_min, binning.d_max, binning.n_bins]))
                record("splat", path)
                xyz, fe = lift(fmap, small, binning)
                acc += splat(transform_points(to_sensor, xyz), fe, spec)
            io.write_grid(root / f"bev_img/frame_{k:02d}.gbv", acc)
            record("splat", root / f"bev_img/frame_{k:02d}.gbv")
            img_bev.append(io.read_grid(root / f"bev_img/frame_{k:02d}.gbv").astype(np.float64))

    with stage("condition"):
        enc = LayoutEncoder(latent_channels=cfg.layout_channels, seed=cfg.seed)
        bev_maps = np.stack([rasterize_layout_bev(layout, spec, sensors[k]) for k in range(nf)])
        lay = encode_layout(bev_maps, enc)
        conds = []
        pool = spec.H // lay.values.shape[2]
        for k in range(nf):
            io.write_grid(root / f"layout_latent/frame_{k:02d}.gbv", lay.frame(k))
            record("condition", root / f"layout_latent/frame_{k:02d}.gbv")
            c = concat_bev_conditions(img_bev[k], lay.frame(k), pool=pool)
            io.write_grid(root / f"cond/frame_{k:02d}.gbv", c)
            record("condition", root / f"cond/frame_{k:02d}.gbv")
            conds.append(io.read_grid(root / f"cond/frame_{k:02d}.gbv").astype(np.float64))

    with stage("caption"):
        views0 = rig_at(rig, traj.poses[0])
        per_view = [(v.view_id, view_caption(layout, v, cfg.seed, cfg.n_lanes)) for v in views0]
        io.write_json(root / "caption/views.json",
                      {str(vid): c.to_dict() for vid, c in per_view})
        fused = fuse_captions(ViewCaptionSet(per_view))
        (root / "caption/caption.json").write_text(caption_to_json(fused))
        scores = [(vid, score_clip(sharpness_subscores(maps[0, vid].channels))) for vid, _ in per_view]
        kept = filter_clips(scores, cfg.clip_tau)
        io.write_json(root / "caption/clips.json",
                      {"tau": cfg.clip_tau, "kept": kept,
                       "scores": {str(v): sc.s for v, sc in scores}})
        e_cap = caption_embed(fused, 512)
        np.save(root / "caption/e_cap.npy", e_cap)
        for p in ("views.json", "caption.json", "clips.json", "e_cap.npy"):
            record("caption", root / f"caption/{p}")

    with stage("sample"):
        dim = latents[0].shape[-1]
        cdim = conds[0].shape[-1]
        x0 = np.concatenate([l.reshape(-1, dim) for l in latents])
        cc = np.concatenate([c.reshape(-1, cdim) for c in conds])
        model, losses = train_toy_flow(x0, HatFlowModel(dim, cdim), cfg.train_steps,
                                       lr=cfg.flow_lr, seed=cfg.seed, cond=cc, optimizer="adam")
        io.write_params(root / "model/flow.gbv", model.params)
        record("sample", root / "model/flow.gbv")
        record("sample", io.manifest_path(root / "model/flow.gbv"))
        model = HatFlowModel(dim, cdim, params=io.read_params(root / "model/flow.gbv"))
        samples = []
        for k in range(nf):
            z = sample_flow(model, conds[k].shape[0] * conds[k].shape[1], cfg.flow_steps,
                            seed=cfg.seed * 1000 + k, cond=conds[k].reshape(-1, cdim))
            io.write_grid(root / f"sample/frame_{k:02d}.gbv", z.reshape(latents[k].shape))
            record("sample", root / f"sample/frame_{k:02d}.gbv")
            samples.append(io.read_grid(root / f"sample/frame_{k:02d}.gbv").astype(np.float64))

    with stage("reconstruct"):
        recon, gen = [], []
        for k in range(nf):
            for name, lat, out in (("recon", latents[k], recon), ("gen", samples[k], gen)):
                cloud = reconstruct_cloud(BevLatent(lat), spec, Pose.identity(), pattern,
                                          cfg.occ_threshold, codec)
                path = root / f"{name}/frame_{k:02d}.gpc"
                io.write_cloud(path, cloud)
                record("reconstruct", path)
                out.append(io.read_cloud(path, k * cfg.frame_period))

    with stage("eval"):
        rate = 1.0 / cfg.frame_period
        metrics = {"convention": CHAMFER_CONVENTION}
        rt = [_safe_chamfer(crop_cloud(recon[k]), crop_cloud(gt[k])) for k in range(nf)]
        metrics["roundtrip_chamfer_mean"] = float(np.mean(rt))
        metrics["roundtrip_chamfer_max"] = float(np.max(rt))
        metrics["reconstruction"] = _safe_horizons(recon, gt, rate)
        metrics["generation"] = _safe_horizons(gen, gt, rate)
        metrics["flow_final_loss"] = float(losses[-1]) if losses else None
        metrics["clips_kept"] = len(kept)
        io.write_json(root / "metrics.json", metrics)
        record("eval", root / "metrics.json")

    manifest = {"config": asdict(cfg), "artifacts": art, "metrics": metrics}
    io.write_json(root / "manifest.json", manifest)
    return manifest


def _safe_chamfer(a, b) -> float:
    if len(a) == 0 and len(b) == 0:
        return 0.0
    if len(a) == 0 or len(b) == 0:
        return float("inf")
    return chamfer(a, b)


def _safe_horizons(pred, gt, rate) -> dict:
    idx = horizon_indices(rate)
    out = {}
    for h, k in zip((1, 2, 3), idx):
        out[f"chamfer_{h}s"] = _safe_chamfer(crop_cloud(pred[k]), crop_cloud(gt[k]))
    return out
