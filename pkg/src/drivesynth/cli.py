"""Command-line front end. Exit codes: 0 ok, 1 validation error, 2 stage failure."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .bev import BevCodec, BevFeatureGrid, encode_bev, render_cloud, voxelize
from .datacrafter import (CaptionError, ViewCaptionSet, build_structured_caption, caption_to_json,
                          filter_clips, fuse_captions, score_clip)
from .flow import HatFlowModel, sample_flow
from .geometry import Pose
from .layout import rasterize_layout
from .liftsplat import DepthBinning, ImageFeatureMap, lift, splat
from .metrics import CHAMFER_CONVENTION, CropVolume, chamfer_horizons
from .pipeline import ConfigError, RunConfig, StageError, run_pipeline, validate_config
from .scene import gen_scene

EXIT_OK, EXIT_INVALID, EXIT_STAGE = 0, 1, 2

log = logging.getLogger("drivesynth")


def _load_config(args) -> RunConfig:
    text = Path(args.config).read_text() if args.config else ""
    cfg, warnings = validate_config(text)
    for w in warnings:
        log.warning(w)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "frames", None) is not None:
        over["n_frames"] = args.frames
    if over:
        cfg, _ = validate_config(text + "".join(f"\n{k} = {v}" for k, v in over.items()))
    return cfg


def _out(args, default: str) -> Path:
    return Path(args.out if args.out else default)


# ----------------------------------------------------------------- commands

def cmd_synth(args):
    cfg = _load_config(args)
    out = _out(args, cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    layout, traj = gen_scene(cfg.seed, cfg.scene_params())
    io.write_layout(out / "layout.json", layout, traj)
    io.write_rig(out / "rig.json", cfg.rig())
    io.write_pattern(out / "pattern.json", cfg.pattern())
    io.write_spec(out / "spec.json", cfg.grid_spec())
    from .scene import cast_rays

    for k in range(len(traj)):
        sensor = traj.sensor_pose(k)
        world = cast_rays(layout, sensor, cfg.pattern())
        io.write_cloud(out / f"frame_{k:02d}.gpc", world.transformed(sensor.inverse()))
    print(out)


def cmd_voxelize(args):
    spec = io.read_spec(args.spec)
    g = voxelize(io.read_cloud(args.input), spec)
    io.write_grid(args.out, g.values)


def cmd_encode(args):
    spec = io.read_spec(args.spec)
    values = io.read_grid(args.grid)
    if values.shape != (spec.H, spec.W, spec.channels):
        raise ValueError(f"grid {values.shape} does not match spec {(spec.H, spec.W, spec.channels)}")
    codec = (BevCodec(spec, params=io.read_params(args.model)) if args.model
             else BevCodec.identity_like(spec))
    io.write_grid(args.out, encode_bev(BevFeatureGrid(spec, values), codec).values)


def cmd_render(args):
    spec = io.read_spec(args.spec)
    values = io.read_grid(args.grid).astype(np.float64)
    if values.shape[:2] != (spec.H, spec.W):
        raise ValueError(f"grid {values.shape} does not match spec {(spec.H, spec.W)}")
    if values.shape[2] == 4 and spec.H // values.shape[0] == 1:
        raise ValueError("render expects an occupancy or feature grid, not a latent")
    occ = np.clip(values[..., : spec.n_z_bins], 0.0, 1.0)
    cloud, res = render_cloud(occ, spec, Pose.identity(), io.read_pattern(args.pattern),
                              skip=args.skip == "on")
    io.write_cloud(args.out, cloud)
    print(json.dumps({"rays": int(len(res.depth)), "hits": int(res.hit.sum()),
                      "cells_visited": int(res.visited.sum()), "skip": args.skip}))


def cmd_project(args):
    layout, traj = io.read_layout(args.scene)
    rig = io.read_rig(args.rig)
    if traj is not None:
        from .scene import rig_at

        if not 0 <= args.frame < len(traj):
            raise ValueError(f"frame {args.frame} outside trajectory of {len(traj)} frames")
        rig = rig_at(rig, traj.poses[args.frame])
    out = _out(args, "control")
    out.mkdir(parents=True, exist_ok=True)
    for v in rig:
        cm = rasterize_layout(layout, v, frame=args.frame)
        io.write_grid(out / f"f{args.frame:02d}_v{v.view_id}.gbv", cm.channels)


def cmd_splat(args):
    spec = io.read_spec(args.spec)
    views = {v.view_id: v for v in io.read_rig(args.calib)}
    acc = None
    for path in args.features:
        d = np.load(path)
        vid = int(d["view_id"])
        b = d["binning"]
        binning = DepthBinning(float(b[0]), float(b[1]), int(b[2]))
        fmap = ImageFeatureMap(vid, d["features"], d["depth_dist"])
        view = views[vid]
        k = view.intrinsics
        h, w = fmap.features.shape[:2]
        if (h, w) != (k.height, k.width):
            from .pipeline import scaled_view

            stride = k.width // w
            view = scaled_view(view, stride)
        xyz, fe = lift(fmap, view, binning)
        grid = splat(xyz, fe, spec)
        acc = grid if acc is None else acc + grid
    io.write_grid(args.out, acc)


def cmd_sample(args):
    params = io.read_params(args.model)
    cond_files = sorted(Path(args.cond).glob("*.gbv"))
    if not cond_files:
        raise ValueError(f"no conditioning grids in {args.cond}")
    theta = params["theta"]
    out = _out(args, "sample")
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else 0
    for k, f in enumerate(cond_files):
        c = io.read_grid(f).astype(np.float64)
        cdim = c.shape[-1]
        dim = theta.shape[1]
        n_knots = theta.shape[0] // (dim + cdim + 1)
        if n_knots * (dim + cdim + 1) != theta.shape[0]:
            raise ValueError(f"model parameters {theta.shape} do not fit {cdim} conditioning channels")
        model = HatFlowModel(dim, cdim, n_knots, params)
        z = sample_flow(model, c.shape[0] * c.shape[1], args.steps, seed=seed * 1000 + k,
                        cond=c.reshape(-1, cdim))
        io.write_grid(out / f.name, z.reshape(c.shape[0], c.shape[1], dim))


def cmd_caption(args):
    data = io.read_json(args.input)
    if args.action == "score":
        clips = data["clips"] if isinstance(data, dict) else data
        lam = tuple(data.get("lambdas", (1 / 3, 1 / 3, 1 / 3))) if isinstance(data, dict) else (1 / 3, 1 / 3, 1 / 3)
        scored = [(c["id"], score_clip(c["q"], lam)) for c in clips]
        kept = filter_clips(scored, args.tau)
        print(json.dumps({"scores": {str(i): s.s for i, s in scored}, "kept": kept}))
    else:
        items = data.items() if isinstance(data, dict) else ((v["view_id"], v) for v in data)
        views = [(int(vid), build_structured_caption(c["scene"], c.get("objects", [])))
                 for vid, c in items]
        fused = fuse_captions(ViewCaptionSet(views))
        text = caption_to_json(fused)
        if args.out:
            Path(args.out).write_text(text)
        else:
            print(text)


def _volume(text: str) -> CropVolume:
    if text == "default":
        return CropVolume()
    vals = [float(x) for x in text.split(",")]
    if len(vals) != 6:
        raise ValueError("volume must be 'default' or x0,x1,y0,y1,z0,z1")
    return CropVolume(*vals)


def cmd_eval(args):
    pred = [io.read_cloud(p) for p in sorted(Path(args.pred).glob("*.gpc"))]
    gt = [io.read_cloud(p) for p in sorted(Path(args.gt).glob("*.gpc"))]
    report = chamfer_horizons(pred, gt, args.rate, _volume(args.volume))
    report["convention"] = CHAMFER_CONVENTION
    text = json.dumps(report, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    print(text)


def cmd_run(args):
    cfg = _load_config(args)
    out = _out(args, cfg.out_dir)
    manifest = run_pipeline(cfg, out)
    print(json.dumps(manifest["metrics"], indent=1))


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--config", default=None, help="key = value config file")
    common.add_argument("--out", default=None, help="output file or directory")
    common.add_argument("--verbose", action="store_true", help="log stage progress")

    p = argparse.ArgumentParser(prog="drivesynth", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a scene and its LiDAR frames")
    s.add_argument("--frames", type=int, default=None)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("voxelize", parents=[common], help="GPC1 cloud -> GBV1 BEV grid")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--spec", required=True)
    s.set_defaults(func=cmd_voxelize)

    s = sub.add_parser("encode", parents=[common], help="BEV grid -> 8x latent")
    s.add_argument("--grid", required=True)
    s.add_argument("--spec", required=True)
    s.add_argument("--model", default=None, help="codec parameters (default: identity-like)")
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("render", parents=[common], help="ray-march an occupancy grid")
    s.add_argument("--grid", required=True)
    s.add_argument("--spec", required=True)
    s.add_argument("--pattern", required=True)
    s.add_argument("--skip", choices=("on", "off"), default="on")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("project", parents=[common], help="layout -> per-view control maps")
    s.add_argument("--scene", required=True)
    s.add_argument("--rig", required=True)
    s.add_argument("--frame", type=int, default=0)
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("splat", parents=[common], help="lift-splat image features into BEV")
    s.add_argument("--features", required=True, nargs="+")
    s.add_argument("--calib", required=True)
    s.add_argument("--spec", required=True)
    s.set_defaults(func=cmd_splat)

    s = sub.add_parser("sample", parents=[common], help="Euler-sample latents from a flow model")
    s.add_argument("--model", required=True)
    s.add_argument("--steps", type=int, default=100)
    s.add_argument("--cond", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("caption", parents=[common], help="clip scoring and caption fusion")
    s.add_argument("action", choices=("score", "fuse"))
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--tau", type=float, default=0.5)
    s.set_defaults(func=cmd_caption)

    s = sub.add_parser("eval", parents=[common], help="Chamfer at 1/2/3 s horizons")
    s.add_argument("metric", choices=("chamfer",))
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--rate", type=float, required=True)
    s.add_argument("--volume", default="default")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("run", parents=[common], help="full pipeline from a config file")
    s.set_defaults(func=cmd_run)
    return p


_VALIDATION = (ConfigError, CaptionError, ValueError, KeyError, FileNotFoundError, json.JSONDecodeError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STAGE
    except _VALIDATION as e:
        msg = "\n  ".join(e.errors) if isinstance(e, ConfigError) else str(e)
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001
        print(f"error: {args.command} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
