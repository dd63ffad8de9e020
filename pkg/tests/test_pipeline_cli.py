from __future__ import annotations

import json

import numpy as np
import pytest

from drivesynth import io
from drivesynth import pipeline as pl
from drivesynth.cli import EXIT_INVALID, EXIT_OK, EXIT_STAGE, main
from drivesynth.pipeline import ConfigError, RunConfig, StageError, config_text, run_pipeline, validate_config

SMALL = """
grid_x_min = -12.8
grid_x_max = 12.8
grid_y_min = -12.8
grid_y_max = 12.8
lidar_azimuths = 90
lidar_rings = 8
n_views = 3
train_steps = 20
flow_steps = 10
"""


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    (root / "cfg.txt").write_text(SMALL)
    assert main(["run", "--config", str(root / "cfg.txt"), "--seed", "2", "--out", str(root / "out")]) == EXIT_OK
    return root / "out"


# ------------------------------------------------------------------ config

def test_config_defaults_round_trip():
    cfg, warnings = validate_config("")
    assert cfg == RunConfig() and warnings == []
    assert validate_config(config_text(cfg))[0] == cfg


def test_config_collects_every_error():
    text = "seed = -1\ngrid_cell = 0.3\nn_views = abc\nnonsense line\nclip_tau = 2\n"
    with pytest.raises(ConfigError) as e:
        validate_config(text)
    errs = e.value.errors
    assert len(errs) >= 5
    for frag in ("seed", "grid spec", "n_views", "line 4", "clip_tau"):
        assert any(frag in x for x in errs), frag


def test_config_unknown_keys_warn():
    cfg, warnings = validate_config("seed = 4  # comment\nflux = 2\n")
    assert cfg.seed == 4 and warnings == ["line 2: unknown key 'flux' ignored"]


def test_config_rejects_short_trajectory():
    with pytest.raises(ConfigError, match="3 s horizon"):
        validate_config("n_frames = 6")


def test_stage_errors_name_the_stage(monkeypatch, tmp_path):
    def boom(*a, **k):
        raise RuntimeError("no scene")

    monkeypatch.setattr(pl, "gen_scene", boom)
    with pytest.raises(StageError, match="stage 'synth' failed"):
        run_pipeline(RunConfig(), tmp_path)
    assert main(["run", "--out", str(tmp_path)]) == EXIT_STAGE


# --------------------------------------------------------------- exit codes

def test_invalid_config_exit_code(tmp_path, capsys):
    (tmp_path / "bad.txt").write_text("grid_z_bins = 0\nseed = x\n")
    assert main(["run", "--config", str(tmp_path / "bad.txt")]) == EXIT_INVALID
    err = capsys.readouterr().err
    assert "n_z_bins" in err and "seed" in err


def test_missing_file_is_invalid_input(tmp_path):
    assert main(["voxelize", "--in", str(tmp_path / "nope.gpc"), "--spec", str(tmp_path / "s.json"),
                 "--out", str(tmp_path / "g.gbv")]) == EXIT_INVALID


# ------------------------------------------------------------ full pipeline

def test_run_writes_manifest(run_dir):
    man = json.loads((run_dir / "manifest.json").read_text())
    assert set(man["artifacts"]) == {"synth", "voxelize", "encode", "project", "splat", "condition",
                                     "caption", "sample", "reconstruct", "eval"}
    for paths in man["artifacts"].values():
        assert all((run_dir / p).exists() for p in paths)
    m = man["metrics"]
    assert set(m["reconstruction"]) == {"chamfer_1s", "chamfer_2s", "chamfer_3s"}
    assert np.isfinite(m["roundtrip_chamfer_max"])
    assert man["config"]["seed"] == 2


def test_subcommands_chain(run_dir, tmp_path, capsys):
    scene = run_dir / "scene"
    spec = str(scene / "spec.json")
    assert main(["synth", "--config", str(run_dir.parent / "cfg.txt"), "--seed", "2", "--frames", "7", "--out", str(tmp_path / "s")]) == EXIT_OK
    assert io.read_cloud(tmp_path / "s/frame_00.gpc") == io.read_cloud(run_dir / "gt/frame_00.gpc")

    assert main(["voxelize", "--in", str(run_dir / "gt/frame_00.gpc"), "--spec", spec,
                 "--out", str(tmp_path / "g.gbv")]) == EXIT_OK
    assert np.array_equal(io.read_grid(tmp_path / "g.gbv"), io.read_grid(run_dir / "grid/frame_00.gbv"))

    assert main(["encode", "--grid", str(tmp_path / "g.gbv"), "--spec", spec,
                 "--out", str(tmp_path / "z.gbv")]) == EXIT_OK
    assert np.array_equal(io.read_grid(tmp_path / "z.gbv"), io.read_grid(run_dir / "latent/frame_00.gbv"))

    capsys.readouterr()
    for skip in ("on", "off"):
        assert main(["render", "--grid", str(tmp_path / "g.gbv"), "--spec", spec,
                     "--pattern", str(scene / "pattern.json"), "--skip", skip,
                     "--out", str(tmp_path / f"r_{skip}.gpc")]) == EXIT_OK
    assert io.read_cloud(tmp_path / "r_on.gpc") == io.read_cloud(tmp_path / "r_off.gpc")
    lines = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert lines[0]["hits"] == lines[1]["hits"] > 0

    assert main(["render", "--grid", str(tmp_path / "z.gbv"), "--spec", spec,
                 "--pattern", str(scene / "pattern.json"), "--out", str(tmp_path / "x.gpc")]) == EXIT_INVALID

    assert main(["project", "--scene", str(scene / "layout.json"), "--rig", str(scene / "rig.json"),
                 "--frame", "3", "--out", str(tmp_path / "c")]) == EXIT_OK
    assert np.array_equal(io.read_grid(tmp_path / "c/f03_v1.gbv"), io.read_grid(run_dir / "control/f03_v1.gbv"))
    assert main(["project", "--scene", str(scene / "layout.json"), "--rig", str(scene / "rig.json"),
                 "--frame", "99", "--out", str(tmp_path / "c")]) == EXIT_INVALID


def test_splat_matches_pipeline_in_camera_frame(run_dir, tmp_path):
    feats = sorted(str(p) for p in (run_dir / "features").glob("f00_v*.npz"))
    # the pipeline places the rig at the frame-0 pose, which is the identity pose at the sensor height
    assert main(["splat", "--features", *feats, "--calib", str(run_dir / "scene/rig.json"),
                 "--spec", str(run_dir / "scene/spec.json"), "--out", str(tmp_path / "b.gbv")]) == EXIT_OK
    got = io.read_grid(tmp_path / "b.gbv")
    assert got.shape[:2] == (64, 64) and got.sum() > 0


def test_sample_and_eval_commands(run_dir, tmp_path, capsys):
    assert main(["sample", "--model", str(run_dir / "model/flow.gbv"), "--cond", str(run_dir / "cond"),
                 "--steps", "10", "--seed", "2", "--out", str(tmp_path / "smp")]) == EXIT_OK
    for k in range(7):
        assert np.array_equal(io.read_grid(tmp_path / f"smp/frame_{k:02d}.gbv"),
                              io.read_grid(run_dir / f"sample/frame_{k:02d}.gbv"))
    capsys.readouterr()
    assert main(["eval", "chamfer", "--pred", str(run_dir / "recon"), "--gt", str(run_dir / "gt"),
                 "--rate", "2"]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    man = json.loads((run_dir / "manifest.json").read_text())
    assert rep["chamfer_2s"] == man["metrics"]["reconstruction"]["chamfer_2s"]
    assert main(["eval", "chamfer", "--pred", str(run_dir / "recon"), "--gt", str(run_dir / "gt"),
                 "--rate", "1.5"]) == EXIT_INVALID
    assert main(["eval", "chamfer", "--pred", str(run_dir / "recon"), "--gt", str(run_dir / "gt"),
                 "--rate", "2", "--volume", "1,2,3"]) == EXIT_INVALID


def test_caption_commands(run_dir, tmp_path, capsys):
    clips = {"clips": [{"id": "a", "q": [0.9, 0.9, 0.9]}, {"id": "b", "q": [0.1, 0.2, 0.3]}]}
    io.write_json(tmp_path / "clips.json", clips)
    capsys.readouterr()
    assert main(["caption", "score", "--in", str(tmp_path / "clips.json"), "--tau", "0.5"]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["kept"] == ["a"] and out["scores"]["b"] == pytest.approx(0.2)

    assert main(["caption", "fuse", "--in", str(run_dir / "caption/views.json"),
                 "--out", str(tmp_path / "fused.json")]) == EXIT_OK
    assert (tmp_path / "fused.json").read_text() == (run_dir / "caption/caption.json").read_text()

    bad = json.loads((run_dir / "caption/views.json").read_text())
    bad["0"]["scene"]["weather"] = "Hail"
    io.write_json(tmp_path / "bad.json", bad)
    assert main(["caption", "fuse", "--in", str(tmp_path / "bad.json")]) == EXIT_INVALID
    assert "weather" in capsys.readouterr().err
