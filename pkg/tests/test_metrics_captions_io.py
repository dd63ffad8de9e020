from __future__ import annotations

import json

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from drivesynth import io
from drivesynth.bev import BevGridSpec
from drivesynth.datacrafter import (SCENE_OPTIONS, CaptionError, CaptionObject, ViewCaptionSet,
                                    build_structured_caption, caption_embed, caption_from_json, caption_to_json,
                                    caption_tokens, filter_clips, fuse_captions, score_clip, sharpness_subscores)
from drivesynth.geometry import PointCloud
from drivesynth.metrics import (CropVolume, EmptyCloudError, GaussianSummary, chamfer, chamfer_horizons,
                                crop_cloud, frechet_gaussian, horizon_indices, nn_dist_brute)
from drivesynth.scene import LidarPattern, gen_rig, gen_scene

SCENE = {"time": "Daytime", "weather": "Sunny", "road_type": "Urban Road", "road_surface": "Asphalt",
         "lane": "Multi-Lane", "environment_type": "Intersection", "surroundings": "shops",
         "traffic": "light"}


# ----------------------------------------------------------------- metrics

def test_chamfer_hand_value():
    a = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    b = np.array([[0.0, 0, 0]])
    # a->b: (0 + 1) / 2, b->a: 0; half-sum = 0.25
    assert chamfer(a, b) == 0.25 == chamfer(a, b, accelerated=False)
    with pytest.raises(EmptyCloudError):
        chamfer(a, np.zeros((0, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 300), st.integers(1, 300))
def test_nn_tree_equals_brute(seed, n, m):
    rng = np.random.default_rng(seed)
    a = np.round(rng.normal(size=(n, 3)), 1)
    b = np.round(rng.normal(size=(m, 3)), 1)
    assert chamfer(a, b) == chamfer(a, b, accelerated=False)
    assert chamfer(a, b) == chamfer(b, a)


def test_nn_brute_chunking_is_invisible():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(50, 3)), rng.normal(size=(40, 3))
    assert np.array_equal(nn_dist_brute(a, b, chunk=7), nn_dist_brute(a, b))


def test_crop_volume_is_closed():
    vol = CropVolume()
    pts = [[51.2, -51.2, 5.0], [51.3, 0, 0], [0, 0, -3.0], [0, 0, -3.1]]
    assert list(vol.contains(pts)) == [True, False, True, False]
    # float32 storage rounds 51.2 up to 51.2000008, just outside the closed bound
    assert len(crop_cloud(PointCloud(pts))) == 1
    assert len(crop_cloud(PointCloud([[51.0, -51.0, 5.0], [0, 0, -3.0]]))) == 2
    with pytest.raises(ValueError):
        CropVolume(x_min=1.0, x_max=0.0)


def test_horizons():
    assert horizon_indices(2.0) == [2, 4, 6]
    with pytest.raises(ValueError):
        horizon_indices(1.5)
    clouds = [PointCloud([[k, 0.0, 0.0]]) for k in range(7)]
    ref = [PointCloud([[0.0, 0.0, 0.0]])] * 7
    assert chamfer_horizons(clouds, ref, 2.0) == {"chamfer_1s": 2.0, "chamfer_2s": 4.0, "chamfer_3s": 6.0}
    with pytest.raises(ValueError):
        chamfer_horizons(clouds[:5], ref, 2.0)


def test_frechet_1d_closed_form():
    g1 = GaussianSummary([1.0], [[4.0]])
    g2 = GaussianSummary([3.0], [[1.0]])
    assert frechet_gaussian(g1, g2) == pytest.approx(4.0 + (2.0 - 1.0) ** 2)


def test_frechet_matches_scipy_sqrtm():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a, b = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
        s1, s2 = a @ a.T, b @ b.T
        m1, m2 = rng.normal(size=5), rng.normal(size=5)
        ref = np.sum((m1 - m2) ** 2) + np.trace(s1 + s2 - 2 * np.real(scipy.linalg.sqrtm(s1 @ s2)))
        assert frechet_gaussian(GaussianSummary(m1, s1), GaussianSummary(m2, s2)) == pytest.approx(ref, rel=1e-7)


def test_frechet_identity_and_validation():
    g = GaussianSummary.fit(np.random.default_rng(0).normal(size=(500, 3)))
    assert abs(frechet_gaussian(g, g)) < 1e-9
    with pytest.raises(ValueError):
        GaussianSummary([0.0, 0.0], [[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(ValueError):
        GaussianSummary([0.0, 0.0], [[1.0, 0.0], [0.0, -1.0]])


# ---------------------------------------------------------------- captions

def test_score_and_filter():
    s = score_clip((0.2, 0.4, 0.6))
    assert s.s == pytest.approx(0.4, abs=1e-12)
    with pytest.raises(ValueError):
        score_clip((0.2, 0.4, 1.2))
    with pytest.raises(ValueError):
        score_clip((0.2, 0.4, 0.6), (0.5, 0.5, 0.5))
    assert filter_clips([("a", s), ("b", 0.39), ("c", 0.4)], 0.4) == ["a", "c"]
    with pytest.raises(ValueError):
        filter_clips([], 1.5)


def test_sharpness_subscores_range():
    flat = sharpness_subscores(np.zeros((8, 8)))
    assert flat == (0.0, 0.0, 0.0)
    q = sharpness_subscores(np.random.default_rng(0).random((8, 8, 3)))
    assert all(0.0 <= x <= 1.0 for x in q)


def test_caption_validation_names_field():
    with pytest.raises(CaptionError, match="weather"):
        build_structured_caption(dict(SCENE, weather="Foggy"))
    with pytest.raises(CaptionError, match="missing"):
        build_structured_caption({k: v for k, v in SCENE.items() if k != "lane"})
    with pytest.raises(CaptionError, match="unknown"):
        build_structured_caption(dict(SCENE, mood="calm"))
    with pytest.raises(CaptionError, match=r"objects\[0\].bbox: x1"):
        build_structured_caption(SCENE, [("car", (5, 0, 5, 3), "red")])
    with pytest.raises(CaptionError, match="y1"):
        build_structured_caption(SCENE, [{"category": "car", "bbox": [0, 4, 2, 3], "description": ""}])


def test_caption_json_roundtrip():
    c = build_structured_caption(SCENE, [CaptionObject("car", (1, 2, 3, 4), "red sedan")])
    text = caption_to_json(c)
    assert json.loads(text)["objects"][0]["bbox"] == [1.0, 2.0, 3.0, 4.0]
    assert caption_from_json(text) == c
    with pytest.raises(CaptionError):
        caption_from_json("[]")


def test_every_enum_option_accepted():
    for name, options in SCENE_OPTIONS.items():
        for opt in options or ():
            build_structured_caption(dict(SCENE, **{name: opt}))


def test_fusion_majority_and_ties():
    def cap(weather, objs=()):
        return build_structured_caption(dict(SCENE, weather=weather), objs)

    views = ViewCaptionSet({2: cap("Rain", [("car", (0, 0, 1, 1), "a")]), 0: cap("Sunny"),
                            1: cap("Rain", [("car", (5, 5, 6, 6), "a"), ("cone", (0, 0, 1, 1), "b")])})
    fused = fuse_captions(views)
    assert fused.scene["weather"] == "Rain"
    assert [(o.category, o.bbox) for o in fused.objects] == [("car", (5.0, 5.0, 6.0, 6.0)), ("cone", (0, 0, 1, 1))]
    tie = fuse_captions(ViewCaptionSet({1: cap("Snow"), 0: cap("Cloudy")}))
    assert tie.scene["weather"] == "Cloudy"  # lowest view id wins the tie
    with pytest.raises(CaptionError):
        ViewCaptionSet([(0, cap("Snow")), (0, cap("Rain"))])
    with pytest.raises(CaptionError):
        fuse_captions(ViewCaptionSet({}))


def test_caption_embedding():
    c = build_structured_caption(SCENE, [("car", (0, 0, 40, 40), "red sedan")])
    e = caption_embed(c)
    assert e.shape == (512,) and np.linalg.norm(e) == pytest.approx(1.0)
    assert np.array_equal(e, caption_embed(c))
    assert "scene.weather=sunny" in caption_tokens(c)
    other = build_structured_caption(dict(SCENE, weather="Snow"))
    assert not np.array_equal(e, caption_embed(other))
    with pytest.raises(ValueError):
        caption_embed(c, dim=4)


# ---------------------------------------------------------------------- io

def test_cloud_roundtrip(tmp_path):
    c = PointCloud(np.random.default_rng(0).normal(size=(10, 3)), np.linspace(0, 1, 10))
    io.write_cloud(tmp_path / "c.gpc", c)
    assert io.read_cloud(tmp_path / "c.gpc") == c
    data = io.cloud_to_bytes(c)
    assert data[:4] == b"GPC1" and len(data) == 8 + 160
    with pytest.raises(io.FormatError):
        io.cloud_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(io.FormatError):
        io.cloud_from_bytes(data[:-4])


def test_grid_roundtrip(tmp_path):
    g = np.random.default_rng(0).random((4, 6, 3)).astype(np.float32)
    io.write_grid(tmp_path / "g.gbv", g)
    assert np.array_equal(io.read_grid(tmp_path / "g.gbv"), g)
    assert io.grid_from_bytes(io.grid_to_bytes(np.ones((2, 2)))).shape == (2, 2, 1)
    with pytest.raises(io.FormatError):
        io.grid_to_bytes(np.ones(3))
    with pytest.raises(io.FormatError):
        io.grid_from_bytes(io.grid_to_bytes(g)[:-1])


def test_params_roundtrip(tmp_path):
    p = {"b": np.arange(3.0), "a": np.ones((2, 2)) * 0.5, "s": np.array(2.0)}
    io.write_params(tmp_path / "m.gbv", p)
    assert io.manifest_path(tmp_path / "m.gbv").exists()
    back = io.read_params(tmp_path / "m.gbv")
    assert set(back) == set(p) and all(np.array_equal(back[k], p[k]) for k in p)


def test_json_roundtrips(tmp_path):
    rig = gen_rig(3)
    io.write_rig(tmp_path / "rig.json", rig)
    back = io.read_rig(tmp_path / "rig.json")
    assert [v.view_id for v in back] == [0, 1, 2]
    assert all(a.extrinsics == b.extrinsics and a.intrinsics == b.intrinsics for a, b in zip(rig, back))
    d = io.rig_to_dict(rig)
    d["views"].append(d["views"][0])
    with pytest.raises(io.FormatError):
        io.rig_from_dict(d)
    layout, traj = gen_scene(4)
    io.write_layout(tmp_path / "l.json", layout, traj)
    l2, t2 = io.read_layout(tmp_path / "l.json")
    assert l2.boxes == layout.boxes and len(t2) == len(traj)
    assert all(np.array_equal(a, b) for a, b in zip(l2.lanes, layout.lanes))
    io.write_spec(tmp_path / "s.json", BevGridSpec())
    assert io.read_spec(tmp_path / "s.json") == BevGridSpec()
    io.write_pattern(tmp_path / "p.json", LidarPattern())
    assert io.read_pattern(tmp_path / "p.json") == LidarPattern()
