"""Layout projection into per-view control maps and the layout encoder.

Channels are (lane, box_mask, skeleton). Camera-frame coordinates are snapped
to a 2^-20 m lattice before projection, so a rigid motion applied to both the
layout and the camera reproduces the same pixels exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tape, Tensor
from . import autodiff as ad
from .geometry import CameraView, Pose, transform_points
from .layers import StridedCodec
from .scene import LIMBS, N_JOINTS, SceneLayout

CHANNELS = ("lane", "box_mask", "skeleton")
NEAR_PLANE = 0.1
_SNAP = 2.0 ** 20

# corner index pairs differing in one bit, i.e. the 12 box edges
_BOX_EDGES = tuple((i, i | (1 << a)) for i in range(8) for a in range(3) if not i & (1 << a))


@dataclass(frozen=True)
class ControlMap:
    view_id: int
    channels: np.ndarray  # (H, W, 3)
    frame: int = 0

    def channel(self, name: str) -> np.ndarray:
        return self.channels[..., CHANNELS.index(name)]


@dataclass(frozen=True)
class LayoutLatent:
    values: np.ndarray  # (f, c, h, w)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 4:
            raise ValueError(f"layout latent must be (f, c, h, w), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("layout latent has non-finite values")
        object.__setattr__(self, "values", v)

    def frame(self, k: int) -> np.ndarray:
        """Channel-last (h, w, c) slice of frame ``k``."""
        return np.transpose(self.values[k], (1, 2, 0))


# ------------------------------------------------------------ raster helpers

def _clip_segment_2d(p0, p1, lo_u, hi_u, lo_v, hi_v):
    """Liang-Barsky clip; returns the clipped endpoints or None."""
    du = p1[0] - p0[0]
    dv = p1[1] - p0[1]
    t0, t1 = 0.0, 1.0
    for p, q in ((-du, p0[0] - lo_u), (du, hi_u - p0[0]), (-dv, p0[1] - lo_v), (dv, hi_v - p0[1])):
        if p == 0:
            if q < 0:
                return None
            continue
        r = q / p
        if p < 0:
            t0 = max(t0, r)
        else:
            t1 = min(t1, r)
        if t0 > t1:
            return None
    return ((p0[0] + t0 * du, p0[1] + t0 * dv), (p0[0] + t1 * du, p0[1] + t1 * dv))


def draw_segment(canvas: np.ndarray, p0, p1) -> None:
    """Anti-aliased 1-px line: coverage 1 - distance from pixel center, max-combined."""
    h, w = canvas.shape
    seg = _clip_segment_2d(p0, p1, -2.0, w + 2.0, -2.0, h + 2.0)
    if seg is None:
        return
    (u0, v0), (u1, v1) = seg
    j0 = max(int(np.floor(min(u0, u1) - 1.5)), 0)
    j1 = min(int(np.floor(max(u0, u1) + 1.5)) + 1, w)
    i0 = max(int(np.floor(min(v0, v1) - 1.5)), 0)
    i1 = min(int(np.floor(max(v0, v1) + 1.5)) + 1, h)
    if j0 >= j1 or i0 >= i1:
        return
    uu, vv = np.meshgrid(np.arange(j0, j1) + 0.5, np.arange(i0, i1) + 0.5)
    du, dv = u1 - u0, v1 - v0
    ll = du * du + dv * dv
    if ll > 0:
        t = np.clip(((uu - u0) * du + (vv - v0) * dv) / ll, 0.0, 1.0)
    else:
        t = np.zeros_like(uu)
    dist = np.hypot(uu - (u0 + t * du), vv - (v0 + t * dv))
    cov = np.clip(1.0 - dist, 0.0, 1.0)
    np.maximum(canvas[i0:i1, j0:j1], cov, out=canvas[i0:i1, j0:j1])


def convex_hull(pts: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; counter-clockwise hull without repeated end point."""
    p = np.unique(np.asarray(pts, dtype=np.float64).reshape(-1, 2), axis=0)
    if len(p) < 3:
        return p

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for q in p:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], q) <= 0:
            lower.pop()
        lower.append(q)
    for q in p[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], q) <= 0:
            upper.pop()
        upper.append(q)
    return np.array(lower[:-1] + upper[:-1])


def fill_convex(canvas: np.ndarray, pts) -> None:
    """Set pixels whose centers lie inside (or on) the convex hull of ``pts`` to 1."""
    hull = convex_hull(pts)
    if len(hull) < 3:
        return
    h, w = canvas.shape
    j0 = max(int(np.floor(hull[:, 0].min())), 0)
    j1 = min(int(np.ceil(hull[:, 0].max())) + 1, w)
    i0 = max(int(np.floor(hull[:, 1].min())), 0)
    i1 = min(int(np.ceil(hull[:, 1].max())) + 1, h)
    if j0 >= j1 or i0 >= i1:
        return
    uu, vv = np.meshgrid(np.arange(j0, j1) + 0.5, np.arange(i0, i1) + 0.5)
    inside = np.ones(uu.shape, dtype=bool)
    for a, b in zip(hull, np.roll(hull, -1, axis=0)):
        inside &= (b[0] - a[0]) * (vv - a[1]) - (b[1] - a[1]) * (uu - a[0]) >= 0
    canvas[i0:i1, j0:j1][inside] = 1.0


def stamp(canvas: np.ndarray, u: float, v: float, radius: int = 1) -> None:
    """(2r+1)^2 square of ones around the pixel containing (u, v), clipped."""
    h, w = canvas.shape
    j, i = int(np.floor(u)), int(np.floor(v))
    i0, i1 = max(i - radius, 0), min(i + radius + 1, h)
    j0, j1 = max(j - radius, 0), min(j + radius + 1, w)
    if i0 < i1 and j0 < j1:
        canvas[i0:i1, j0:j1] = 1.0


# ----------------------------------------------------------- camera raster

def _to_camera(view: CameraView, pts) -> np.ndarray:
    pc = transform_points(view.extrinsics, pts)
    return np.round(pc * _SNAP) / _SNAP


def _pixel(view: CameraView, pc: np.ndarray) -> np.ndarray:
    k = view.intrinsics
    return np.stack([k.fx * pc[:, 0] / pc[:, 2] + k.cx, k.fy * pc[:, 1] / pc[:, 2] + k.cy], axis=1)


def _near_clip(a: np.ndarray, b: np.ndarray):
    za, zb = a[2], b[2]
    if za < NEAR_PLANE and zb < NEAR_PLANE:
        return None
    if za < NEAR_PLANE:
        a = a + (b - a) * (NEAR_PLANE - za) / (zb - za)
    elif zb < NEAR_PLANE:
        b = b + (a - b) * (NEAR_PLANE - zb) / (za - zb)
    return a, b


def _draw_polyline_cam(canvas, view, pc: np.ndarray) -> None:
    for a, b in zip(pc[:-1], pc[1:]):
        seg = _near_clip(a, b)
        if seg is None:
            continue
        uv = _pixel(view, np.array(seg))
        draw_segment(canvas, uv[0], uv[1])


def _box_polytope(pc: np.ndarray) -> np.ndarray:
    """Vertices of the box (camera frame corners) clipped to z >= near plane."""
    keep = [c for c in pc if c[2] >= NEAR_PLANE]
    for i, j in _BOX_EDGES:
        a, b = pc[i], pc[j]
        if (a[2] < NEAR_PLANE) != (b[2] < NEAR_PLANE):
            keep.append(a + (b - a) * (NEAR_PLANE - a[2]) / (b[2] - a[2]))
    return np.array(keep).reshape(-1, 3)


def pose_keypoints_channel(skeletons, view: CameraView) -> np.ndarray:
    """Visible joints stamped 3x3 plus limbs joining visible joint pairs."""
    k = view.intrinsics
    canvas = np.zeros((k.height, k.width))
    for s in skeletons:
        if len(s.joints) != N_JOINTS:
            raise ValueError(f"skeleton has {len(s.joints)} joints, topology needs {N_JOINTS}")
        pc = _to_camera(view, s.joints)
        for a, b in LIMBS:
            if s.visible[a] and s.visible[b]:
                _draw_polyline_cam(canvas, view, pc[[a, b]])
        front = s.visible & (pc[:, 2] >= NEAR_PLANE)
        if front.any():
            for u, v in _pixel(view, pc[front]):
                stamp(canvas, u, v)
    return canvas


def rasterize_layout(layout: SceneLayout, view: CameraView, frame: int = 0) -> ControlMap:
    k = view.intrinsics
    out = np.zeros((k.height, k.width, len(CHANNELS)))
    lane = np.zeros((k.height, k.width))
    for poly in layout.lanes:
        _draw_polyline_cam(lane, view, _to_camera(view, poly))
    box = np.zeros((k.height, k.width))
    for b in layout.boxes:
        poly = _box_polytope(_to_camera(view, b.corners()))
        if len(poly) >= 3:
            fill_convex(box, _pixel(view, poly))
    out[..., 0] = lane
    out[..., 1] = box
    out[..., 2] = pose_keypoints_channel(layout.skeletons, view)
    return ControlMap(view.view_id, out, frame)


# -------------------------------------------------------------- BEV raster

def rasterize_layout_bev(layout: SceneLayout, spec, sensor: Pose) -> np.ndarray:
    """Top-down (H, W, 3) raster in grid index space (row = x cell, column = y cell)."""
    to_sensor = sensor.inverse()
    out = np.zeros((spec.H, spec.W, len(CHANNELS)))

    def grid_uv(pts):
        p = np.round(transform_points(to_sensor, pts) * _SNAP) / _SNAP
        return np.stack([(p[:, 1] - spec.y_min) / spec.cell_size_xy,
                         (p[:, 0] - spec.x_min) / spec.cell_size_xy], axis=1)

    for poly in layout.lanes:
        uv = grid_uv(poly)
        for a, b in zip(uv[:-1], uv[1:]):
            draw_segment(out[..., 0], a, b)
    for b in layout.boxes:
        fill_convex(out[..., 1], grid_uv(b.corners()))
    for s in layout.skeletons:
        uv = grid_uv(s.joints)
        for a, c in LIMBS:
            if s.visible[a] and s.visible[c]:
                draw_segment(out[..., 2], uv[a], uv[c])
        for u, v in uv[s.visible]:
            stamp(out[..., 2], u, v)
    return out


# ----------------------------------------------------------------- encoder

class LayoutEncoder(StridedCodec):
    """Per-frame strided encoder: (f, H, W, 3) -> (f, H/8, W/8, c)."""

    def __init__(self, latent_channels: int = 4, hidden: int = 16, params: dict | None = None,
                 seed: int = 0, zero_bias: bool = False, in_channels: int = len(CHANNELS)):
        super().__init__(in_channels, latent_channels, in_channels, hidden=hidden,
                         params=params, seed=seed, zero_bias=zero_bias)

    def encode_frames_t(self, x: Tensor, p: dict) -> Tensor:
        z = self.encode_t(x, p)  # (f, h, w, c)
        return ad.permute(z, (0, 3, 1, 2))


def _stack_maps(maps) -> np.ndarray:
    if isinstance(maps, np.ndarray):
        arr = maps if maps.ndim == 4 else maps[None]
        return np.asarray(arr, dtype=np.float64)
    maps = list(maps)
    if not maps:
        raise ValueError("encode_layout needs at least one frame")
    shapes = {m.channels.shape for m in maps}
    if len(shapes) != 1:
        raise ShapeError(f"inconsistent control map shapes across frames: {sorted(shapes)}")
    return np.stack([m.channels for m in maps]).astype(np.float64)


def encode_layout(maps, encoder: LayoutEncoder) -> LayoutLatent:
    x = _stack_maps(maps)
    tape = Tape(record=False)
    z = encoder.encode_frames_t(tape.constant(x), encoder.bind(tape, trainable=False))
    return LayoutLatent(z.value)
