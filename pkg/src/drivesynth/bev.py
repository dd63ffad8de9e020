"""BEV point-cloud autoencoder: voxelize, encode to an 8x latent, decode to
occupancy, render, filter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .geometry import PointCloud, Pose
from .layers import StridedCodec
from .render import MISS_THRESHOLD, RayBatch, RenderResult, render_rays
from .scene import LIDAR_HEIGHT, LidarPattern

LATENT_CHANNELS = 4
BCE_EPS = 1e-7


def _is_multiple(span: float, step: float) -> bool:
    q = span / step
    return abs(q - round(q)) < 1e-9 * max(1.0, abs(q))


@dataclass(frozen=True)
class BevGridSpec:
    x_min: float = -51.2
    x_max: float = 51.2
    y_min: float = -51.2
    y_max: float = 51.2
    z_min: float = -3.0
    z_max: float = 5.0
    cell_size_xy: float = 0.4
    n_z_bins: int = 20

    def validate(self) -> list[str]:
        errors = []
        for lo, hi in (("x_min", "x_max"), ("y_min", "y_max"), ("z_min", "z_max")):
            if not getattr(self, lo) < getattr(self, hi):
                errors.append(f"{lo} must be < {hi}")
        if not self.cell_size_xy > 0:
            errors.append("cell_size_xy must be positive")
        elif not errors:
            for lo, hi in (("x_min", "x_max"), ("y_min", "y_max")):
                if not _is_multiple(getattr(self, hi) - getattr(self, lo), self.cell_size_xy):
                    errors.append(f"extent {lo}..{hi} is not a multiple of cell_size_xy")
        if self.n_z_bins < 1:
            errors.append("n_z_bins must be >= 1")
        return errors

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ValueError("invalid grid spec: " + "; ".join(errors))

    @property
    def H(self) -> int:
        return int(round((self.x_max - self.x_min) / self.cell_size_xy))

    @property
    def W(self) -> int:
        return int(round((self.y_max - self.y_min) / self.cell_size_xy))

    @property
    def dz(self) -> float:
        return (self.z_max - self.z_min) / self.n_z_bins

    @property
    def channels(self) -> int:
        return self.n_z_bins + 2

    def cell_index(self, pts) -> tuple[np.ndarray, np.ndarray]:
        """(N, 3) integer cell indices and an in-volume mask (half-open upper bounds)."""
        p = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        inside = ((p[:, 0] >= self.x_min) & (p[:, 0] < self.x_max)
                  & (p[:, 1] >= self.y_min) & (p[:, 1] < self.y_max)
                  & (p[:, 2] >= self.z_min) & (p[:, 2] < self.z_max))
        idx = np.stack([
            np.floor((p[:, 0] - self.x_min) / self.cell_size_xy),
            np.floor((p[:, 1] - self.y_min) / self.cell_size_xy),
            np.floor((p[:, 2] - self.z_min) / self.dz),
        ], axis=1)
        idx = np.nan_to_num(idx, nan=0, posinf=0, neginf=0).astype(np.int64)
        # guard against x just below x_max rounding up to H
        np.clip(idx, 0, [self.H - 1, self.W - 1, self.n_z_bins - 1], out=idx)
        return idx, inside


@dataclass(frozen=True)
class BevFeatureGrid:
    spec: BevGridSpec
    values: np.ndarray  # (H, W, n_z + 2) float32: occupancy bins, then min z, max z

    @property
    def occupancy(self) -> np.ndarray:
        return self.values[..., : self.spec.n_z_bins]

    @property
    def height_min(self) -> np.ndarray:
        return self.values[..., self.spec.n_z_bins]

    @property
    def height_max(self) -> np.ndarray:
        return self.values[..., self.spec.n_z_bins + 1]


@dataclass(frozen=True)
class BevLatent:
    values: np.ndarray  # (H/8, W/8, 4)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] != LATENT_CHANNELS:
            raise ValueError(f"latent must be (h, w, {LATENT_CHANNELS}), got {v.shape}")
        object.__setattr__(self, "values", v)


def voxelize(cloud: PointCloud, spec: BevGridSpec) -> BevFeatureGrid:
    idx, inside = spec.cell_index(cloud.points)
    idx = idx[inside]
    z = cloud.points[inside, 2].astype(np.float64)
    vals = np.zeros((spec.H, spec.W, spec.channels), dtype=np.float32)
    vals[idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
    if len(idx):
        zmin = np.full((spec.H, spec.W), np.inf)
        zmax = np.full((spec.H, spec.W), -np.inf)
        np.minimum.at(zmin, (idx[:, 0], idx[:, 1]), z)
        np.maximum.at(zmax, (idx[:, 0], idx[:, 1]), z)
        vals[..., spec.n_z_bins] = np.where(np.isfinite(zmin), zmin, 0.0)
        vals[..., spec.n_z_bins + 1] = np.where(np.isfinite(zmax), zmax, 0.0)
    return BevFeatureGrid(spec, vals)


class BevCodec(StridedCodec):
    """Toy BEV autoencoder honoring the 8x / 4-channel latent contract."""

    def __init__(self, spec: BevGridSpec, hidden: int = 16, params: dict | None = None,
                 seed: int = 0, zero_bias: bool = False):
        self.spec = spec
        super().__init__(spec.channels, LATENT_CHANNELS, spec.n_z_bins, hidden=hidden,
                         params=params, seed=seed, zero_bias=zero_bias)

    @classmethod
    def identity_like(cls, spec: BevGridSpec, ground_z: float = -LIDAR_HEIGHT,
                      body_height: float = 2.0) -> BevCodec:
        """Fixed weights that pool occupancy into four height bands per 8x8 block.

        Bands: below the ground bin, the ground bin, ``body_height`` meters
        above it, everything higher. Every layer is an exact window average
        (non-negative, so the ReLUs are inert); the decoder copies each band
        value back to its bins and thresholds it with a steep logistic, so a
        block band containing any point decodes to ~1 and an empty one to ~0.
        """
        nz = spec.n_z_bins
        kg = int(np.clip(np.floor((ground_z - spec.z_min) / spec.dz), 0, nz - 1))
        kb = int(np.clip(kg + int(np.ceil(body_height / spec.dz)), kg, nz - 1))
        band = np.empty(nz, dtype=np.int64)
        band[:kg] = 0
        band[kg] = 1
        band[kg + 1: kb + 1] = 2
        band[kb + 1:] = 3
        h = nz
        p = {}
        cin = spec.channels
        w = np.zeros((4 * cin, h))
        for q in range(4):
            w[q * cin + np.arange(nz), np.arange(nz)] = 0.25
        p["enc0.w"], p["enc0.b"] = w, np.zeros(h)
        for i in (1, 2):
            w = np.zeros((4 * h, h))
            for q in range(4):
                w[q * h + np.arange(h), np.arange(h)] = 0.25
            p[f"enc{i}.w"], p[f"enc{i}.b"] = w, np.zeros(h)
        sizes = np.bincount(band, minlength=4).astype(np.float64)
        proj = np.zeros((h, LATENT_CHANNELS))
        for c in range(nz):
            proj[c, band[c]] = 1.0 / sizes[band[c]]
        p["enc_proj.w"], p["enc_proj.b"] = proj, np.zeros(LATENT_CHANNELS)
        back = np.zeros((LATENT_CHANNELS, h))
        back[band, np.arange(nz)] = 1.0
        p["dec_proj.w"], p["dec_proj.b"] = back, np.zeros(h)
        copy = np.zeros((h, 4 * h))
        for q in range(4):
            copy[np.arange(h), q * h + np.arange(h)] = 1.0
        p["dec0.w"], p["dec0.b"] = copy, np.zeros(4 * h)
        p["dec1.w"], p["dec1.b"] = copy.copy(), np.zeros(4 * h)
        # smallest non-zero band mean is one point among 64 columns x band bins
        theta = 0.5 / (64.0 * np.maximum(sizes[band], 1.0))
        gain = 16.0 / theta
        last = np.zeros((h, 4 * nz))
        bias = np.zeros(4 * nz)
        for q in range(4):
            last[np.arange(nz), q * nz + np.arange(nz)] = gain
            bias[q * nz + np.arange(nz)] = -gain * theta
        p["dec2.w"], p["dec2.b"] = last, bias
        codec = cls(spec, hidden=h, params=p)
        codec.bands = band
        return codec


def encode_bev(grid: BevFeatureGrid, codec: BevCodec) -> BevLatent:
    h, w = grid.values.shape[:2]
    if h % 8 or w % 8:
        raise ValueError(f"grid {h}x{w} is not divisible by 8")
    return BevLatent(codec.encode_array(grid.values.astype(np.float64)))


def decode_bev(latent: BevLatent, codec: BevCodec) -> np.ndarray:
    """Occupancy probabilities (H, W, n_z) in [0, 1]."""
    return codec.decode_array(latent.values)


# -------------------------------------------------------------------- losses

def depth_l1_loss(pred, gt, valid) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if pred.shape != gt.shape or valid.shape != pred.shape:
        raise ValueError("pred, gt and valid must have equal lengths")
    if not valid.any():
        return 0.0
    return float(np.abs(pred[valid] - gt[valid]).mean())


def occupancy_loss_t(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [eps, 1 - eps]."""
    p = ad.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    one_minus_p = ad.add_scalar(ad.mul_scalar(p, -1.0), 1.0)
    one_minus_g = ad.add_scalar(ad.mul_scalar(gt, -1.0), 1.0)
    ll = ad.add(ad.mul(gt, ad.log(p)), ad.mul(one_minus_g, ad.log(one_minus_p)))
    return ad.mul_scalar(ad.mean_all(ll), -1.0)


def occupancy_loss(pred, gt) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    tape = Tape(record=False)
    return float(occupancy_loss_t(tape.constant(pred), tape.constant(gt)).value)


def surface_reg_loss(weights) -> float:
    """Mean entropy of each ray's normalized weight distribution.

    ``weights`` is a list of per-ray 1-D arrays (or a 2-D array). Rays with no
    mass contribute zero entropy.
    """
    rows = list(weights)
    if not rows:
        return 0.0
    ent = []
    for w in rows:
        w = np.asarray(w, dtype=np.float64)
        if np.any(w < 0):
            raise ValueError("weights must be non-negative")
        total = w.sum()
        if total <= 0:
            ent.append(0.0)
            continue
        p = w[w > 0] / total
        ent.append(float(-(p * np.log(p)).sum()))
    return float(np.mean(ent))


# ----------------------------------------------------------- post-processing

def postprocess_filter(cloud: PointCloud, occ: np.ndarray, spec: BevGridSpec,
                       threshold: float) -> PointCloud:
    """Keep points whose containing cell has occupancy >= threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must be in [0, 1]")
    idx, inside = spec.cell_index(cloud.points)
    occ_at = occ[idx[:, 0], idx[:, 1], idx[:, 2]] if len(idx) else np.zeros(0)
    return cloud.subset(inside & (occ_at >= threshold))


def sensor_rays(sensor: Pose, pattern: LidarPattern) -> RayBatch:
    dirs = pattern.directions() @ sensor.rotation.T
    origins = np.broadcast_to(sensor.translation, dirs.shape)
    return RayBatch(origins, dirs, max_t=pattern.max_range)


def render_cloud(occ: np.ndarray, spec: BevGridSpec, sensor: Pose, pattern: LidarPattern,
                 skip: bool = True, empty_below: float = 0.0) -> tuple[PointCloud, RenderResult]:
    rays = sensor_rays(sensor, pattern)
    res = render_rays(occ, spec, rays, skip=skip, empty_below=empty_below)
    hit = res.hit
    pts = rays.origins[hit] + rays.directions[hit] * res.depth[hit, None]
    return PointCloud(pts, np.clip(res.termination[hit], 0.0, 1.0)), res


def reconstruct_cloud(latent: BevLatent, spec: BevGridSpec, sensor: Pose,
                      pattern: LidarPattern, threshold: float, codec: BevCodec,
                      empty_below: float = 1e-3) -> PointCloud:
    """decode -> ray-march from ``sensor`` -> place points at expected depth -> filter."""
    occ = decode_bev(latent, codec)
    cloud, _ = render_cloud(occ, spec, sensor, pattern, skip=True, empty_below=empty_below)
    return postprocess_filter(cloud, occ, spec, threshold)


def fit_decoder(codec: BevCodec, latent: BevLatent, target_occ: np.ndarray,
                steps: int = 50, lr: float = 0.1) -> list[float]:
    """Plain gradient descent on the decoder weights against BCE; returns the loss curve."""
    losses = []
    for _ in range(steps):
        tape = Tape()
        p = codec.bind(tape)
        pred = codec.decode_t(tape.constant(latent.values), p)
        loss = occupancy_loss_t(pred, tape.constant(target_occ))
        grads = ad.backward(tape, loss)
        losses.append(float(loss.value))
        for name, leaf in p.items():
            if name.startswith("dec") and leaf in grads:
                codec.params[name] = codec.params[name] - lr * grads[leaf]
    return losses


__all__ = [
    "BevGridSpec", "BevFeatureGrid", "BevLatent", "BevCodec", "RayBatch", "RenderResult",
    "voxelize", "encode_bev", "decode_bev", "render_rays", "depth_l1_loss",
    "occupancy_loss", "occupancy_loss_t", "surface_reg_loss", "postprocess_filter",
    "reconstruct_cloud", "render_cloud", "sensor_rays", "fit_decoder", "MISS_THRESHOLD",
]
