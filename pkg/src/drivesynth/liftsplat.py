"""Lift per-pixel features along depth hypotheses and sum-pool them into BEV."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraView, backproject


@dataclass(frozen=True)
class DepthBinning:
    d_min: float = 1.0
    d_max: float = 60.0
    n_bins: int = 59

    def __post_init__(self):
        if not 0 < self.d_min < self.d_max:
            raise ValueError("depth binning needs 0 < d_min < d_max")
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")

    @property
    def width(self) -> float:
        return (self.d_max - self.d_min) / self.n_bins

    def centers(self) -> np.ndarray:
        return self.d_min + (np.arange(self.n_bins) + 0.5) * self.width

    def bin_of(self, depth) -> np.ndarray:
        """Bin index of each depth, -1 outside [d_min, d_max)."""
        d = np.asarray(depth, dtype=np.float64)
        k = np.floor((d - self.d_min) / self.width)
        ok = np.isfinite(d) & (d >= self.d_min) & (d < self.d_max)
        return np.where(ok, np.clip(k, 0, self.n_bins - 1), -1).astype(np.int64)


@dataclass(frozen=True)
class ImageFeatureMap:
    view_id: int
    features: np.ndarray    # (H, W, F)
    depth_dist: np.ndarray  # (H, W, n_bins)

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        d = np.asarray(self.depth_dist, dtype=np.float64)
        if f.ndim != 3 or d.ndim != 3 or f.shape[:2] != d.shape[:2]:
            raise ValueError(f"features {f.shape} and depth_dist {d.shape} disagree on H x W")
        if np.any(d < 0):
            raise ValueError("depth distribution has negative entries")
        if np.abs(d.sum(axis=-1) - 1.0).max(initial=0.0) > 1e-6:
            raise ValueError("depth distribution rows must sum to 1")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "depth_dist", d)


def one_hot_depth(depth: np.ndarray, binning: DepthBinning) -> np.ndarray:
    """(H, W) metric depth -> (H, W, n_bins) one-hot; out-of-range pixels go uniform."""
    k = binning.bin_of(depth)
    out = np.zeros(depth.shape + (binning.n_bins,))
    ii, jj = np.nonzero(k >= 0)
    out[ii, jj, k[ii, jj]] = 1.0
    out[k < 0] = 1.0 / binning.n_bins
    return out


def lift(fmap: ImageFeatureMap, view: CameraView, binning: DepthBinning):
    """One frustum point per (pixel, bin) at the pixel center and bin-center depth.

    Returns ``(xyz (M, 3), feats (M, F))`` with M = H * W * n_bins, pixel-major.
    """
    h, w, nf = fmap.features.shape
    nb = fmap.depth_dist.shape[-1]
    if nb != binning.n_bins:
        raise ValueError(f"depth_dist has {nb} bins, binning has {binning.n_bins}")
    vv, uu = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    d = binning.centers()
    u = np.repeat(uu.reshape(-1), nb)
    v = np.repeat(vv.reshape(-1), nb)
    depth = np.tile(d, h * w)
    xyz = backproject(view, u, v, depth)
    feats = (fmap.features[:, :, None, :] * fmap.depth_dist[:, :, :, None]).reshape(-1, nf)
    return xyz, feats


def splat(xyz: np.ndarray, feats: np.ndarray, spec) -> np.ndarray:
    """Sum-pool frustum features into (H, W, F) BEV columns; z collapsed.

    Points outside the spec volume (half-open, z included) are dropped.
    ``np.add.at`` accumulates in input order, so the result is deterministic.
    """
    feats = np.asarray(feats, dtype=np.float64)
    idx, inside = spec.cell_index(xyz)
    out = np.zeros((spec.H, spec.W, feats.shape[1]))
    np.add.at(out, (idx[inside, 0], idx[inside, 1]), feats[inside])
    return out


def in_volume_mass(xyz: np.ndarray, feats: np.ndarray, spec) -> float:
    _, inside = spec.cell_index(xyz)
    return float(np.asarray(feats)[inside].sum())


def avg_pool(x: np.ndarray, factor: int) -> np.ndarray:
    """Non-overlapping ``factor`` x ``factor`` mean over the two leading axes."""
    h, w, c = x.shape
    if h % factor or w % factor:
        raise ValueError(f"{h}x{w} not divisible by pool factor {factor}")
    return x.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))


def concat_bev_conditions(img_bev: np.ndarray, layout_frame: np.ndarray,
                          pool: int = 1) -> np.ndarray:
    """Channel concat of the image BEV (optionally average-pooled by ``pool``) and a
    channel-last layout latent slice."""
    a = avg_pool(np.asarray(img_bev, dtype=np.float64), pool) if pool > 1 else np.asarray(img_bev, dtype=np.float64)
    b = np.asarray(layout_frame, dtype=np.float64)
    if a.shape[:2] != b.shape[:2]:
        raise ValueError(f"spatial dims differ: image BEV {a.shape[:2]} vs layout {b.shape[:2]}")
    return np.concatenate([a, b], axis=-1)
