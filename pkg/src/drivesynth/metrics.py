"""Chamfer evaluation over the standard crop volume, plus a Gaussian Fréchet distance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud

CHAMFER_CONVENTION = "half-sum of directed mean Euclidean nearest-neighbor distances"


class EmptyCloudError(ValueError):
    pass


@dataclass(frozen=True)
class CropVolume:
    x_min: float = -51.2
    x_max: float = 51.2
    y_min: float = -51.2
    y_max: float = 51.2
    z_min: float = -3.0
    z_max: float = 5.0

    def __post_init__(self):
        for lo, hi in (("x_min", "x_max"), ("y_min", "y_max"), ("z_min", "z_max")):
            if not getattr(self, lo) < getattr(self, hi):
                raise ValueError(f"crop volume needs {lo} < {hi}")

    def contains(self, pts) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        return ((p[:, 0] >= self.x_min) & (p[:, 0] <= self.x_max)
                & (p[:, 1] >= self.y_min) & (p[:, 1] <= self.y_max)
                & (p[:, 2] >= self.z_min) & (p[:, 2] <= self.z_max))


def crop_cloud(cloud: PointCloud, vol: CropVolume | None = None) -> PointCloud:
    """Keep points inside the closed box ``vol``."""
    vol = vol or CropVolume()
    return cloud.subset(vol.contains(cloud.points))


def _as_points(c) -> np.ndarray:
    p = c.points if isinstance(c, PointCloud) else c
    return np.asarray(p, dtype=np.float64).reshape(-1, 3)


def _pair_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # the one distance formula shared by both search paths
    dx = a[..., 0] - b[..., 0]
    dy = a[..., 1] - b[..., 1]
    dz = a[..., 2] - b[..., 2]
    return np.sqrt(dx * dx + dy * dy + dz * dz)


def nn_dist_brute(a, b, chunk: int = 2048) -> np.ndarray:
    """O(n*m) nearest-neighbor distance from each point of ``a`` to ``b``."""
    a = _as_points(a)
    b = _as_points(b)
    out = np.empty(len(a))
    for s in range(0, len(a), chunk):
        d = _pair_dist(a[s:s + chunk, None, :], b[None, :, :])
        out[s:s + chunk] = d.min(axis=1)
    return out


def nn_dist_tree(a, b, k: int = 8) -> np.ndarray:
    """KD-tree nearest-neighbor distances, re-scored with the brute-force formula.

    The tree proposes ``k`` candidates; the exact distance of each is
    recomputed with :func:`_pair_dist` so results match the brute-force path
    bit for bit. Rows where the k-th candidate could still tie the best are
    resolved with a ball query.
    """
    a = _as_points(a)
    b = _as_points(b)
    tree = cKDTree(b)
    k = min(k, len(b))
    dist, idx = tree.query(a, k=k)
    if k == 1:
        dist = dist[:, None]
        idx = idx[:, None]
    exact = _pair_dist(a[:, None, :], b[idx])
    best = exact.min(axis=1)
    slack = 1e-9 * np.maximum(best, 1.0)
    unsure = np.nonzero((k < len(b)) & (dist[:, -1] <= best + slack))[0]
    for r in unsure:
        cand = np.asarray(tree.query_ball_point(a[r], best[r] + slack[r]), dtype=np.int64)
        if len(cand):
            best[r] = min(best[r], _pair_dist(a[r][None, :], b[cand]).min())
    return best


def chamfer(a, b, accelerated: bool = True) -> float:
    """½ (mean_a NN(a→b) + mean_b NN(b→a)), unsquared Euclidean, meters."""
    pa = _as_points(a)
    pb = _as_points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise EmptyCloudError("chamfer distance needs two non-empty clouds")
    nn = nn_dist_tree if accelerated else nn_dist_brute
    return 0.5 * (float(np.mean(nn(pa, pb))) + float(np.mean(nn(pb, pa))))


def horizon_indices(frame_rate: float, horizons=(1, 2, 3)) -> list[int]:
    out = []
    for h in horizons:
        k = h * frame_rate
        if abs(k - round(k)) > 1e-9:
            raise ValueError(f"frame rate {frame_rate} Hz has no frame at exactly {h} s")
        out.append(int(round(k)))
    return out


def chamfer_horizons(pred: list, gt: list, frame_rate: float,
                     vol: CropVolume | None = None) -> dict:
    """Chamfer@1s/2s/3s between predicted and ground-truth frames (frame 0 is t = 0)."""
    idx = horizon_indices(frame_rate)
    need = idx[-1] + 1
    if len(pred) < need or len(gt) < need:
        raise ValueError(f"need at least {need} frames at {frame_rate} Hz, "
                         f"got pred={len(pred)} gt={len(gt)}")
    out = {}
    for h, k in zip((1, 2, 3), idx):
        out[f"chamfer_{h}s"] = chamfer(crop_cloud(pred[k], vol), crop_cloud(gt[k], vol))
    return out


@dataclass(frozen=True)
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (len(mu), len(mu)):
            raise ValueError(f"covariance shape {cov.shape} does not match mean {mu.shape}")
        if np.abs(cov - cov.T).max() > 1e-9:
            raise ValueError("covariance is not symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-9:
            raise ValueError("covariance is not positive semidefinite")
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def fit(cls, features) -> GaussianSummary:
        x = np.asarray(features, dtype=np.float64)
        return cls(x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False)))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    m = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_gaussian(g1: GaussianSummary, g2: GaussianSummary) -> float:
    """||mu1 - mu2||² + tr(S1 + S2 - 2 (S1 S2)^½)."""
    if g1.mean.shape != g2.mean.shape:
        raise ValueError("Gaussian summaries differ in dimension")
    s1 = _psd_sqrt(g1.cov)
    cross = _psd_sqrt(s1 @ g2.cov @ s1)
    diff = g1.mean - g2.mean
    return float(diff @ diff + np.trace(g1.cov) + np.trace(g2.cov) - 2.0 * np.trace(cross))
