"""Occupancy ray marching with optional spatial skipping.

Cells are walked with a 3-D DDA whose plane-crossing distances are always
recomputed from integer cell indices, never accumulated. That makes the state
after jumping over an empty 8x8 column block reproducible exactly, so the
skipping and non-skipping paths emit bitwise-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

MISS_THRESHOLD = 0.05
SKIP_BLOCK = 8

_INF = np.inf


@dataclass(frozen=True)
class RayBatch:
    origins: np.ndarray
    directions: np.ndarray
    max_t: float = np.inf

    def __post_init__(self):
        o = np.ascontiguousarray(np.asarray(self.origins, dtype=np.float64).reshape(-1, 3))
        d = np.ascontiguousarray(np.asarray(self.directions, dtype=np.float64).reshape(-1, 3))
        if o.shape != d.shape:
            raise ValueError("origins and directions differ in length")
        if len(d) and np.abs(np.linalg.norm(d, axis=1) - 1.0).max() > 1e-9:
            raise ValueError("ray directions must be unit vectors")
        object.__setattr__(self, "origins", o)
        object.__setattr__(self, "directions", d)

    def __len__(self):
        return len(self.origins)


@dataclass(frozen=True)
class RenderResult:
    depth: np.ndarray        # expected depth, NaN on miss
    termination: np.ndarray  # sum of weights
    hit: np.ndarray
    offsets: np.ndarray      # CSR row pointers into the weight arrays
    weights: np.ndarray
    cells: np.ndarray        # (K, 3) int cell indices of each weight
    midpoints: np.ndarray    # ray distance of each weighted segment midpoint
    visited: np.ndarray      # cells touched per ray (diagnostic)

    def ray_weights(self, i: int) -> np.ndarray:
        return self.weights[self.offsets[i]:self.offsets[i + 1]]

    def ray_cells(self, i: int) -> np.ndarray:
        return self.cells[self.offsets[i]:self.offsets[i + 1]]

    def weights_list(self) -> list:
        return [self.ray_weights(i) for i in range(len(self.depth))]


@numba.njit(cache=True, inline="always")
def _t_next(g0, s, o, d, i):
    # distance to the exit plane of cell i along one axis
    if d > 0.0:
        return (g0 + (i + 1) * s - o) / d
    elif d < 0.0:
        return (g0 + i * s - o) / d
    return _INF


@numba.njit(cache=True)
def _block_mask(alpha_pos, block):
    nx, ny, _ = alpha_pos.shape
    bx = (nx + block - 1) // block
    by = (ny + block - 1) // block
    m = np.zeros((bx, by), dtype=np.bool_)
    for i in range(nx):
        for j in range(ny):
            if m[i // block, j // block]:
                continue
            for k in range(alpha_pos.shape[2]):
                if alpha_pos[i, j, k]:
                    m[i // block, j // block] = True
                    break
    return m


@numba.njit(cache=True)
def _march(occ, g0, s, origins, dirs, max_t, empty_below, skip, block, nonempty,
           miss_threshold):
    nx, ny, nz = occ.shape
    n_rays = origins.shape[0]
    depth = np.empty(n_rays)
    term = np.zeros(n_rays)
    hit = np.zeros(n_rays, dtype=np.bool_)
    visited = np.zeros(n_rays, dtype=np.int64)
    offsets = np.zeros(n_rays + 1, dtype=np.int64)
    cap = max(16, n_rays * 4)
    w_out = np.empty(cap)
    c_out = np.empty((cap, 3), dtype=np.int64)
    m_out = np.empty(cap)
    count = 0
    dims = np.array([nx, ny, nz])
    idx = np.zeros(3, dtype=np.int64)
    tn = np.zeros(3)

    for r in range(n_rays):
        o = origins[r]
        d = dirs[r]
        depth[r] = np.nan
        offsets[r] = count
        # slab entry / exit against the whole grid
        t_in = -_INF
        t_out = _INF
        ok = True
        for a in range(3):
            lo = g0[a]
            hi = g0[a] + dims[a] * s[a]
            if d[a] != 0.0:
                t1 = (lo - o[a]) / d[a]
                t2 = (hi - o[a]) / d[a]
                if t1 > t2:
                    t1, t2 = t2, t1
                t_in = max(t_in, t1)
                t_out = min(t_out, t2)
            elif o[a] < lo or o[a] >= hi:
                ok = False
        t_start = max(t_in, 0.0)
        if not ok or t_out <= t_start or t_start >= max_t:
            offsets[r + 1] = count
            continue
        for a in range(3):
            p = o[a] + d[a] * t_start
            k = int(np.floor((p - g0[a]) / s[a]))
            k = min(max(k, 0), dims[a] - 1)
            # reconcile the float position with the index-derived planes
            if d[a] > 0.0:
                while k < dims[a] - 1 and _t_next(g0[a], s[a], o[a], d[a], k) <= t_start:
                    k += 1
                while k > 0 and (g0[a] + k * s[a] - o[a]) / d[a] > t_start:
                    k -= 1
            elif d[a] < 0.0:
                while k > 0 and _t_next(g0[a], s[a], o[a], d[a], k) <= t_start:
                    k -= 1
                while k < dims[a] - 1 and (g0[a] + (k + 1) * s[a] - o[a]) / d[a] > t_start:
                    k += 1
            idx[a] = k

        trans = 1.0
        acc_w = 0.0
        acc_wd = 0.0
        t0 = t_start
        while True:
            i = idx[0]
            j = idx[1]
            k = idx[2]
            if skip and not nonempty[i // block, j // block]:
                # jump to the first cell outside this empty column block
                bi = i // block
                bj = j // block
                best_t = _INF
                best_a = -1
                best_plane = 0
                for a in range(2):
                    if d[a] == 0.0:
                        continue
                    b = bi if a == 0 else bj
                    if d[a] > 0.0:
                        plane = min((b + 1) * block, dims[a])
                    else:
                        plane = b * block
                    t_b = (g0[a] + plane * s[a] - o[a]) / d[a]
                    if t_b < best_t:
                        best_t = t_b
                        best_a = a
                        best_plane = plane
                if best_a < 0:
                    break
                # leaving through the top/bottom before reaching the block edge
                if d[2] > 0.0:
                    tz = (g0[2] + nz * s[2] - o[2]) / d[2]
                elif d[2] < 0.0:
                    tz = (g0[2] - o[2]) / d[2]
                else:
                    tz = _INF
                if tz < best_t or best_t >= max_t:
                    break
                for a in range(3):
                    if a == best_a or d[a] == 0.0:
                        continue
                    step = 1 if d[a] > 0.0 else -1
                    while True:
                        tt = _t_next(g0[a], s[a], o[a], d[a], idx[a])
                        if tt < best_t or (tt == best_t and a < best_a):
                            idx[a] += step
                        else:
                            break
                idx[best_a] = best_plane if d[best_a] > 0.0 else best_plane - 1
                t0 = best_t
                if (idx[0] < 0 or idx[0] >= nx or idx[1] < 0 or idx[1] >= ny
                        or idx[2] < 0 or idx[2] >= nz):
                    break
                continue

            visited[r] += 1
            for a in range(3):
                tn[a] = _t_next(g0[a], s[a], o[a], d[a], idx[a])
            ax = 0
            if tn[1] < tn[ax]:
                ax = 1
            if tn[2] < tn[ax]:
                ax = 2
            t1 = tn[ax]
            seg_end = min(t1, max_t)
            alpha = occ[i, j, k]
            if alpha > 0.0 and alpha >= empty_below:
                w = alpha * trans
                mid = 0.5 * (t0 + seg_end)
                if count >= cap:
                    cap *= 2
                    w_new = np.empty(cap)
                    c_new = np.empty((cap, 3), dtype=np.int64)
                    m_new = np.empty(cap)
                    w_new[:count] = w_out[:count]
                    c_new[:count] = c_out[:count]
                    m_new[:count] = m_out[:count]
                    w_out = w_new
                    c_out = c_new
                    m_out = m_new
                w_out[count] = w
                c_out[count, 0] = i
                c_out[count, 1] = j
                c_out[count, 2] = k
                m_out[count] = mid
                count += 1
                acc_w += w
                acc_wd += w * mid
                trans = trans * (1.0 - alpha)
                if trans == 0.0:
                    break
            if t1 >= max_t:
                break
            t0 = t1
            idx[ax] += 1 if d[ax] > 0.0 else -1
            if idx[ax] < 0 or idx[ax] >= dims[ax]:
                break

        term[r] = acc_w
        if acc_w >= miss_threshold and acc_w > 0.0:
            depth[r] = acc_wd / acc_w
            hit[r] = True
        offsets[r + 1] = count

    return depth, term, hit, offsets, w_out[:count], c_out[:count], m_out[:count], visited


def render_rays(occ: np.ndarray, spec, rays: RayBatch, skip: bool = True,
                miss_threshold: float = MISS_THRESHOLD, empty_below: float = 0.0,
                block: int = SKIP_BLOCK) -> RenderResult:
    """Alpha-composite occupancy along each ray.

    ``occ`` is (H, W, n_z) with values in [0, 1], indexed (x, y, z-bin) over
    the volume described by ``spec``. Cells whose occupancy is below
    ``empty_below`` count as empty (alpha = 0) on both paths.
    """
    occ = np.ascontiguousarray(occ, dtype=np.float64)
    if occ.shape != (spec.H, spec.W, spec.n_z_bins):
        raise ValueError(f"occupancy shape {occ.shape} does not match grid "
                         f"{(spec.H, spec.W, spec.n_z_bins)}")
    g0 = np.array([spec.x_min, spec.y_min, spec.z_min], dtype=np.float64)
    s = np.array([spec.cell_size_xy, spec.cell_size_xy, spec.dz], dtype=np.float64)
    alpha_pos = (occ > 0.0) & (occ >= empty_below)
    nonempty = _block_mask(alpha_pos, block)
    out = _march(occ, g0, s, rays.origins, rays.directions, float(rays.max_t),
                 float(empty_below), bool(skip), int(block), nonempty, float(miss_threshold))
    return RenderResult(*out)
