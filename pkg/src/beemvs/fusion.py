"""Multi-view fusion of validated depth/normal maps into a point cloud."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import camera_to_world, pixel_grid_rays
from .scene_io import DepthNormalMap, FusedPointCloud, SceneDataset

__all__ = ["FusionConfig", "FusedPointCloud", "fuse"]


@dataclass(frozen=True)
class FusionConfig:
    rel_depth: float = 0.01
    normal_deg: float = 30.0
    min_views: int = 3
    # compare |d_proj - d_j| against rel_depth directly instead of relative to d_j
    absolute: bool = False

    def __post_init__(self) -> None:
        if self.rel_depth <= 0:
            raise ValueError("rel_depth must be positive")
        if self.min_views < 1:
            raise ValueError("min_views must be at least 1")


@njit(cache=True)
def _fuse_kernel(P, N, depth, valid, colors, Ks, Rs, ts, hw, rel, absolute, cos_max, min_views,
                 out_p, out_n, out_c, out_s):
    nv = P.shape[0]
    consumed = np.zeros(valid.shape, dtype=np.bool_)
    link_j = np.empty(nv, dtype=np.int64)
    link_y = np.empty(nv, dtype=np.int64)
    link_x = np.empty(nv, dtype=np.int64)
    count_out = 0
    for i in range(nv):
        for y in range(hw[i, 0]):
            for x in range(hw[i, 1]):
                if not valid[i, y, x] or consumed[i, y, x]:
                    continue
                X0 = P[i, y, x, 0]
                X1 = P[i, y, x, 1]
                X2 = P[i, y, x, 2]
                nlink = 0
                for j in range(nv):
                    if j == i:
                        continue
                    c0 = Rs[j, 0, 0] * X0 + Rs[j, 0, 1] * X1 + Rs[j, 0, 2] * X2 + ts[j, 0]
                    c1 = Rs[j, 1, 0] * X0 + Rs[j, 1, 1] * X1 + Rs[j, 1, 2] * X2 + ts[j, 1]
                    c2 = Rs[j, 2, 0] * X0 + Rs[j, 2, 1] * X1 + Rs[j, 2, 2] * X2 + ts[j, 2]
                    if c2 <= 0.0:
                        continue
                    p0 = Ks[j, 0, 0] * c0 + Ks[j, 0, 1] * c1 + Ks[j, 0, 2] * c2
                    p1 = Ks[j, 1, 0] * c0 + Ks[j, 1, 1] * c1 + Ks[j, 1, 2] * c2
                    p2 = Ks[j, 2, 0] * c0 + Ks[j, 2, 1] * c1 + Ks[j, 2, 2] * c2
                    u = int(np.rint(p0 / p2))
                    v = int(np.rint(p1 / p2))
                    if u < 0 or v < 0 or u >= hw[j, 1] or v >= hw[j, 0]:
                        continue
                    if not valid[j, v, u] or consumed[j, v, u]:
                        continue
                    dj = depth[j, v, u]
                    diff = abs(c2 - dj)
                    if not absolute:
                        diff = diff / dj
                    if not diff < rel:
                        continue
                    cos = (N[i, y, x, 0] * N[j, v, u, 0] + N[i, y, x, 1] * N[j, v, u, 1]
                           + N[i, y, x, 2] * N[j, v, u, 2])
                    if not cos > cos_max:
                        continue
                    link_j[nlink] = j
                    link_y[nlink] = v
                    link_x[nlink] = u
                    nlink += 1
                if nlink < min_views:
                    continue
                consumed[i, y, x] = True
                sp = P[i, y, x].copy()
                sn = N[i, y, x].copy()
                sc = colors[i, y, x].astype(np.float64)
                for k in range(nlink):
                    j, v, u = link_j[k], link_y[k], link_x[k]
                    consumed[j, v, u] = True
                    sp += P[j, v, u]
                    sn += N[j, v, u]
                    sc += colors[j, v, u]
                m = nlink + 1
                out_p[count_out] = sp / m
                out_n[count_out] = sn / math.sqrt(sn[0] ** 2 + sn[1] ** 2 + sn[2] ** 2)
                out_c[count_out] = sc / m
                out_s[count_out] = nlink
                count_out += 1
    return count_out


def fuse(
    dataset: SceneDataset, maps: Sequence[DepthNormalMap], cfg: FusionConfig = FusionConfig()
) -> FusedPointCloud:
    """Fuse validated pixels of all maps.

    Views are visited as references in index order. A reference pixel is
    linked to each other view whose rounded projection holds an unconsumed,
    validated estimate agreeing in depth and normal; with at least
    ``min_views`` links the estimates are averaged into one point and every
    linked pixel is consumed.
    """
    views = dataset.views
    nv = len(views)
    hmax = max(m.height for m in maps)
    wmax = max(m.width for m in maps)
    P = np.zeros((nv, hmax, wmax, 3))
    N = np.zeros((nv, hmax, wmax, 3))
    depth = np.ones((nv, hmax, wmax))
    valid = np.zeros((nv, hmax, wmax), dtype=bool)
    colors = np.zeros((nv, hmax, wmax, 3))
    hw = np.zeros((nv, 2), dtype=np.int64)
    for i, (v, m) in enumerate(zip(views, maps)):
        h, w = m.height, m.width
        d = np.asarray(m.depth, float)
        X = pixel_grid_rays(v)[:h, :w] * d[..., None]
        P[i, :h, :w] = camera_to_world(v, X)
        n = np.asarray(m.normal, float) @ v.R
        N[i, :h, :w] = n / np.linalg.norm(n, axis=-1, keepdims=True)
        depth[i, :h, :w] = d
        valid[i, :h, :w] = np.asarray(m.validated) & np.isfinite(d) & (d > 0)
        colors[i, :h, :w] = v.rgb()[:h, :w]
        hw[i] = h, w
    total = int(valid.sum())
    out_p = np.zeros((total, 3))
    out_n = np.zeros((total, 3))
    out_c = np.zeros((total, 3))
    out_s = np.zeros(total, dtype=np.int64)
    Ks = np.stack([v.K for v in views])
    Rs = np.stack([v.R for v in views])
    ts = np.stack([v.t for v in views])
    k = _fuse_kernel(
        P, N, depth, valid, colors, Ks, Rs, ts, hw, float(cfg.rel_depth), cfg.absolute,
        math.cos(math.radians(cfg.normal_deg)), int(cfg.min_views),
        out_p, out_n, out_c, out_s,
    )
    return FusedPointCloud(
        out_p[:k], out_n[:k], np.clip(np.rint(out_c[:k]), 0, 255).astype(np.uint8), out_s[:k]
    )
