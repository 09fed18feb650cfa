"""Bilaterally weighted NCC matching cost, aggregation and fitness.

The per-reference quantities of the weighted NCC (bilateral weights, centred
reference intensities, weight sums, reference variance) depend only on the
reference image, so :class:`ReferencePatches` precomputes them once per view
and the compiled kernels only touch the source images.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .scene_io import CameraView, SceneDataset

VAR_EPS = 1e-12


@dataclass(frozen=True)
class MatchingConfig:
    window: int = 11
    sigma_spatial: float = 3.0
    sigma_color: float = 0.1
    max_cost: float = 2.0
    # sample every `step`-th pixel of the window; 1 uses the full window
    step: int = 2
    # share of the window weight that must warp inside the source image;
    # 1.0 scores any partially outside window as max_cost
    min_inside: float = 0.5

    def __post_init__(self) -> None:
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 3, got {self.window}")
        if self.sigma_spatial <= 0 or self.sigma_color <= 0:
            raise ValueError("sigmas must be positive")
        if self.max_cost != 2.0:
            raise ValueError("max_cost is fixed at 2 (the NCC cost ceiling)")
        if self.step < 1 or (self.window - 1) % self.step:
            raise ValueError("step must divide window - 1")
        if not 0 < self.min_inside <= 1:
            raise ValueError("min_inside must lie in (0, 1]")

    def taps(self) -> tuple[np.ndarray, np.ndarray]:
        r = self.window // 2
        offs = np.arange(-r, r + 1, self.step)
        dy, dx = np.meshgrid(offs, offs, indexing="ij")
        return dx.ravel().astype(np.int64), dy.ravel().astype(np.int64)


# ---------------------------------------------------------------------------
# Compiled kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def _ref_stats_at(img, x, y, dx, dy, inv2ss, inv2sc, w_out, a_out):
    h, w = img.shape
    c = img[y, x]
    sw = 0.0
    swr = 0.0
    for k in range(dx.shape[0]):
        px = x + dx[k]
        py = y + dy[k]
        if px < 0 or py < 0 or px >= w or py >= h:
            w_out[k] = 0.0
            continue
        r = img[py, px]
        dr = r - c
        wk = math.exp(-(dx[k] * dx[k] + dy[k] * dy[k]) * inv2ss - dr * dr * inv2sc)
        w_out[k] = wk
        sw += wk
        swr += wk * r
    mean = swr / sw
    var = 0.0
    for k in range(dx.shape[0]):
        if w_out[k] == 0.0:
            a_out[k] = 0.0
            continue
        px = x + dx[k]
        py = y + dy[k]
        dr = img[py, px] - mean
        a_out[k] = w_out[k] * dr
        var += w_out[k] * dr * dr
    return sw, var / sw


@njit(parallel=True, cache=True)
def _ref_stats_grid(img, dx, dy, inv2ss, inv2sc, W, A, SW, VR):
    h, w = img.shape
    for y in prange(h):
        for x in range(w):
            sw, vr = _ref_stats_at(img, x, y, dx, dy, inv2ss, inv2sc, W[y, x], A[y, x])
            SW[y, x] = sw
            VR[y, x] = vr


@njit(cache=True)
def _sample(img, h, w, sx, sy):
    # caller guarantees 0 <= sx <= w-1, 0 <= sy <= h-1
    x0 = int(sx)
    y0 = int(sy)
    if x0 >= w - 1:
        x0 = w - 2
    if y0 >= h - 1:
        y0 = h - 2
    fx = sx - x0
    fy = sy - y0
    top = img[y0, x0] * (1.0 - fx) + img[y0, x0 + 1] * fx
    bot = img[y0 + 1, x0] * (1.0 - fx) + img[y0 + 1, x0 + 1] * fx
    return top * (1.0 - fy) + bot * fy


@njit(cache=True)
def _ncc_cost(x, y, H, src, h, w, dx, dy, wts, a, sw, var_r, max_cost, min_inside):
    """1 - weighted NCC between the reference window at (x, y) and its warp.

    ``H`` is a flat 9-vector; ``h, w`` bound the valid area of ``src``. Taps
    warped outside ``src`` are dropped; below ``min_inside`` of the total
    weight the pair scores ``max_cost``.
    """
    if var_r < 1e-12:
        return max_cost
    s_w = 0.0
    s_e = 0.0
    s_ee = 0.0
    s_v = 0.0
    s_vv = 0.0
    s_ev = 0.0
    shift = 0.0
    first = True
    for k in range(dx.shape[0]):
        wk = wts[k]
        if wk == 0.0:
            continue
        px = x + dx[k]
        py = y + dy[k]
        hz = H[6] * px + H[7] * py + H[8]
        if hz <= 0.0:
            return max_cost
        sx = (H[0] * px + H[1] * py + H[2]) / hz
        sy = (H[3] * px + H[4] * py + H[5]) / hz
        if not (sx >= 0.0 and sy >= 0.0 and sx <= w - 1.0 and sy <= h - 1.0):
            continue
        v = _sample(src, h, w, sx, sy)
        if first:
            # shift by the first sample to limit cancellation in the variance
            shift = v
            first = False
        v -= shift
        e = a[k] / wk
        s_w += wk
        s_e += a[k]
        s_ee += a[k] * e
        s_v += wk * v
        s_vv += wk * v * v
        s_ev += a[k] * v
    if s_w < min_inside * sw or s_w <= 0.0:
        return max_cost
    me = s_e / s_w
    mv = s_v / s_w
    var_e = s_ee / s_w - me * me
    var_s = s_vv / s_w - mv * mv
    if var_e < 1e-12 or var_s < 1e-12:
        return max_cost
    ncc = (s_ev / s_w - me * mv) / math.sqrt(var_e * var_s)
    if ncc > 1.0:
        ncc = 1.0
    elif ncc < -1.0:
        ncc = -1.0
    return 1.0 - ncc


@njit(cache=True)
def _plane_homography_flat(Ks, Rr, tr, Kinv, n0, n1, n2, D, out):
    # M = R - t n^T / D
    M = np.empty((3, 3))
    for i in range(3):
        M[i, 0] = Rr[i, 0] - tr[i] * n0 / D
        M[i, 1] = Rr[i, 1] - tr[i] * n1 / D
        M[i, 2] = Rr[i, 2] - tr[i] * n2 / D
    T = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            T[i, j] = Ks[i, 0] * M[0, j] + Ks[i, 1] * M[1, j] + Ks[i, 2] * M[2, j]
    for i in range(3):
        for j in range(3):
            out[3 * i + j] = T[i, 0] * Kinv[0, j] + T[i, 1] * Kinv[1, j] + T[i, 2] * Kinv[2, j]


@njit(parallel=True, cache=True)
def _fitness_batch(
    ys, xs, normals, offsets, masks,
    Kinv, dmin, dmax,
    src_K, src_R, src_t, src_img, src_hw,
    dx, dy, W, A, SW, VR, max_cost, min_inside, out,
):
    n = ys.shape[0]
    nviews = src_K.shape[0]
    lo = dmin * (1.0 - 1e-9)
    hi = dmax * (1.0 + 1e-9)
    for i in prange(n):
        x = xs[i]
        y = ys[i]
        rx = Kinv[0, 0] * x + Kinv[0, 1] * y + Kinv[0, 2]
        ry = Kinv[1, 0] * x + Kinv[1, 1] * y + Kinv[1, 2]
        rz = Kinv[2, 0] * x + Kinv[2, 1] * y + Kinv[2, 2]
        n0 = normals[i, 0]
        n1 = normals[i, 1]
        n2 = normals[i, 2]
        D = offsets[i]
        nd = (n0 * rx + n1 * ry + n2 * rz) / rz
        if not (nd < -1e-12) or not (D > 0.0):
            out[i] = -1.0
            continue
        d = -D / nd
        if d < lo or d > hi:
            out[i] = -1.0
            continue
        m = masks[y, x]
        Hf = np.empty(9)
        total = 0.0
        count = 0
        for j in range(nviews):
            if (m >> j) & 1:
                count += 1
                _plane_homography_flat(src_K[j], src_R[j], src_t[j], Kinv, n0, n1, n2, D, Hf)
                total += _ncc_cost(
                    x, y, Hf, src_img[j], src_hw[j, 0], src_hw[j, 1],
                    dx, dy, W[y, x], A[y, x], SW[y, x], VR[y, x], max_cost, min_inside,
                )
        if count <= 1:
            out[i] = 0.0
        else:
            out[i] = 1.0 / (1.0 + total / (count - 1))


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------


class ReferencePatches:
    """Precomputed bilateral weights and reference statistics for one image."""

    def __init__(self, image: np.ndarray, cfg: MatchingConfig):
        img = np.ascontiguousarray(image, dtype=np.float64)
        self.cfg = cfg
        self.dx, self.dy = cfg.taps()
        h, w = img.shape
        p = self.dx.shape[0]
        self.weights = np.zeros((h, w, p))
        self.centered = np.zeros((h, w, p))
        self.weight_sum = np.zeros((h, w))
        self.variance = np.zeros((h, w))
        _ref_stats_grid(
            img, self.dx, self.dy,
            1.0 / (2.0 * cfg.sigma_spatial**2), 1.0 / (2.0 * cfg.sigma_color**2),
            self.weights, self.centered, self.weight_sum, self.variance,
        )


def pairwise_cost(
    ref: CameraView,
    src: CameraView,
    pixel: tuple[int, int],
    H: np.ndarray,
    cfg: MatchingConfig = MatchingConfig(),
) -> float:
    """Matching cost ``1 - NCC`` of the window at ``pixel`` warped by ``H``.

    Taps warped outside ``src`` are left out of both patch statistics.
    Returns ``cfg.max_cost`` when less than ``cfg.min_inside`` of the window
    weight stays inside, a tap lands behind the source camera, or either
    weighted patch variance vanishes.
    """
    x, y = int(pixel[0]), int(pixel[1])
    if not (0 <= x < ref.width and 0 <= y < ref.height):
        raise ValueError(f"pixel {pixel} outside reference image")
    dx, dy = cfg.taps()
    wts = np.zeros(dx.shape[0])
    a = np.zeros(dx.shape[0])
    sw, var_r = _ref_stats_at(
        np.ascontiguousarray(ref.image), x, y, dx, dy,
        1.0 / (2.0 * cfg.sigma_spatial**2), 1.0 / (2.0 * cfg.sigma_color**2), wts, a,
    )
    img = np.ascontiguousarray(src.image, dtype=np.float64)
    Hf = np.ascontiguousarray(np.asarray(H, dtype=np.float64).reshape(9))
    return float(
        _ncc_cost(
            x, y, Hf, img, img.shape[0], img.shape[1], dx, dy, wts, a, sw, var_r,
            cfg.max_cost, cfg.min_inside,
        )
    )


def aggregate_cost(costs: Sequence[float]) -> float:
    """Sum of per-view costs over ``|S| - 1``; infinite when ``|S| <= 1``."""
    k = len(costs)
    if k <= 1:
        return math.inf
    return float(sum(costs)) / (k - 1)


def fitness(cost: float) -> float:
    if cost < 0 or math.isnan(cost):
        raise ValueError(f"cost must be non-negative, got {cost}")
    if math.isinf(cost):
        return 0.0
    return 1.0 / (1.0 + cost)


class PlaneEvaluator:
    """Fitness of plane hypotheses at reference pixels.

    ``view_sets`` is the per-pixel source-view bitmask (bit j = dataset view
    j); it is held by reference so filters can update it in place.
    Geometrically invalid hypotheses (non camera-facing, non-positive offset
    or induced depth outside the depth range) score ``-1``.
    """

    def __init__(
        self,
        dataset: SceneDataset,
        ref_index: int,
        view_sets: np.ndarray,
        cfg: MatchingConfig = MatchingConfig(),
        patches: ReferencePatches | None = None,
    ):
        from .geometry import relative_pose

        self.dataset = dataset
        self.ref_index = ref_index
        self.cfg = cfg
        ref = dataset.views[ref_index]
        self.ref = ref
        self.view_sets = view_sets
        self.patches = patches or ReferencePatches(ref.image, cfg)
        n = len(dataset.views)
        hmax = max(v.height for v in dataset.views)
        wmax = max(v.width for v in dataset.views)
        self._K = np.zeros((n, 3, 3))
        self._R = np.zeros((n, 3, 3))
        self._t = np.zeros((n, 3))
        self._img = np.zeros((n, hmax, wmax))
        self._hw = np.zeros((n, 2), dtype=np.int64)
        for j, v in enumerate(dataset.views):
            R, t = relative_pose(ref, v)
            self._K[j], self._R[j], self._t[j] = v.K, R, t
            self._img[j, : v.height, : v.width] = v.image
            self._hw[j] = v.height, v.width
        self._Kinv = np.ascontiguousarray(ref.K_inv)

    def __call__(self, ys, xs, normals, offsets) -> np.ndarray:
        ys = np.ascontiguousarray(ys, dtype=np.int64).ravel()
        xs = np.ascontiguousarray(xs, dtype=np.int64).ravel()
        normals = np.ascontiguousarray(normals, dtype=np.float64).reshape(-1, 3)
        offsets = np.ascontiguousarray(offsets, dtype=np.float64).ravel()
        out = np.empty(ys.shape[0])
        p = self.patches
        d_min, d_max = self.ref.depth_range
        _fitness_batch(
            ys, xs, normals, offsets, np.ascontiguousarray(self.view_sets, dtype=np.int64),
            self._Kinv, d_min, d_max,
            self._K, self._R, self._t, self._img, self._hw,
            p.dx, p.dy, p.weights, p.centered, p.weight_sum, p.variance,
            self.cfg.max_cost, self.cfg.min_inside, out,
        )
        return out
