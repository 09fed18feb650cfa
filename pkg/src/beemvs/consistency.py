"""Cross-view geometric validation and inter-image propagation."""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from .ambc import ColonyGrid, Evaluator
from .geometry import (
    BehindCameraError,
    PlaneHypothesis,
    camera_to_world,
    pixel_grid_rays,
    project,
    relative_pose,
    transform_hypothesis,
    transform_plane,
    world_to_camera,
)
from .scene_io import CameraView, DepthNormalMap
from .view_selection import bit_count


@dataclass(frozen=True)
class ConsistencyConfig:
    t_depth: float = 0.01
    t_normal: float = 30.0
    min_ratio: float = 0.7

    def __post_init__(self) -> None:
        if self.t_depth <= 0:
            raise ValueError("t_depth must be positive")
        if not 0 < self.t_normal < 90:
            raise ValueError("t_normal must lie in (0, 90) degrees")
        if not 0 < self.min_ratio <= 1:
            raise ValueError("min_ratio must lie in (0, 1]")


def _angle_below(a: np.ndarray, b: np.ndarray, degrees: float) -> np.ndarray:
    cos = np.einsum("...k,...k->...", a, b)
    cos /= np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))) < degrees


def check_pair(
    pixel: tuple[int, int],
    hyp: PlaneHypothesis,
    ref: CameraView,
    src: CameraView,
    src_map: DepthNormalMap,
    cfg: ConsistencyConfig = ConsistencyConfig(),
) -> bool:
    """Whether the hypothesis at ``pixel`` agrees with ``src_map`` in depth and normal."""
    try:
        th = transform_hypothesis(hyp, pixel, ref, src)
    except BehindCameraError:
        return False
    if not th.in_bounds:
        return False
    xi, yi = int(np.rint(th.pixel[0])), int(np.rint(th.pixel[1]))
    if not (0 <= xi < src_map.width and 0 <= yi < src_map.height):
        return False
    if not abs(th.depth - float(src_map.depth[yi, xi])) < cfg.t_depth:
        return False
    return bool(_angle_below(th.normal, np.asarray(src_map.normal[yi, xi], float), cfg.t_normal))


@dataclass
class Correspondence:
    """Where each reference pixel lands in one other view."""

    x: np.ndarray
    y: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    valid: np.ndarray


def correspond(
    ref: CameraView, ref_map: DepthNormalMap, dst: CameraView, dst_shape: tuple[int, int]
) -> Correspondence:
    """Project every pixel's best estimate of ``ref_map`` into ``dst``.

    Pixel coordinates are rounded to the nearest pixel; ``valid`` marks
    projections in front of ``dst`` and inside its image.
    """
    h, w = ref_map.depth.shape
    X = pixel_grid_rays(ref)[:h, :w] * np.asarray(ref_map.depth, float)[..., None]
    Xd = world_to_camera(dst, camera_to_world(ref, X))
    px, py, z = project(dst, Xd)
    R, _ = relative_pose(ref, dst)
    n = np.asarray(ref_map.normal, float) @ R.T
    with np.errstate(invalid="ignore"):
        xi, yi = np.rint(px), np.rint(py)
        valid = np.isfinite(z) & (z > 0) & (xi >= 0) & (xi < dst_shape[1]) & (yi >= 0)
        valid &= yi < dst_shape[0]
    xi = np.where(valid, xi, 0).astype(np.int64)
    yi = np.where(valid, yi, 0).astype(np.int64)
    return Correspondence(xi, yi, z, n, valid)


def validate_map(
    ref_index: int,
    views: Sequence[CameraView],
    maps: Sequence[DepthNormalMap],
    view_sets: np.ndarray,
    cfg: ConsistencyConfig = ConsistencyConfig(),
) -> tuple[np.ndarray, np.ndarray]:
    """Validation flags for the reference map.

    Returns ``(validated, consistent)`` where ``consistent[y, x, j]`` records
    the pair check against view ``j`` (False for views outside the pixel's
    source set). A pixel is validated when at least ``min_ratio`` of its
    source views agree; pixels with one or no source view never are.
    """
    ref = views[ref_index]
    ref_map = maps[ref_index]
    h, w = ref_map.depth.shape
    sets = np.asarray(view_sets, dtype=np.int64)
    consistent = np.zeros((h, w, len(views)), dtype=bool)
    for j, v in enumerate(views):
        if j == ref_index:
            continue
        in_set = ((sets >> j) & 1).astype(bool)
        if not in_set.any():
            continue
        m = maps[j]
        c = correspond(ref, ref_map, v, m.depth.shape)
        d_j = np.asarray(m.depth, float)[c.y, c.x]
        n_j = np.asarray(m.normal, float)[c.y, c.x]
        with np.errstate(invalid="ignore"):
            ok = c.valid & (np.abs(c.depth - d_j) < cfg.t_depth)
        ok &= _angle_below(c.normal, n_j, cfg.t_normal)
        consistent[..., j] = ok & in_set
    size = bit_count(sets)
    count = consistent.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        validated = (size > 1) & (count / np.maximum(size, 1) >= cfg.min_ratio)
    return validated, consistent


def inter_image_propagate(
    views: Sequence[CameraView],
    grids: Sequence[ColonyGrid],
    maps: Sequence[DepthNormalMap],
    consistent: Sequence[np.ndarray],
    view_sets: Sequence[np.ndarray],
    evaluator_for: Callable[[int], Evaluator],
) -> list[int]:
    """Offer each partially consistent best hypothesis to the views that disagree.

    A reference pixel whose best hypothesis agrees with at least one source
    view sends that plane to every other source view whose pair check failed,
    provided the target pixel is not already validated. Competing candidates
    for one target pixel are resolved by fitness (first wins ties); the
    winner replaces the target colony's weakest source only if strictly
    fitter. Returns the number of injections per target view.
    """
    n = len(views)
    # candidates[j] = list of (ys, xs, normals, offsets) in view j's frame
    candidates: list[list[tuple[np.ndarray, ...]]] = [[] for _ in range(n)]
    for i, ref in enumerate(views):
        ref_map = maps[i]
        h, w = ref_map.depth.shape
        sets = np.asarray(view_sets[i], dtype=np.int64)
        senders = consistent[i].any(axis=-1)
        if not senders.any():
            continue
        rays = pixel_grid_rays(ref)[:h, :w]
        normal = np.asarray(ref_map.normal, float)
        offset = -np.asarray(ref_map.depth, float) * np.einsum("hwk,hwk->hw", normal, rays)
        for j, dst in enumerate(views):
            if j == i:
                continue
            in_set = ((sets >> j) & 1).astype(bool)
            c = correspond(ref, ref_map, dst, maps[j].depth.shape)
            target_free = ~np.asarray(maps[j].validated)[c.y, c.x]
            send = senders & in_set & ~consistent[i][..., j] & c.valid & target_free
            if not send.any():
                continue
            R, t = relative_pose(ref, dst)
            n_j, d_j = transform_plane(normal[send], offset[send], R, t)
            candidates[j].append((c.y[send], c.x[send], n_j, d_j))

    injected = [0] * n
    for j, cands in enumerate(candidates):
        if not cands:
            continue
        ys = np.concatenate([c[0] for c in cands])
        xs = np.concatenate([c[1] for c in cands])
        normals = np.concatenate([c[2] for c in cands])
        offsets = np.concatenate([c[3] for c in cands])
        fit = np.asarray(evaluator_for(j)(ys, xs, normals, offsets), dtype=np.float64)
        grid = grids[j]
        h, w = grid.shape
        lin = ys * w + xs
        # best candidate per target pixel, first occurrence on ties
        order = np.lexsort((np.arange(len(lin)), -fit, lin))
        first = np.ones(len(order), dtype=bool)
        first[1:] = lin[order][1:] != lin[order][:-1]
        win = order[first]
        wy, wx = ys[win], xs[win]
        worst = np.argmin(grid.fitness[wy, wx], axis=-1)
        better = fit[win] > grid.fitness[wy, wx, worst]
        wy, wx, ws, win = wy[better], wx[better], worst[better], win[better]
        grid.normals[wy, wx, ws] = normals[win]
        grid.offsets[wy, wx, ws] = offsets[win]
        grid.fitness[wy, wx, ws] = fit[win]
        grid.trial[wy, wx, ws] = 0
        grid.validated[wy, wx, ws] = False
        injected[j] = int(better.sum())
    return injected
