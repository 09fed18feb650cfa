"""Point-cloud and depth-map metrics against synthetic ground truth.

Accuracy is the mean distance from fused points to the true surface;
completeness is the mean distance from ground-truth surface samples to the
nearest fused point. Surface samples are taken from the ground-truth depth
maps and kept only where enough cameras actually observe them, which mirrors
the observability mask used by structured-light benchmarks: surface that no
camera set could reconstruct should not count against completeness.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import camera_to_world, pixel_grid_rays
from .scene_io import CameraView, DepthNormalMap, FusedPointCloud
from .synthgen import SyntheticScene, cast, surface_distance

__all__ = [
    "EvalReport",
    "depth_error_stats",
    "evaluate",
    "gt_surface_samples",
    "observation_count",
    "region_depth_error",
    "region_validated_fraction",
    "region_within",
    "scene_depth",
]


@dataclass
class EvalReport:
    accuracy: float
    completeness: float
    overall: float
    validated_fraction: list[float]
    depth_err_stats: dict[str, float] = field(default_factory=dict)
    # False when the cloud is empty and accuracy has no meaning
    accuracy_defined: bool = True
    n_points: int = 0
    n_gt_samples: int = 0

    def to_dict(self) -> dict:
        out = asdict(self)
        for k in ("accuracy", "completeness", "overall"):
            if not math.isfinite(out[k]):
                out[k] = None
        return out


# ---------------------------------------------------------------------------
# Ground-truth sampling
# ---------------------------------------------------------------------------


def observation_count(scene: SyntheticScene, points: np.ndarray, rel_tol: float = 1e-6) -> np.ndarray:
    """Number of cameras that see each world point (in frame and unoccluded)."""
    P = np.asarray(points, float).reshape(-1, 3)
    count = np.zeros(len(P), dtype=np.int64)
    for v in scene.views:
        Xc = P @ v.R.T + v.t
        with np.errstate(divide="ignore", invalid="ignore"):
            p = Xc @ v.K.T
            u = np.rint(p[:, 0] / p[:, 2])
            w = np.rint(p[:, 1] / p[:, 2])
        inside = (Xc[:, 2] > 0) & (u >= 0) & (u < v.width) & (w >= 0) & (w < v.height)
        s, _ = cast(scene.geometry, v.center, P - v.center)
        count += inside & (s >= 1.0 - rel_tol)
    return count


def gt_surface_samples(
    scene: SyntheticScene, stride: int = 2, min_obs: int = 4, spacing: float | None = None
) -> np.ndarray:
    """Near-uniform samples of the observable ground-truth surface.

    Every ``stride``-th pixel of each ground-truth map is backprojected,
    points seen by fewer than ``min_obs`` cameras are dropped, and one sample
    per cube of side ``spacing`` is kept so overlapping views do not weight
    shared surface more heavily. ``spacing`` defaults to the footprint of
    ``stride`` pixels at the mean ground-truth depth.
    """
    pts = []
    depths = []
    for v, g in zip(scene.views, scene.gt_maps):
        sl = (slice(0, None, stride), slice(0, None, stride))
        hit = np.asarray(g.validated, bool)[sl]
        d = np.asarray(g.depth, float)[sl]
        rays = pixel_grid_rays(v)[sl]
        X = camera_to_world(v, rays[hit] * d[hit][:, None])
        pts.append(X)
        depths.append(d[hit])
    P = np.concatenate(pts) if pts else np.zeros((0, 3))
    if len(P) == 0:
        return P
    if spacing is None:
        f = np.mean([v.K[0, 0] for v in scene.views])
        spacing = stride * float(np.mean(np.concatenate(depths))) / f
    keys = np.floor(P / spacing).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    P = P[np.sort(first)]
    return P[observation_count(scene, P) >= min_obs]


# ---------------------------------------------------------------------------
# Depth-map statistics
# ---------------------------------------------------------------------------


def _relative_errors(m: DepthNormalMap, g: DepthNormalMap, mask: np.ndarray) -> np.ndarray:
    sel = mask & np.asarray(g.validated, bool) & (np.asarray(g.depth) > 0)
    gd = np.asarray(g.depth, float)[sel]
    return np.abs(np.asarray(m.depth, float)[sel] - gd) / gd


def depth_error_stats(
    maps: Sequence[DepthNormalMap], gt_maps: Sequence[DepthNormalMap], tol: float = 0.01
) -> dict[str, float]:
    """Relative depth error over validated pixels with ground truth."""
    errs = np.concatenate(
        [_relative_errors(m, g, np.asarray(m.validated, bool)) for m, g in zip(maps, gt_maps)]
    )
    if errs.size == 0:
        return {"count": 0}
    q50, q90, q95 = np.quantile(errs, [0.5, 0.9, 0.95])
    return {
        "count": int(errs.size),
        "mean": float(errs.mean()),
        "median": float(q50),
        "q90": float(q90),
        "q95": float(q95),
        "within_tol": float((errs < tol).mean()),
    }


def region_depth_error(
    maps: Sequence[DepthNormalMap], gt_maps: Sequence[DepthNormalMap], masks: Sequence[np.ndarray]
) -> float:
    """Mean relative depth error over all pixels inside ``masks`` (validated or not)."""
    errs = np.concatenate([_relative_errors(m, g, np.asarray(k, bool)) for m, g, k in zip(maps, gt_maps, masks)])
    return float(errs.mean()) if errs.size else math.nan


def region_within(
    maps: Sequence[DepthNormalMap],
    gt_maps: Sequence[DepthNormalMap],
    masks: Sequence[np.ndarray],
    tol: float = 0.01,
) -> float:
    """Fraction of pixels inside ``masks`` whose relative depth error is below ``tol``."""
    errs = np.concatenate([_relative_errors(m, g, np.asarray(k, bool)) for m, g, k in zip(maps, gt_maps, masks)])
    return float((errs < tol).mean()) if errs.size else math.nan


def region_validated_fraction(maps: Sequence[DepthNormalMap], masks: Sequence[np.ndarray]) -> float:
    sel = np.concatenate([np.asarray(m.validated, bool)[np.asarray(k, bool)] for m, k in zip(maps, masks)])
    return float(sel.mean()) if sel.size else math.nan


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


def evaluate(
    cloud: FusedPointCloud,
    maps: Sequence[DepthNormalMap],
    scene: SyntheticScene,
    stride: int = 2,
    min_obs: int = 4,
    gt_samples: np.ndarray | None = None,
) -> EvalReport:
    """Compare a reconstruction with the scene's ground truth.

    Args:
        cloud: Fused points.
        maps: Estimated per-view maps, in scene view order.
        scene: Ground-truth geometry, maps and cameras.
        stride: Pixel stride of the ground-truth surface sampling.
        min_obs: Cameras that must see a surface sample for it to count
            towards completeness.
        gt_samples: Precomputed surface samples; overrides ``stride`` and
            ``min_obs``.

    Returns:
        The report. An empty cloud has infinite completeness and overall
        score, and ``accuracy_defined`` set to False.
    """
    if len(maps) != len(scene.views):
        raise ValueError(f"expected {len(scene.views)} maps, got {len(maps)}")
    samples = gt_surface_samples(scene, stride, min_obs) if gt_samples is None else np.asarray(gt_samples, float)
    validated = [float(np.asarray(m.validated, bool).mean()) for m in maps]
    stats = depth_error_stats(maps, scene.gt_maps)
    n = len(cloud)
    if n == 0:
        return EvalReport(math.nan, math.inf, math.inf, validated, stats, False, 0, len(samples))
    accuracy = float(surface_distance(scene.geometry, cloud.positions).mean())
    if len(samples):
        dist, _ = cKDTree(cloud.positions).query(samples)
        completeness = float(dist.mean())
    else:
        completeness = 0.0
    return EvalReport(
        accuracy, completeness, 0.5 * (accuracy + completeness), validated, stats, True, n, len(samples)
    )


def scene_depth(view: CameraView) -> float:
    """Characteristic scene depth of a view: the middle of its depth range."""
    return 0.5 * (view.depth_range[0] + view.depth_range[1])
