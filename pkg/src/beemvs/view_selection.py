"""Per-pixel source view sets.

Sets are int64 bitmasks over dataset view indices. A cycle starts from the
per-image triangulation baseline; the incident-angle and visibility filters
then clear bits pixel by pixel.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .geometry import camera_to_world, pixel_grid_rays, project, world_to_camera
from .scene_io import CameraView, DepthNormalMap

MAX_VIEWS = 63


@dataclass(frozen=True)
class ViewSelectionConfig:
    tri_min: float = 10.0
    tri_max: float = 30.0
    incident_max: float = 80.0
    # incident and visibility filtering; off reproduces the "no PVS" ablation
    enabled: bool = True

    def __post_init__(self) -> None:
        if not 0 <= self.tri_min < self.tri_max <= 180:
            raise ValueError("need 0 <= tri_min < tri_max <= 180")
        if not 0 < self.incident_max <= 90:
            raise ValueError("incident_max must lie in (0, 90]")


def probe_point(ref: CameraView) -> np.ndarray:
    """World point on the principal axis at the middle of the depth range."""
    d_mid = 0.5 * (ref.depth_range[0] + ref.depth_range[1])
    return camera_to_world(ref, np.array([0.0, 0.0, d_mid]))


def triangulation_angle(a: CameraView, b: CameraView, point: np.ndarray) -> float:
    """Angle in degrees at ``point`` between the rays to both camera centers."""
    va = a.center - point
    vb = b.center - point
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0 or nb == 0:
        return 0.0
    cos = np.clip(va @ vb / (na * nb), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)))


def triangulation_filter(
    ref_index: int,
    views: Sequence[CameraView],
    probe: np.ndarray | None = None,
    cfg: ViewSelectionConfig = ViewSelectionConfig(),
) -> int:
    """Bitmask of views whose triangulation angle with the reference is in range."""
    if len(views) > MAX_VIEWS:
        raise ValueError(f"at most {MAX_VIEWS} views are supported")
    ref = views[ref_index]
    if probe is None:
        probe = probe_point(ref)
    mask = 0
    for j, v in enumerate(views):
        if j == ref_index or np.allclose(v.center, ref.center, rtol=0, atol=1e-12):
            continue
        angle = triangulation_angle(ref, v, probe)
        if cfg.tri_min <= angle <= cfg.tri_max:
            mask |= 1 << j
    return mask


def bit_count(sets: np.ndarray) -> np.ndarray:
    """Number of set bits per element of an int64 mask array."""
    sets = np.asarray(sets, dtype=np.int64)
    out = np.zeros(sets.shape, dtype=np.int64)
    for j in range(MAX_VIEWS):
        out += (sets >> j) & 1
    return out


def incident_filter(
    sets: np.ndarray,
    depth: np.ndarray,
    normal: np.ndarray,
    ref_index: int,
    views: Sequence[CameraView],
    max_angle: float = 80.0,
) -> np.ndarray:
    """Clear views seen at an incident angle greater than ``max_angle``.

    ``depth`` and ``normal`` are the current best estimate per pixel of the
    reference view (normal in the reference camera frame).
    """
    ref = views[ref_index]
    X = pixel_grid_rays(ref)[: depth.shape[0], : depth.shape[1]] * depth[..., None]
    out = np.array(sets, dtype=np.int64, copy=True)
    cos_max = np.cos(np.radians(max_angle))
    for j, v in enumerate(views):
        if j == ref_index:
            continue
        bit = np.int64(1) << j
        has = (out & bit) != 0
        if not has.any():
            continue
        c = world_to_camera(ref, v.center)
        to_cam = c - X
        to_cam /= np.linalg.norm(to_cam, axis=-1, keepdims=True)
        cos = np.einsum("...k,...k->...", normal, to_cam)
        # strictly greater than max_angle removes the view
        out[has & (cos < cos_max) & ~np.isclose(cos, cos_max, rtol=0, atol=1e-12)] &= ~bit
    return out


def visibility_filter(
    sets: np.ndarray,
    depth: np.ndarray,
    ref_index: int,
    views: Sequence[CameraView],
    maps: Sequence[DepthNormalMap | None],
    margin: float,
) -> np.ndarray:
    """Clear views in which a validated surface hides the pixel's 3D point.

    Projections falling outside a view keep the bit.
    """
    ref = views[ref_index]
    h, w = depth.shape
    Xw = camera_to_world(ref, pixel_grid_rays(ref)[:h, :w] * depth[..., None])
    out = np.array(sets, dtype=np.int64, copy=True)
    for j, v in enumerate(views):
        m = maps[j] if j < len(maps) else None
        if j == ref_index or m is None or not m.validated.any():
            continue
        bit = np.int64(1) << j
        has = (out & bit) != 0
        if not has.any():
            continue
        px, py, z = project(v, world_to_camera(v, Xw))
        xi, yi = np.rint(px), np.rint(py)
        inb = has & (z > 0) & (xi >= 0) & (xi < m.width) & (yi >= 0) & (yi < m.height)
        xi = np.where(inb, xi, 0).astype(np.int64)
        yi = np.where(inb, yi, 0).astype(np.int64)
        occluded = inb & m.validated[yi, xi] & (m.depth[yi, xi] < z - margin)
        out[occluded] &= ~bit
    return out
