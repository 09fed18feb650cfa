"""Pinhole projection and plane-hypothesis geometry.

Conventions: a camera maps world points with ``X_cam = R @ X_world + t``.
Plane hypotheses live in the owning camera's frame as ``n . X + D = 0`` with
a camera-facing unit normal (``n . ray < 0``), which makes ``D > 0`` for
planes in front of the camera. Depth means the camera-frame z coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene_io import CameraView

PARALLEL_EPS = 1e-12


class GeometryError(ValueError):
    pass


class DegeneratePlaneError(GeometryError):
    pass


class BehindCameraError(GeometryError):
    pass


@dataclass(frozen=True)
class PlaneHypothesis:
    normal: np.ndarray
    offset: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "normal", np.asarray(self.normal, dtype=np.float64))
        object.__setattr__(self, "offset", float(self.offset))


@dataclass(frozen=True)
class PixelRay:
    pixel: tuple[float, float]
    direction: np.ndarray


@dataclass(frozen=True)
class TransformedHypothesis:
    pixel: tuple[float, float]
    depth: float
    normal: np.ndarray
    in_bounds: bool


def pixel_ray(cam: CameraView, x: float, y: float) -> PixelRay:
    d = cam.K_inv @ np.array([x, y, 1.0])
    # K[2] = (0, 0, 1) so d[2] is 1 up to rounding; pin it exactly
    d = d / d[2]
    return PixelRay((x, y), d)


def pixel_rays(cam: CameraView, xs, ys) -> np.ndarray:
    """Vectorised ray directions with z = 1, shape ``(..., 3)``."""
    xs, ys = np.broadcast_arrays(np.asarray(xs, float), np.asarray(ys, float))
    pts = np.stack([xs, ys, np.ones_like(xs)], axis=-1)
    d = pts @ cam.K_inv.T
    return d / d[..., 2:3]


def pixel_grid_rays(cam: CameraView) -> np.ndarray:
    ys, xs = np.mgrid[0 : cam.height, 0 : cam.width]
    return pixel_rays(cam, xs, ys)


def depth_from_plane(h: PlaneHypothesis, ray: PixelRay, cam: CameraView | None = None) -> float:
    """Depth along ``ray`` where it meets the plane ``n . X + D = 0``."""
    denom = float(np.dot(h.normal, ray.direction))
    if abs(denom) < PARALLEL_EPS:
        raise DegeneratePlaneError("viewing ray is parallel to the plane")
    return -h.offset / denom


def depths_from_planes(normals: np.ndarray, offsets: np.ndarray, rays: np.ndarray) -> np.ndarray:
    """Vectorised depth_from_plane; parallel rays give ``inf``."""
    denom = np.einsum("...k,...k->...", normals, rays)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(np.abs(denom) < PARALLEL_EPS, np.inf, -offsets / denom)


def offset_from_depth(normal: np.ndarray, depth, ray: np.ndarray):
    """Plane offset D for a plane with ``normal`` passing through ``depth * ray``."""
    return -np.asarray(depth) * np.einsum("...k,...k->...", normal, ray)


def relative_pose(ref: CameraView, src: CameraView) -> tuple[np.ndarray, np.ndarray]:
    """(R, t) taking ref camera coordinates to src camera coordinates."""
    R = src.R @ ref.R.T
    t = src.t - R @ ref.t
    return R, t


def plane_homography(h: PlaneHypothesis, ref: CameraView, src: CameraView) -> np.ndarray:
    """Homography mapping ref pixels to src pixels for points on the plane.

    Normalised so that ``H[2, 2] == 1`` when that entry is non-zero.
    """
    if abs(h.offset) < PARALLEL_EPS:
        raise DegeneratePlaneError("plane passes through the camera center")
    R, t = relative_pose(ref, src)
    H = src.K @ (R - np.outer(t, h.normal) / h.offset) @ ref.K_inv
    if abs(H[2, 2]) > 1e-300:
        H = H / H[2, 2]
    return H


def apply_homography(H: np.ndarray, xs, ys) -> tuple[np.ndarray, np.ndarray]:
    xs = np.asarray(xs, float)
    ys = np.asarray(ys, float)
    w = H[2, 0] * xs + H[2, 1] * ys + H[2, 2]
    return (H[0, 0] * xs + H[0, 1] * ys + H[0, 2]) / w, (
        H[1, 0] * xs + H[1, 1] * ys + H[1, 2]
    ) / w


def backproject(cam: CameraView, x, y, depth) -> np.ndarray:
    """Camera-frame 3D points for pixels at the given depths."""
    return pixel_rays(cam, x, y) * np.asarray(depth, float)[..., None]


def camera_to_world(cam: CameraView, X: np.ndarray) -> np.ndarray:
    return (np.asarray(X) - cam.t) @ cam.R


def world_to_camera(cam: CameraView, X: np.ndarray) -> np.ndarray:
    return np.asarray(X) @ cam.R.T + cam.t


def project(cam: CameraView, X_cam: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project camera-frame points; returns ``(x, y, depth)``."""
    X_cam = np.asarray(X_cam, float)
    p = X_cam @ cam.K.T
    z = X_cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        return p[..., 0] / p[..., 2], p[..., 1] / p[..., 2], z


def in_image(cam: CameraView, x, y) -> np.ndarray:
    """Whether real-valued pixel coordinates round to a pixel inside the image."""
    xi = np.rint(x)
    yi = np.rint(y)
    return (xi >= 0) & (xi < cam.width) & (yi >= 0) & (yi < cam.height)


def sample_hemisphere_normal(rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Uniform unit vectors over the camera-facing hemisphere (z < 0).

    Marsaglia's disk-rejection construction, with z folded to be negative.
    """
    n = 1 if size is None else int(size)
    out = np.empty((n, 3))
    filled = 0
    while filled < n:
        need = n - filled
        u = rng.uniform(-1.0, 1.0, size=(2 * need + 8, 2))
        s = (u**2).sum(axis=1)
        u, s = u[(s < 1.0) & (s > 0.0)][:need], s[(s < 1.0) & (s > 0.0)][:need]
        root = np.sqrt(1.0 - s)
        k = len(s)
        out[filled : filled + k, 0] = 2.0 * u[:, 0] * root
        out[filled : filled + k, 1] = 2.0 * u[:, 1] * root
        out[filled : filled + k, 2] = -np.abs(1.0 - 2.0 * s)
        filled += k
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    return out[0] if size is None else out


def face_camera(normals: np.ndarray, rays: np.ndarray) -> np.ndarray:
    """Flip normals so they point against the viewing rays."""
    dot = np.einsum("...k,...k->...", normals, rays)
    return np.where((dot > 0)[..., None], -normals, normals)


def transform_plane(
    normal: np.ndarray, offset, src_to_dst_R: np.ndarray, src_to_dst_t: np.ndarray
):
    """Re-express plane ``n . X + D = 0`` after ``X' = R X + t``."""
    n2 = np.asarray(normal) @ src_to_dst_R.T
    return n2, np.asarray(offset) - np.einsum("...k,k->...", n2, src_to_dst_t)


def transform_hypothesis(
    h: PlaneHypothesis, pixel: tuple[float, float], src: CameraView, dst: CameraView
) -> TransformedHypothesis:
    """Carry the hypothesis at ``pixel`` of ``src`` into ``dst``.

    Returns the real-valued ``dst`` pixel, the depth of the backprojected
    point in ``dst`` and the normal in ``dst``'s frame. Projections outside
    the image are flagged with ``in_bounds=False`` rather than raised.
    """
    ray = pixel_ray(src, *pixel)
    d = depth_from_plane(h, ray)
    X = camera_to_world(src, ray.direction * d)
    Xd = world_to_camera(dst, X)
    if Xd[2] <= 0:
        raise BehindCameraError(f"point has depth {Xd[2]:.6g} in target view")
    x, y, z = project(dst, Xd)
    R, _ = relative_pose(src, dst)
    n = R @ h.normal
    return TransformedHypothesis((float(x), float(y)), float(z), n, bool(in_image(dst, x, y)))
