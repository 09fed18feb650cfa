"""Synthetic calibrated scenes with exact ground truth.

Scenes are made of textured quads and spheres seen by pinhole cameras placed
on a cone around a common look-at point. A single ray caster produces both
the images and the ground-truth depth/normal maps, so the texture value at a
pixel is always sampled at the very point that defines its depth.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .scene_io import (
    CameraView,
    DepthNormalMap,
    SceneDataset,
    load_dataset,
    load_map,
    save_dataset,
    save_map,
    to_gray,
)


# ---------------------------------------------------------------------------
# Textures and primitives
# ---------------------------------------------------------------------------


@dataclass
class Texture:
    """Procedural intensity pattern evaluated at world points.

    ``noise`` is a sum of random plane waves with wavelengths in
    ``[wavelength_min, wavelength_max]`` (world units); ``checker`` uses
    ``square`` sized cells; ``constant`` returns ``value``.
    """

    kind: str = "noise"
    seed: int = 0
    value: float = 0.5
    square: float = 0.25
    wavelength_min: float = 0.08
    wavelength_max: float = 0.5
    waves: int = 32
    contrast: float = 0.4

    def __post_init__(self) -> None:
        if self.kind not in ("noise", "checker", "constant"):
            raise ValueError(f"unknown texture kind {self.kind!r}")

    def _waves(self):
        rng = np.random.default_rng(self.seed)
        d = rng.normal(size=(self.waves, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        lam = np.exp(rng.uniform(np.log(self.wavelength_min), np.log(self.wavelength_max), self.waves))
        k = d * (2 * np.pi / lam)[:, None]
        phase = rng.uniform(0, 2 * np.pi, self.waves)
        amp = rng.uniform(0.5, 1.0, self.waves)
        # the summed waves get a standard deviation of `contrast`
        return k, phase, amp * (self.contrast / np.sqrt((amp**2).sum() / 2))

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, float)
        if self.kind == "constant":
            return np.full(X.shape[:-1], self.value)
        if self.kind == "checker":
            cells = np.floor(X / self.square).astype(np.int64).sum(axis=-1)
            return np.where(cells % 2 == 0, 0.2, 0.8)
        k, phase, amp = self._waves()
        v = np.sin(X @ k.T + phase) @ amp
        return np.clip(0.5 + 0.5 * v, 0.0, 1.0)


@dataclass
class Quad:
    """Rectangle ``center + s*u + t*v`` with ``|s| <= half_u``, ``|t| <= half_v``.

    ``flat`` optionally names a sub-rectangle ``(s0, s1, t0, t1)`` rendered
    with ``flat_value`` instead of the texture.
    """

    center: np.ndarray
    u: np.ndarray
    v: np.ndarray
    half_u: float
    half_v: float
    texture: Texture = field(default_factory=Texture)
    albedo: tuple[float, float, float] = (1.0, 1.0, 1.0)
    flat: tuple[float, float, float, float] | None = None
    flat_value: float = 0.5

    def __post_init__(self) -> None:
        self.center = np.asarray(self.center, float)
        self.u = np.asarray(self.u, float) / np.linalg.norm(self.u)
        v = np.asarray(self.v, float)
        v = v - (v @ self.u) * self.u
        self.v = v / np.linalg.norm(v)

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.u, self.v)

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Ray parameter of the hit (``inf`` for misses); rays are ``origin + s*dirs``."""
        n = self.normal
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            s = ((self.center - origin) @ n) / denom
        P = origin + s[..., None] * dirs
        rel = P - self.center
        a, b = rel @ self.u, rel @ self.v
        hit = (np.abs(denom) > 1e-15) & (s > 1e-9)
        hit &= (np.abs(a) <= self.half_u) & (np.abs(b) <= self.half_v)
        return np.where(hit, s, np.inf)

    def normal_at(self, P: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.normal, P.shape).copy()

    def shade(self, P: np.ndarray) -> np.ndarray:
        val = self.texture(P)
        if self.flat is not None:
            val = np.where(self.in_flat(P), self.flat_value, val)
        return val

    def in_flat(self, P: np.ndarray) -> np.ndarray:
        if self.flat is None:
            return np.zeros(P.shape[:-1], dtype=bool)
        rel = P - self.center
        a, b = rel @ self.u, rel @ self.v
        s0, s1, t0, t1 = self.flat
        return (a >= s0) & (a <= s1) & (b >= t0) & (b <= t1)

    def distance(self, P: np.ndarray) -> np.ndarray:
        rel = np.asarray(P, float) - self.center
        a = np.clip(rel @ self.u, -self.half_u, self.half_u)
        b = np.clip(rel @ self.v, -self.half_v, self.half_v)
        closest = self.center + a[..., None] * self.u + b[..., None] * self.v
        return np.linalg.norm(P - closest, axis=-1)

    def to_dict(self) -> dict:
        return {
            "type": "quad", "center": self.center.tolist(), "u": self.u.tolist(),
            "v": self.v.tolist(), "half_u": self.half_u, "half_v": self.half_v,
            "texture": asdict(self.texture), "albedo": list(self.albedo),
            "flat": list(self.flat) if self.flat else None, "flat_value": self.flat_value,
        }


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    texture: Texture = field(default_factory=Texture)
    albedo: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        self.center = np.asarray(self.center, float)

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        oc = origin - self.center
        a = np.einsum("...k,...k->...", dirs, dirs)
        b = 2.0 * (dirs @ oc)
        c = oc @ oc - self.radius**2
        disc = b * b - 4 * a * c
        with np.errstate(invalid="ignore"):
            root = np.sqrt(disc)
            s0 = (-b - root) / (2 * a)
            s1 = (-b + root) / (2 * a)
        s = np.where(s0 > 1e-9, s0, s1)
        return np.where((disc >= 0) & (s > 1e-9), s, np.inf)

    def normal_at(self, P: np.ndarray) -> np.ndarray:
        n = P - self.center
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def shade(self, P: np.ndarray) -> np.ndarray:
        return self.texture(P)

    def in_flat(self, P: np.ndarray) -> np.ndarray:
        return np.zeros(P.shape[:-1], dtype=bool)

    def distance(self, P: np.ndarray) -> np.ndarray:
        return np.abs(np.linalg.norm(np.asarray(P, float) - self.center, axis=-1) - self.radius)

    def to_dict(self) -> dict:
        return {
            "type": "sphere", "center": self.center.tolist(), "radius": self.radius,
            "texture": asdict(self.texture), "albedo": list(self.albedo),
        }


Primitive = Quad | Sphere


def primitive_from_dict(d: dict) -> Primitive:
    tex = Texture(**d["texture"])
    if d["type"] == "quad":
        flat = tuple(d["flat"]) if d.get("flat") else None
        return Quad(d["center"], d["u"], d["v"], d["half_u"], d["half_v"], tex,
                    tuple(d["albedo"]), flat, d.get("flat_value", 0.5))
    if d["type"] == "sphere":
        return Sphere(d["center"], d["radius"], tex, tuple(d["albedo"]))
    raise ValueError(f"unknown primitive type {d['type']!r}")


def surface_distance(geometry: list[Primitive], P: np.ndarray) -> np.ndarray:
    """Distance from each point to the nearest primitive surface."""
    P = np.asarray(P, float).reshape(-1, 3)
    if not geometry:
        return np.full(len(P), np.inf)
    return np.min([g.distance(P) for g in geometry], axis=0)


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------


def look_at(center: np.ndarray, target: np.ndarray, down=(0.0, 1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera ``(R, t)`` for a camera at ``center`` looking at ``target``."""
    z = np.asarray(target, float) - center
    z /= np.linalg.norm(z)
    y = np.asarray(down, float) - (np.asarray(down) @ z) * z
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    R = np.stack([x, y, z])
    return R, -R @ center


def _pair_angle(alpha: float, dphi: float) -> float:
    c = math.cos(alpha) ** 2 + math.sin(alpha) ** 2 * math.cos(dphi)
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def cone_half_angle(n_views: int, max_pair: float = 28.0) -> float:
    """Cone half-angle (radians) keeping all pairwise view angles in [10, max_pair] degrees."""
    if n_views < 2:
        raise ValueError("need at least 2 views")
    if n_views == 2:
        return math.radians(10.0)
    dphi = 2 * math.pi / n_views
    far = math.pi if n_views % 2 == 0 else dphi * (n_views // 2)
    for adj in np.arange(14.0, 10.49, -0.5):
        s2 = (1 - math.cos(math.radians(adj))) / (1 - math.cos(dphi))
        alpha = math.asin(math.sqrt(s2))
        if _pair_angle(alpha, far) <= max_pair:
            return alpha
    raise ValueError(f"cannot place {n_views} views with pairwise angles in [10, {max_pair}] degrees")


def cone_rig(
    n_views: int, target: np.ndarray, distance: float, resolution: tuple[int, int], focal: float
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """``(K, R, t)`` for cameras on a cone around the +z axis, all looking at ``target``."""
    w, h = resolution
    K = np.array([[focal, 0.0, (w - 1) / 2.0], [0.0, focal, (h - 1) / 2.0], [0.0, 0.0, 1.0]])
    alpha = cone_half_angle(n_views)
    out = []
    for k in range(n_views):
        phi = 2 * math.pi * k / n_views
        offset = np.array([math.sin(alpha) * math.cos(phi), math.sin(alpha) * math.sin(phi), -math.cos(alpha)])
        C = np.asarray(target, float) + distance * offset
        R, t = look_at(C, target)
        out.append((K.copy(), R, t))
    return out


# ---------------------------------------------------------------------------
# Ray casting
# ---------------------------------------------------------------------------


@dataclass
class RayHits:
    depth: np.ndarray
    normal: np.ndarray
    points: np.ndarray
    primitive: np.ndarray
    hit: np.ndarray


def _camera_rays(K: np.ndarray, R: np.ndarray, w: int, h: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:h, 0:w]
    pix = np.stack([xs, ys, np.ones_like(xs)], axis=-1).astype(float)
    d_cam = pix @ np.linalg.inv(K).T
    d_cam /= d_cam[..., 2:3]
    return d_cam, d_cam @ R  # world direction = R^T d_cam


def cast(geometry: list[Primitive], origin: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit parameter and primitive index (-1 on miss) per ray."""
    if not geometry:
        return np.full(dirs.shape[:-1], np.inf), np.full(dirs.shape[:-1], -1)
    s_all = np.stack([g.intersect(origin, dirs) for g in geometry])
    idx = np.argmin(s_all, axis=0)
    s = np.take_along_axis(s_all, idx[None], axis=0)[0]
    return s, np.where(np.isfinite(s), idx, -1)


def render_hits(geometry: list[Primitive], K, R, t, w: int, h: int) -> RayHits:
    C = -R.T @ t
    d_cam, d_world = _camera_rays(K, R, w, h)
    s, idx = cast(geometry, C, d_world)
    hit = idx >= 0
    # d_cam has z = 1, so the ray parameter is the camera depth
    depth = np.where(hit, s, 0.0)
    P = C + np.where(hit, s, 0.0)[..., None] * d_world
    normal = np.zeros((h, w, 3))
    normal[..., 2] = -1.0
    for k, g in enumerate(geometry):
        m = idx == k
        if m.any():
            n_world = g.normal_at(P[m])
            n_cam = n_world @ R.T
            flip = np.einsum("ij,ij->i", n_cam, d_cam[m]) > 0
            n_cam[flip] *= -1
            normal[m] = n_cam
    return RayHits(depth, normal, P, idx, hit)


def shade(geometry: list[Primitive], hits: RayHits) -> np.ndarray:
    """uint8 RGB image for the hits; misses are black."""
    h, w = hits.depth.shape
    rgb = np.zeros((h, w, 3))
    for k, g in enumerate(geometry):
        m = hits.primitive == k
        if m.any():
            rgb[m] = g.shade(hits.points[m])[:, None] * np.asarray(g.albedo)[None, :]
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def occlusion_mask(
    geometry: list[Primitive], hits: RayHits, cameras: list[tuple], self_index: int, w: int, h: int,
    rel_tol: float = 1e-6,
) -> np.ndarray:
    """Pixels whose visible point is inside another view's frame but hidden there."""
    mask = np.zeros(hits.depth.shape, dtype=bool)
    P = hits.points[hits.hit]
    for j, (K, R, t) in enumerate(cameras):
        if j == self_index:
            continue
        C = -R.T @ t
        Xc = P @ R.T + t
        with np.errstate(divide="ignore", invalid="ignore"):
            p = Xc @ K.T
            u, v = p[:, 0] / p[:, 2], p[:, 1] / p[:, 2]
        inside = (Xc[:, 2] > 0) & (np.rint(u) >= 0) & (np.rint(u) < w) & (np.rint(v) >= 0) & (np.rint(v) < h)
        dirs = P - C
        s, _ = cast(geometry, C, dirs)
        # the visible point itself sits at s = 1 along C + s * (P - C)
        hidden = inside & (s < 1.0 - rel_tol)
        mask[hits.hit] |= hidden
    return mask


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------


@dataclass
class SyntheticScene:
    dataset: SceneDataset
    geometry: list[Primitive]
    gt_maps: list[DepthNormalMap]
    occlusion: list[np.ndarray]
    regions: dict[str, list[np.ndarray]] = field(default_factory=dict)
    kind: str = ""

    @property
    def views(self) -> list[CameraView]:
        return self.dataset.views


def build_scene(
    geometry: list[Primitive],
    n_views: int,
    resolution: tuple[int, int],
    target: np.ndarray,
    distance: float,
    focal: float | None = None,
    kind: str = "",
    depth_margin: float = 1.1,
) -> SyntheticScene:
    w, h = resolution
    focal = focal if focal is not None else default_focal(resolution)
    cams = cone_rig(n_views, target, distance, resolution, focal)
    hits = [render_hits(geometry, K, R, t, w, h) for K, R, t in cams]
    # depth range symmetric about the look-at distance so the range midpoint is the target
    spread = max(float(np.abs(hh.depth[hh.hit] - distance).max()) for hh in hits if hh.hit.any())
    half = spread * depth_margin + 0.02 * distance
    depth_range = (max(distance - half, 0.05 * distance), distance + half)
    views, gts, occl, flats = [], [], [], []
    for i, ((K, R, t), hh) in enumerate(zip(cams, hits)):
        rgb = shade(geometry, hh)
        views.append(CameraView(K, R, t, to_gray(rgb), depth_range, name=f"{i:04d}", color=rgb))
        gts.append(DepthNormalMap(hh.depth, hh.normal, hh.hit.copy(), hh.hit.astype(float)))
        occl.append(occlusion_mask(geometry, hh, cams, i, w, h))
        flat = np.zeros((h, w), dtype=bool)
        for k, g in enumerate(geometry):
            m = hh.primitive == k
            flat[m] = g.in_flat(hh.points[m])
        flats.append(flat)
    regions = {"flat": flats} if any(f.any() for f in flats) else {}
    return SyntheticScene(SceneDataset(views, name=kind), geometry, gts, occl, regions, kind)


def default_focal(resolution: tuple[int, int]) -> float:
    return 1.5 * resolution[0]


def _noise(rng: np.random.Generator, distance: float, resolution: tuple[int, int]) -> Texture:
    # wavelengths of roughly 3.5 to 20 pixels at the look-at distance
    footprint = distance / default_focal(resolution)
    return Texture("noise", seed=int(rng.integers(2**31)),
                   wavelength_min=3.5 * footprint, wavelength_max=20.0 * footprint)


def _tilted_normal(tilt_x: float, tilt_y: float) -> np.ndarray:
    ax, ay = math.radians(tilt_x), math.radians(tilt_y)
    n = np.array([math.sin(ay) * math.cos(ax), math.sin(ax), -math.cos(ay) * math.cos(ax)])
    return n / np.linalg.norm(n)


def _plane_axes(normal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    u = np.cross([0.0, 1.0, 0.0], normal)
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    return u, v / np.linalg.norm(v)


def make_plane_scene(
    n_views: int = 5,
    resolution: tuple[int, int] = (160, 120),
    rng: np.random.Generator | int | None = 0,
    distance: float = 2.0,
) -> SyntheticScene:
    """One noise-textured slanted plane through the look-at point."""
    rng = np.random.default_rng(rng)
    target = np.array([0.0, 0.0, distance])
    normal = _tilted_normal(10.0, 20.0)
    u, v = _plane_axes(normal)
    tex = _noise(rng, distance, resolution)
    # cross(u, v) must equal the requested normal
    plane = Quad(target, u, v, 3 * distance, 3 * distance, tex, (0.9, 0.8, 0.6))
    return build_scene([plane], n_views, resolution, target, distance, kind="plane")


def make_occlusion_scene(
    n_views: int = 5,
    resolution: tuple[int, int] = (160, 120),
    rng: np.random.Generator | int | None = 0,
    distance: float = 2.0,
    occluder: bool = True,
) -> SyntheticScene:
    """Background plane partly hidden by a foreground quad in some views."""
    rng = np.random.default_rng(rng)
    target = np.array([0.0, 0.0, distance])
    bg_n = _tilted_normal(5.0, -10.0)
    u, v = _plane_axes(bg_n)
    background = Quad(target, u, v, 3 * distance, 3 * distance,
                      _noise(rng, distance, resolution), (0.6, 0.8, 0.9))
    geometry: list[Primitive] = [background]
    if occluder:
        # small enough that nearly every hidden pixel stays visible in two sources,
        # large enough to be validated in every view
        fg_center = np.array([0.0, 0.0, 0.6 * distance])
        geometry.append(
            Quad(fg_center, [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], 0.05 * distance, 0.1 * distance,
                 _noise(rng, distance, resolution), (0.9, 0.5, 0.4))
        )
    return build_scene(geometry, n_views, resolution, target, distance, kind="occlusion")


def make_textureless_scene(
    n_views: int = 5,
    resolution: tuple[int, int] = (160, 120),
    rng: np.random.Generator | int | None = 0,
    distance: float = 2.0,
    flat_half: float = 0.2,
) -> SyntheticScene:
    """Plane with a constant-intensity central rectangle and a noise-textured border.

    ``flat_half`` is the half-size of the flat rectangle as a fraction of
    ``distance``.
    """
    rng = np.random.default_rng(rng)
    target = np.array([0.0, 0.0, distance])
    normal = _tilted_normal(-8.0, 15.0)
    u, v = _plane_axes(normal)
    a = flat_half * distance
    plane = Quad(target, u, v, 3 * distance, 3 * distance,
                 _noise(rng, distance, resolution), (0.8, 0.9, 0.7),
                 flat=(-a, a, -0.75 * a, 0.75 * a), flat_value=0.5)
    return build_scene([plane], n_views, resolution, target, distance, kind="textureless")


SCENE_KINDS = {
    "plane": make_plane_scene,
    "occlusion": make_occlusion_scene,
    "textureless": make_textureless_scene,
}


# ---------------------------------------------------------------------------
# Disk layout
# ---------------------------------------------------------------------------


def save_scene(scene: SyntheticScene, path: Path | str) -> None:
    """Write images/, cameras/, gt/ maps and masks, plus scene.json."""
    root = Path(path)
    save_dataset(scene.dataset, root)
    gt = root / "gt"
    gt.mkdir(parents=True, exist_ok=True)
    for v, m in zip(scene.views, scene.gt_maps):
        save_map(m, gt / f"{v.name}.dnm")
    masks = {f"occlusion_{v.name}": o for v, o in zip(scene.views, scene.occlusion)}
    for key, ms in scene.regions.items():
        masks.update({f"{key}_{v.name}": m for v, m in zip(scene.views, ms)})
    np.savez_compressed(gt / "masks.npz", **masks)
    meta = {"kind": scene.kind, "geometry": [g.to_dict() for g in scene.geometry],
            "regions": sorted(scene.regions)}
    (root / "scene.json").write_text(json.dumps(meta, indent=2))


def load_scene(path: Path | str) -> SyntheticScene:
    root = Path(path)
    meta = json.loads((root / "scene.json").read_text())
    dataset = load_dataset(root)
    gts = [load_map(root / "gt" / f"{v.name}.dnm") for v in dataset.views]
    with np.load(root / "gt" / "masks.npz") as z:
        occl = [z[f"occlusion_{v.name}"] for v in dataset.views]
        regions = {k: [z[f"{k}_{v.name}"] for v in dataset.views] for k in meta["regions"]}
    geometry = [primitive_from_dict(d) for d in meta["geometry"]]
    return SyntheticScene(dataset, geometry, gts, occl, regions, meta["kind"])
