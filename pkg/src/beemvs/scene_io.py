"""Calibrated view containers and on-disk formats.

Dataset layout::

    <scene>/images/NNNN.png   (or .pgm)
    <scene>/cameras/NNNN.txt

A camera file holds eight lines of whitespace-separated decimals: three rows
of K, three rows of R (world to camera), one line with t and one line with
``d_min d_max``.

Depth/normal maps use the ``DNM1`` binary layout: magic, little-endian
uint32 width and height, then float32 planes (depth, nx, ny, nz, fitness)
in row-major order, then one byte per pixel for the validated flag.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".pgm")
MAP_MAGIC = b"DNM1"
LUMA = np.array([0.299, 0.587, 0.114])


class SceneIOError(Exception):
    """Base class for dataset and file format errors."""


class DatasetError(SceneIOError):
    pass


class CameraParseError(SceneIOError):
    def __init__(self, path: Path | str, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.path = Path(path)
        self.line = line


class CameraValidationError(SceneIOError):
    pass


class MapFormatError(SceneIOError):
    pass


class MapLengthError(SceneIOError):
    pass


class ExportError(SceneIOError):
    def __init__(self, index: int, msg: str):
        super().__init__(f"point {index}: {msg}")
        self.index = index


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class CameraView:
    """A calibrated pinhole view.

    ``image`` is the grayscale intensity grid in [0, 1] used for matching.
    ``color`` is the optional uint8 RGB image kept for point coloring.
    """

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    image: np.ndarray
    depth_range: tuple[float, float]
    name: str = ""
    color: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.image = np.asarray(self.image, dtype=np.float64)
        self.depth_range = (float(self.depth_range[0]), float(self.depth_range[1]))
        validate_camera(self.K, self.R, self.depth_range, self.width, self.height)

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        return int(self.image.shape[1])

    @property
    def K_inv(self) -> np.ndarray:
        return np.linalg.inv(self.K)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def rgb(self) -> np.ndarray:
        """uint8 RGB image; falls back to replicated grayscale."""
        if self.color is not None:
            return self.color
        g = np.clip(np.round(self.image * 255.0), 0, 255).astype(np.uint8)
        return np.repeat(g[..., None], 3, axis=2)


@dataclass
class SceneDataset:
    views: list[CameraView]
    name: str = ""

    def __post_init__(self) -> None:
        if len(self.views) < 2:
            raise DatasetError(f"dataset needs at least 2 views, got {len(self.views)}")

    def __len__(self) -> int:
        return len(self.views)


@dataclass
class DepthNormalMap:
    """Dense per-view estimate. Normals live in the view's camera frame."""

    depth: np.ndarray
    normal: np.ndarray
    validated: np.ndarray
    fitness: np.ndarray

    @property
    def height(self) -> int:
        return int(self.depth.shape[0])

    @property
    def width(self) -> int:
        return int(self.depth.shape[1])

    @classmethod
    def empty(cls, width: int, height: int) -> DepthNormalMap:
        normal = np.zeros((height, width, 3))
        normal[..., 2] = -1.0
        return cls(
            depth=np.zeros((height, width)),
            normal=normal,
            validated=np.zeros((height, width), dtype=bool),
            fitness=np.zeros((height, width)),
        )


def validate_camera(
    K: np.ndarray,
    R: np.ndarray,
    depth_range: tuple[float, float],
    width: int,
    height: int,
    tol: float = 1e-9,
) -> None:
    if not np.allclose(R @ R.T, np.eye(3), rtol=0.0, atol=tol):
        raise CameraValidationError("rotation is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > tol:
        raise CameraValidationError("rotation determinant is not +1")
    fx, fy, cx, cy = K[0, 0], K[1, 1], K[0, 2], K[1, 2]
    if not (fx > 0 and fy > 0):
        raise CameraValidationError(f"focal lengths must be positive, got {fx}, {fy}")
    if not (0 <= cx < width and 0 <= cy < height):
        raise CameraValidationError(
            f"principal point ({cx}, {cy}) outside {width}x{height} image"
        )
    d_min, d_max = depth_range
    if not (0 < d_min < d_max):
        raise CameraValidationError(f"invalid depth range [{d_min}, {d_max}]")


# ---------------------------------------------------------------------------
# Images and cameras
# ---------------------------------------------------------------------------


def to_gray(rgb: np.ndarray) -> np.ndarray:
    """Luma conversion of a uint8 RGB (or gray) array to floats in [0, 1]."""
    rgb = np.asarray(rgb)
    if rgb.ndim == 2:
        return rgb.astype(np.float64) / 255.0
    return (rgb[..., :3].astype(np.float64) @ LUMA) / 255.0


def read_image(path: Path | str) -> np.ndarray:
    """Read an image as uint8 RGB."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_image(path: Path | str, rgb: np.ndarray) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(path)


def format_camera(K: np.ndarray, R: np.ndarray, t: np.ndarray, depth_range) -> str:
    rows = [*np.asarray(K).reshape(3, 3), *np.asarray(R).reshape(3, 3), np.asarray(t)]
    rows.append(np.asarray(depth_range, dtype=np.float64))
    # repr() of a float round-trips exactly
    return "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in rows)


def parse_camera(text: str, path: Path | str = "<camera>"):
    """Parse camera text into ``(K, R, t, (d_min, d_max))``."""
    lines = [ln for ln in text.splitlines()]
    expected = [3, 3, 3, 3, 3, 3, 3, 2]
    values: list[list[float]] = []
    for i, n in enumerate(expected):
        if i >= len(lines):
            raise CameraParseError(path, i + 1, "unexpected end of file")
        parts = lines[i].split()
        if len(parts) != n:
            raise CameraParseError(path, i + 1, f"expected {n} values, got {len(parts)}")
        try:
            row = [float(p) for p in parts]
        except ValueError as exc:
            raise CameraParseError(path, i + 1, str(exc)) from None
        if not all(math.isfinite(v) for v in row):
            raise CameraParseError(path, i + 1, "non-finite value")
        values.append(row)
    extra = [ln for ln in lines[len(expected):] if ln.strip()]
    if extra:
        raise CameraParseError(path, len(expected) + 1, "trailing content")
    K = np.array(values[0:3])
    R = np.array(values[3:6])
    t = np.array(values[6])
    return K, R, t, (values[7][0], values[7][1])


def write_camera(path: Path | str, view: CameraView) -> None:
    Path(path).write_text(format_camera(view.K, view.R, view.t, view.depth_range))


def read_camera(path: Path | str):
    path = Path(path)
    return parse_camera(path.read_text(), path)


def load_dataset(path: Path | str) -> SceneDataset:
    """Load ``images/`` and ``cameras/`` from a scene directory."""
    root = Path(path)
    img_dir, cam_dir = root / "images", root / "cameras"
    if not img_dir.is_dir() or not cam_dir.is_dir():
        raise DatasetError(f"{root} must contain images/ and cameras/ subdirectories")
    images = sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    views = []
    for img_path in images:
        stem = img_path.stem
        cam_path = cam_dir / f"{stem}.txt"
        if not cam_path.exists():
            raise DatasetError(f"missing camera file for image {stem!r}")
        K, R, t, depth_range = read_camera(cam_path)
        rgb = read_image(img_path)
        views.append(
            CameraView(K, R, t, to_gray(rgb), depth_range, name=stem, color=rgb)
        )
    logger.debug("loaded %d views from %s", len(views), root)
    return SceneDataset(views, name=root.name)


def save_dataset(dataset: SceneDataset, path: Path | str) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "cameras").mkdir(parents=True, exist_ok=True)
    for i, view in enumerate(dataset.views):
        stem = view.name or f"{i:04d}"
        write_image(root / "images" / f"{stem}.png", view.rgb())
        write_camera(root / "cameras" / f"{stem}.txt", view)


# ---------------------------------------------------------------------------
# Depth/normal maps
# ---------------------------------------------------------------------------


def map_to_bytes(m: DepthNormalMap) -> bytes:
    h, w = m.depth.shape
    planes = np.stack(
        [m.depth, m.normal[..., 0], m.normal[..., 1], m.normal[..., 2], m.fitness]
    ).astype("<f4")
    flags = np.asarray(m.validated, dtype=np.uint8)
    return MAP_MAGIC + struct.pack("<II", w, h) + planes.tobytes() + flags.tobytes()


def map_from_bytes(data: bytes) -> DepthNormalMap:
    if len(data) < 12:
        raise MapLengthError(f"header needs 12 bytes, got {len(data)}")
    if data[:4] != MAP_MAGIC:
        raise MapFormatError(f"bad magic {data[:4]!r}")
    w, h = struct.unpack("<II", data[4:12])
    n = w * h
    expected = 12 + 5 * 4 * n + n
    if len(data) != expected:
        raise MapLengthError(f"expected {expected} bytes for {w}x{h} map, got {len(data)}")
    planes = np.frombuffer(data, dtype="<f4", count=5 * n, offset=12).reshape(5, h, w)
    flags = np.frombuffer(data, dtype=np.uint8, count=n, offset=12 + 20 * n).reshape(h, w)
    planes = planes.astype(np.float32)
    return DepthNormalMap(
        depth=planes[0].copy(),
        normal=np.stack([planes[1], planes[2], planes[3]], axis=-1),
        validated=flags.astype(bool),
        fitness=planes[4].copy(),
    )


def save_map(m: DepthNormalMap, path: Path | str) -> None:
    Path(path).write_bytes(map_to_bytes(m))


def load_map(path: Path | str) -> DepthNormalMap:
    return map_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Point clouds
# ---------------------------------------------------------------------------


@dataclass
class FusedPointCloud:
    positions: np.ndarray
    normals: np.ndarray
    colors: np.ndarray
    support: np.ndarray

    def __len__(self) -> int:
        return int(self.positions.shape[0])

    @classmethod
    def empty(cls) -> FusedPointCloud:
        return cls(
            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3), np.uint8), np.zeros(0, int)
        )


def export_ply(cloud: FusedPointCloud, path: Path | str) -> None:
    """Write an ASCII PLY with position, normal and RGB per vertex."""
    pos = np.asarray(cloud.positions, dtype=np.float64).reshape(-1, 3)
    nrm = np.asarray(cloud.normals, dtype=np.float64).reshape(-1, 3)
    col = np.asarray(cloud.colors).reshape(-1, 3)
    bad = ~np.isfinite(pos).all(axis=1) | ~np.isfinite(nrm).all(axis=1)
    if bad.any():
        raise ExportError(int(np.argmax(bad)), "non-finite coordinate")
    header = (
        "ply\nformat ascii 1.0\n"
        f"element vertex {len(pos)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "property double nx\nproperty double ny\nproperty double nz\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    with open(path, "w") as f:
        f.write(header)
        for p, n, c in zip(pos, nrm, col):
            f.write(
                # 17 significant digits round-trip doubles exactly
                f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} {n[0]:.17g} {n[1]:.17g} {n[2]:.17g} "
                f"{int(c[0])} {int(c[1])} {int(c[2])}\n"
            )


def read_ply(path: Path | str) -> FusedPointCloud:
    """Read back a PLY written by :func:`export_ply`."""
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise MapFormatError(f"{path} is not a PLY file")
        count = None
        for line in f:
            line = line.strip()
            if line.startswith("element vertex"):
                count = int(line.split()[2])
            if line == "end_header":
                break
        if count is None:
            raise MapFormatError(f"{path}: no vertex element")
        rows = [f.readline().split() for _ in range(count)]
    if any(len(r) != 9 for r in rows):
        raise MapLengthError(f"{path}: truncated vertex list")
    arr = np.array(rows, dtype=np.float64).reshape(-1, 9)
    return FusedPointCloud(
        arr[:, 0:3], arr[:, 3:6], arr[:, 6:9].astype(np.uint8), np.zeros(count, int)
    )
