from __future__ import annotations

import math

import numpy as np
import pytest

from beemvs.scene_io import CameraView
from beemvs.synthgen import look_at, make_plane_scene


def rotation(axis, angle_deg: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    axis = np.asarray(axis, float)
    axis = axis / np.linalg.norm(axis)
    a = math.radians(angle_deg)
    Kx = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(a) * Kx + (1 - math.cos(a)) * Kx @ Kx


def make_camera(
    center=(0.0, 0.0, 0.0),
    target=(0.0, 0.0, 2.0),
    size=(64, 48),
    focal=80.0,
    image=None,
    depth_range=(0.5, 5.0),
    name="",
) -> CameraView:
    w, h = size
    K = np.array([[focal, 0, (w - 1) / 2], [0, focal * 1.1, (h - 1) / 2], [0, 0, 1.0]])
    R, t = look_at(np.asarray(center, float), np.asarray(target, float))
    if image is None:
        image = np.random.default_rng(0).uniform(0, 1, (h, w))
    return CameraView(K, R, t, image, depth_range, name=name)


def random_pose(rng: np.random.Generator, target=(0.0, 0.0, 3.0), radius=1.0):
    """Camera center near the origin looking roughly at ``target``."""
    center = rng.uniform(-radius, radius, 3) * np.array([1.0, 1.0, 0.3])
    aim = np.asarray(target) + rng.uniform(-0.3, 0.3, 3)
    return center, aim


@pytest.fixture(scope="session")
def small_plane_scene():
    """5 views of a textured plane at 48x36 pixels."""
    return make_plane_scene(n_views=5, resolution=(48, 36), rng=0)


# ---------------------------------------------------------------------------
# Acceptance summary
# ---------------------------------------------------------------------------

# criterion number -> list of (passed, detail) entries recorded by test_acceptance
ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        entries = ACCEPTANCE[n]
        ok = all(p for p, _ in entries)
        detail = "; ".join(d for _, d in entries)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
