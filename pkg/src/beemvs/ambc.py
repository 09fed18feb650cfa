"""Per-pixel bee colonies over plane hypotheses.

Every pixel of a reference view owns a colony of ``food_number`` plane
hypotheses ``(n, D)`` in that view's camera frame. The three bee phases are
applied to all colonies at once: the proposal step is vectorised in numpy
and candidate fitness comes from an evaluator callable
``(ys, xs, normals, offsets) -> fitness`` (see
:class:`beemvs.matching.PlaneEvaluator`). Evaluators return a negative value
for geometrically invalid hypotheses; such candidates are never accepted.

All randomness is drawn as whole-grid arrays from the generator handed to
each phase, so results do not depend on how the evaluator parallelises.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .geometry import face_camera, offset_from_depth, pixel_grid_rays, sample_hemisphere_normal
from .scene_io import CameraView, DepthNormalMap

Evaluator = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]

RED, BLACK = 0, 1

DEFAULT_OFFSETS: tuple[tuple[int, int], ...] = (
    (0, 1), (0, -1), (1, 0), (-1, 0),
    (1, 2), (1, -2), (-1, 2), (-1, -2),
    (2, 1), (2, -1), (-2, 1), (-2, -1),
    (0, 5), (0, -5), (5, 0), (-5, 0),
)


@dataclass(frozen=True)
class AmbcConfig:
    food_number: int = 10
    trial_limit: int = 10
    smooth_reward: float = 0.01
    offsets: tuple[tuple[int, int], ...] = DEFAULT_OFFSETS
    iterations_per_cycle: int = 8

    def __post_init__(self) -> None:
        if self.food_number < 2:
            raise ValueError("food_number must be at least 2")
        if self.trial_limit < 0 or self.smooth_reward < 0:
            raise ValueError("trial_limit and smooth_reward must be non-negative")
        if not self.offsets:
            raise ValueError("offsets must not be empty")
        for dx, dy in self.offsets:
            if (dx + dy) % 2 == 0:
                raise ValueError(f"offset ({dx}, {dy}) does not switch checkerboard color")
        if self.iterations_per_cycle < 1:
            raise ValueError("iterations_per_cycle must be positive")


@dataclass
class FoodSource:
    normal: np.ndarray
    offset: float
    fitness: float
    trial: int
    validated: bool


@dataclass
class Colony:
    pixel: tuple[int, int]
    sources: list[FoodSource]
    color: int


@dataclass
class ColonyGrid:
    """Colonies of one reference view, stored as ``(H, W, F)`` arrays."""

    normals: np.ndarray
    offsets: np.ndarray
    fitness: np.ndarray
    trial: np.ndarray
    validated: np.ndarray
    rays: np.ndarray
    depth_range: tuple[float, float]
    ys: np.ndarray = field(init=False, repr=False)
    xs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        h, w = self.shape
        self.ys, self.xs = np.mgrid[0:h, 0:w]

    @property
    def shape(self) -> tuple[int, int]:
        return self.offsets.shape[0], self.offsets.shape[1]

    @property
    def food_number(self) -> int:
        return self.offsets.shape[2]

    def copy(self) -> ColonyGrid:
        return ColonyGrid(
            self.normals.copy(), self.offsets.copy(), self.fitness.copy(),
            self.trial.copy(), self.validated.copy(), self.rays, self.depth_range,
        )

    def colony(self, x: int, y: int) -> Colony:
        sources = [
            FoodSource(
                self.normals[y, x, k].copy(), float(self.offsets[y, x, k]),
                float(self.fitness[y, x, k]), int(self.trial[y, x, k]),
                bool(self.validated[y, x, k]),
            )
            for k in range(self.food_number)
        ]
        return Colony((x, y), sources, (x + y) % 2)

    def best_index(self, reward: float = 0.0) -> np.ndarray:
        """Slot of each colony's best source.

        Ranked by fitness plus ``reward`` for validated sources; ties go to
        the lowest slot.
        """
        score = self.fitness + reward * self.validated
        return np.argmax(score, axis=-1)

    def depths(self) -> np.ndarray:
        denom = np.einsum("hwfk,hwk->hwf", self.normals, self.rays)
        with np.errstate(divide="ignore", invalid="ignore"):
            return -self.offsets / denom

    def to_map(self, reward: float = 0.0) -> DepthNormalMap:
        """Best hypothesis per pixel; ``validated`` is left all False."""
        b = self.best_index(reward)[..., None]
        n = np.take_along_axis(self.normals, b[..., None], axis=2)[:, :, 0]
        D = np.take_along_axis(self.offsets, b, axis=2)[..., 0]
        f = np.take_along_axis(self.fitness, b, axis=2)[..., 0]
        depth = -D / np.einsum("hwk,hwk->hw", n, self.rays)
        return DepthNormalMap(depth, n, np.zeros(self.shape, dtype=bool), np.clip(f, 0.0, None))

    def mark_validated(self, validated: np.ndarray, reward: float = 0.0) -> None:
        """Reset source flags; flag each colony's best source where ``validated``."""
        b = self.best_index(reward)
        self.validated[:] = False
        self.validated[self.ys, self.xs, b] = validated


def random_hypotheses(
    rays: np.ndarray, depth_range: tuple[float, float], rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Random camera-facing planes for the given rays, shape ``rays.shape[:-1]``."""
    shape = rays.shape[:-1]
    count = int(np.prod(shape))
    normals = sample_hemisphere_normal(rng, count).reshape(*shape, 3)
    normals = face_camera(normals, rays)
    depth = rng.uniform(depth_range[0], depth_range[1], size=shape)
    return normals, offset_from_depth(normals, depth, rays)


def _evaluate(evaluator: Evaluator, grid: ColonyGrid, sel, normals, offsets) -> np.ndarray:
    ys = np.broadcast_to(grid.ys[..., None], grid.offsets.shape)[sel]
    xs = np.broadcast_to(grid.xs[..., None], grid.offsets.shape)[sel]
    return np.asarray(evaluator(ys, xs, normals, offsets), dtype=np.float64)


def init_colonies(
    ref: CameraView, cfg: AmbcConfig, rng: np.random.Generator, evaluator: Evaluator
) -> ColonyGrid:
    """Random colonies for every pixel of ``ref``, evaluated once."""
    rays = pixel_grid_rays(ref)
    return init_grid(rays, ref.depth_range, cfg, rng, evaluator)


def init_grid(
    rays: np.ndarray,
    depth_range: tuple[float, float],
    cfg: AmbcConfig,
    rng: np.random.Generator,
    evaluator: Evaluator,
) -> ColonyGrid:
    h, w = rays.shape[:2]
    f = cfg.food_number
    rays_f = np.broadcast_to(rays[:, :, None, :], (h, w, f, 3))
    normals, offsets = random_hypotheses(rays_f, depth_range, rng)
    grid = ColonyGrid(
        normals, offsets, np.zeros((h, w, f)), np.zeros((h, w, f), dtype=np.int64),
        np.zeros((h, w, f), dtype=bool), rays, depth_range,
    )
    reevaluate(grid, evaluator)
    return grid


def reevaluate(grid: ColonyGrid, evaluator: Evaluator) -> None:
    """Recompute every stored fitness, e.g. after the view sets changed."""
    sel = np.ones(grid.offsets.shape, dtype=bool)
    f = _evaluate(evaluator, grid, sel, grid.normals.reshape(-1, 3), grid.offsets.ravel())
    grid.fitness[:] = np.clip(f, 0.0, None).reshape(grid.offsets.shape)


def _clamp_to_range(grid: ColonyGrid, normals: np.ndarray, offsets: np.ndarray, rays):
    """Renormalise, face the camera and clamp the induced depth into range.

    Returns the repaired parameters and a mask of candidates that could not be
    repaired (zero-length or grazing normals).
    """
    norm = np.linalg.norm(normals, axis=-1, keepdims=True)
    bad = norm[..., 0] < 1e-12
    normals = normals / np.where(norm < 1e-12, 1.0, norm)
    normals = face_camera(normals, rays)
    nd = np.einsum("...k,...k->...", normals, rays)
    bad |= nd > -1e-9
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = -offsets / nd
    d_min, d_max = grid.depth_range
    depth = np.where(np.isfinite(depth) & (depth > 0), depth, d_min)
    depth = np.clip(depth, d_min, d_max)
    return normals, -depth * nd, bad


def employed_phase(
    grid: ColonyGrid, evaluator: Evaluator, rng: np.random.Generator
) -> ColonyGrid:
    """Perturb each source towards or away from a random colony partner.

    One of the four parameters (three normal components, plane offset) is
    moved by ``R(-1, 1) * (partner - self)``; the candidate replaces the
    source only if its fitness is strictly higher.
    """
    h, w, f = grid.offsets.shape
    slot = np.arange(f)
    k = rng.integers(0, f - 1, size=(h, w, f))
    partner = k + (k >= slot)
    param = rng.integers(0, 4, size=(h, w, f))
    phi = rng.uniform(-1.0, 1.0, size=(h, w, f))

    params = np.concatenate([grid.normals, grid.offsets[..., None]], axis=-1)
    other = np.take_along_axis(params, partner[..., None], axis=2)
    cur = np.take_along_axis(params, param[..., None], axis=3)[..., 0]
    oth = np.take_along_axis(other, param[..., None], axis=3)[..., 0]
    new_val = cur + phi * (oth - cur)
    changed = new_val != cur

    cand = params[changed].copy()
    cand[np.arange(cand.shape[0]), param[changed]] = new_val[changed]
    rays = np.broadcast_to(grid.rays[:, :, None, :], (h, w, f, 3))[changed]
    normals, offsets, bad = _clamp_to_range(grid, cand[:, :3], cand[:, 3], rays)

    new_fit = np.full(cand.shape[0], -1.0)
    ok = ~bad
    sel = changed.copy()
    sel[changed] = ok
    new_fit[ok] = _evaluate(evaluator, grid, sel, normals[ok], offsets[ok])

    better = np.zeros((h, w, f), dtype=bool)
    better[changed] = new_fit > grid.fitness[changed]
    idx = better[changed]
    grid.normals[better] = normals[idx]
    grid.offsets[better] = offsets[idx]
    grid.fitness[better] = new_fit[idx]
    grid.validated[better] = False
    grid.trial[better] = 0
    grid.trial[~better] += 1
    return grid


def onlooker_phase(
    grid: ColonyGrid,
    color: int,
    cfg: AmbcConfig,
    evaluator: Evaluator,
    rng: np.random.Generator,
) -> ColonyGrid:
    """Pull each ``color`` colony towards the best source of a checkerboard neighbour.

    Neighbours are drawn from ``cfg.offsets``, so they always have the other
    color and stay unchanged during this call. A validated neighbour source
    competes with its fitness plus ``cfg.smooth_reward``; the stored fitness
    is always the raw value. The colony's top raw fitness never drops.
    """
    h, w, f = grid.offsets.shape
    offs = np.asarray(cfg.offsets, dtype=np.int64)
    pick = rng.integers(0, len(offs), size=(h, w))
    slot = rng.integers(0, f, size=(h, w))

    ys, xs = grid.ys, grid.xs
    ny = ys + offs[pick, 1]
    nx = xs + offs[pick, 0]
    active = ((xs + ys) % 2 == color) & (nx >= 0) & (nx < w) & (ny >= 0) & (ny < h)
    if not active.any():
        return grid
    ay, ax = ys[active], xs[active]
    by, bx = ny[active], nx[active]
    nb = grid.best_index(cfg.smooth_reward)[by, bx]
    cand_n = grid.normals[by, bx, nb]
    cand_d = grid.offsets[by, bx, nb]
    cand_v = grid.validated[by, bx, nb]

    f_new = np.asarray(evaluator(ay, ax, cand_n, cand_d), dtype=np.float64)
    s = slot[active]
    cur = grid.fitness[ay, ax, s]
    raw_best = np.argmax(grid.fitness[ay, ax], axis=-1)
    score = f_new + cfg.smooth_reward * cand_v
    accept = (f_new >= 0) & (score > cur) & ((s != raw_best) | (f_new >= cur))

    ty, tx, ts = ay[accept], ax[accept], s[accept]
    grid.normals[ty, tx, ts] = cand_n[accept]
    grid.offsets[ty, tx, ts] = cand_d[accept]
    grid.fitness[ty, tx, ts] = f_new[accept]
    grid.validated[ty, tx, ts] = cand_v[accept]
    grid.trial[ty, tx, ts] = 0
    grid.trial[ay[~accept], ax[~accept], s[~accept]] += 1
    return grid


def scout_phase(
    grid: ColonyGrid, cfg: AmbcConfig, evaluator: Evaluator, rng: np.random.Generator
) -> ColonyGrid:
    """Restart exhausted sources (trial above the limit) from random hypotheses.

    The colony's best source, by raw and by rewarded fitness, is never touched.
    """
    h, w, f = grid.offsets.shape
    rays_f = np.broadcast_to(grid.rays[:, :, None, :], (h, w, f, 3))
    normals, offsets = random_hypotheses(rays_f, grid.depth_range, rng)
    keep = np.zeros((h, w, f), dtype=bool)
    keep[grid.ys, grid.xs, grid.best_index(cfg.smooth_reward)] = True
    keep[grid.ys, grid.xs, grid.best_index(0.0)] = True
    sel = (grid.trial > cfg.trial_limit) & ~keep
    if not sel.any():
        return grid
    fit = _evaluate(evaluator, grid, sel, normals[sel], offsets[sel])
    grid.normals[sel] = normals[sel]
    grid.offsets[sel] = offsets[sel]
    grid.fitness[sel] = np.clip(fit, 0.0, None)
    grid.trial[sel] = 0
    grid.validated[sel] = False
    return grid


def run_iteration(
    grid: ColonyGrid, cfg: AmbcConfig, evaluator: Evaluator, rngs: dict[str, np.random.Generator]
) -> ColonyGrid:
    """One employed / onlooker-red / onlooker-black / scout sweep."""
    employed_phase(grid, evaluator, rngs["employed"])
    onlooker_phase(grid, RED, cfg, evaluator, rngs["red"])
    onlooker_phase(grid, BLACK, cfg, evaluator, rngs["black"])
    scout_phase(grid, cfg, evaluator, rngs["scout"])
    return grid
