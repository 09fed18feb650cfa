"""Cycle orchestration: view selection, colony optimisation, validation, fusion.

Random streams are keyed by ``(seed, view, cycle, iteration, phase)``, and
every phase draws whole-grid arrays from its own stream. Outputs therefore
depend only on the dataset, the configuration and the seed, not on thread
counts or scheduling.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields, is_dataclass, replace
from typing import Any

import numba
import numpy as np

from .ambc import AmbcConfig, ColonyGrid, init_colonies, reevaluate, run_iteration
from .consistency import ConsistencyConfig, inter_image_propagate, validate_map
from .fusion import FusedPointCloud, FusionConfig, fuse
from .matching import MatchingConfig, PlaneEvaluator, ReferencePatches
from .scene_io import DepthNormalMap, SceneDataset
from .view_selection import (
    ViewSelectionConfig,
    bit_count,
    incident_filter,
    triangulation_filter,
    visibility_filter,
)

logger = logging.getLogger(__name__)

_PHASES = {"init": 0, "employed": 1, "red": 2, "black": 3, "scout": 4}


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    matching: MatchingConfig = MatchingConfig()
    ambc: AmbcConfig = AmbcConfig()
    consistency: ConsistencyConfig = ConsistencyConfig()
    fusion: FusionConfig = FusionConfig()
    view_selection: ViewSelectionConfig = ViewSelectionConfig()
    cycles: int = 3
    seed: int = 0
    threads: int = 1
    inter_prop: bool = True
    # stop once the validated fraction moves by less than this many percentage points
    early_stop: float = 0.5

    def __post_init__(self) -> None:
        if self.cycles < 1:
            raise ValueError("cycles must be at least 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if is_dataclass(v):
                out[f.name] = {g.name: _plain(getattr(v, g.name)) for g in fields(v)}
            else:
                out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PipelineConfig:
        """Build from a nested mapping; unknown keys raise ``ValueError``."""
        kwargs: dict[str, Any] = {}
        sections = {f.name: f for f in fields(cls)}
        for key, value in data.items():
            if key not in sections:
                raise ValueError(f"unknown config key {key!r}")
            default = getattr(cls(), key)
            if is_dataclass(default):
                if not isinstance(value, dict):
                    raise ValueError(f"config section {key!r} must be a mapping")
                known = {g.name for g in fields(default)}
                bad = set(value) - known
                if bad:
                    raise ValueError(f"unknown keys in {key!r}: {sorted(bad)}")
                if key == "ambc" and "offsets" in value:
                    value = {**value, "offsets": tuple(tuple(o) for o in value["offsets"])}
                kwargs[key] = replace(default, **value)
            else:
                kwargs[key] = value
        return cls(**kwargs)


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


@dataclass
class CycleRecord:
    cycle: int
    validated_fraction: float
    per_view: list[float]
    injected: list[int] = field(default_factory=list)
    seconds: float = 0.0


@dataclass
class PipelineResult:
    maps: list[DepthNormalMap]
    cloud: FusedPointCloud
    history: list[CycleRecord]
    view_sets: list[np.ndarray]

    def cycles_to_reach(self, fraction: float) -> int | None:
        """First cycle count (1-based) whose validated fraction reaches ``fraction``."""
        for rec in self.history:
            if rec.validated_fraction >= fraction:
                return rec.cycle + 1
        return None


def phase_rng(seed: int, view: int, cycle: int, iteration: int, phase: str) -> np.random.Generator:
    return np.random.default_rng([seed, view, cycle, iteration, _PHASES[phase]])


def set_threads(n: int) -> int:
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


class _Views:
    """Per-view evaluators with source sets shared by reference."""

    def __init__(self, dataset: SceneDataset, cfg: PipelineConfig):
        self.dataset = dataset
        self.cfg = cfg
        views = dataset.views
        self.baseline = [triangulation_filter(i, views, cfg=cfg.view_selection) for i in range(len(views))]
        for i, b in enumerate(self.baseline):
            if bit_count(np.array([b]))[0] == 0:
                raise PipelineError(
                    f"view {views[i].name or i}: no source view within the triangulation "
                    f"range [{cfg.view_selection.tri_min}, {cfg.view_selection.tri_max}] deg"
                )
        self.sets = [np.full((v.height, v.width), b, dtype=np.int64) for v, b in zip(views, self.baseline)]
        self._evaluators: dict[int, PlaneEvaluator] = {}

    def evaluator(self, i: int) -> PlaneEvaluator:
        ev = self._evaluators.get(i)
        if ev is None:
            patches = ReferencePatches(self.dataset.views[i].image, self.cfg.matching)
            ev = PlaneEvaluator(self.dataset, i, self.sets[i], self.cfg.matching, patches)
            self._evaluators[i] = ev
        return ev


def _refresh_sets(
    i: int, state: _Views, grid: ColonyGrid, maps: list[DepthNormalMap | None], cfg: PipelineConfig
) -> bool:
    views = state.dataset.views
    new = np.full_like(state.sets[i], state.baseline[i])
    if cfg.view_selection.enabled:
        best = grid.to_map(cfg.ambc.smooth_reward)
        new = incident_filter(new, best.depth, best.normal, i, views, cfg.view_selection.incident_max)
        new = visibility_filter(new, best.depth, i, views, maps, cfg.consistency.t_depth)
    if np.array_equal(new, state.sets[i]):
        return False
    state.sets[i][:] = new
    return True


def _optimize_view(i: int, grid: ColonyGrid, ev: PlaneEvaluator, cycle: int, cfg: PipelineConfig) -> None:
    for it in range(cfg.ambc.iterations_per_cycle):
        rngs = {p: phase_rng(cfg.seed, i, cycle, it, p) for p in ("employed", "red", "black", "scout")}
        run_iteration(grid, cfg.ambc, ev, rngs)


def run_pipeline(dataset: SceneDataset, cfg: PipelineConfig = PipelineConfig()) -> PipelineResult:
    """Estimate depth/normal maps for every view and fuse them."""
    set_threads(cfg.threads)
    views = dataset.views
    n = len(views)
    state = _Views(dataset, cfg)
    reward = cfg.ambc.smooth_reward
    grids = [
        init_colonies(views[i], cfg.ambc, phase_rng(cfg.seed, i, 0, 0, "init"), state.evaluator(i))
        for i in range(n)
    ]
    maps: list[DepthNormalMap | None] = [None] * n
    history: list[CycleRecord] = []
    for cycle in range(cfg.cycles):
        t0 = time.perf_counter()
        # every view filters against the previous cycle's validated maps
        previous = list(maps)
        for i in range(n):
            ev = state.evaluator(i)
            if cycle > 0 and _refresh_sets(i, state, grids[i], previous, cfg):
                reevaluate(grids[i], ev)
            _optimize_view(i, grids[i], ev, cycle, cfg)
            maps[i] = grids[i].to_map(reward)
        consistent = []
        for i in range(n):
            validated, cons = validate_map(i, views, maps, state.sets[i], cfg.consistency)
            maps[i].validated = validated
            grids[i].mark_validated(validated, reward)
            consistent.append(cons)
        per_view = [float(m.validated.mean()) for m in maps]
        total = sum(int(m.validated.sum()) for m in maps) / sum(m.validated.size for m in maps)
        rec = CycleRecord(cycle, total, per_view)
        if cfg.inter_prop and cycle < cfg.cycles - 1:
            rec.injected = inter_image_propagate(views, grids, maps, consistent, state.sets, state.evaluator)
        rec.seconds = time.perf_counter() - t0
        history.append(rec)
        logger.info(
            "cycle %d: validated %.1f%% (%.1fs)", cycle + 1, 100 * total, rec.seconds
        )
        if len(history) > 1 and abs(total - history[-2].validated_fraction) * 100 < cfg.early_stop:
            break
    cloud = fuse(dataset, maps, cfg.fusion)
    return PipelineResult(maps, cloud, history, [s.copy() for s in state.sets])


def estimate_view(dataset: SceneDataset, index: int, cfg: PipelineConfig = PipelineConfig()) -> DepthNormalMap:
    """Optimise a single reference view without cross-view validation.

    Only the triangulation and incident-angle filters apply, since no other
    view has a map to check against; the returned map is unvalidated.
    """
    set_threads(cfg.threads)
    state = _Views(dataset, cfg)
    ev = state.evaluator(index)
    grid = init_colonies(dataset.views[index], cfg.ambc, phase_rng(cfg.seed, index, 0, 0, "init"), ev)
    no_maps: list[DepthNormalMap | None] = [None] * len(dataset.views)
    for cycle in range(cfg.cycles):
        if cycle > 0 and _refresh_sets(index, state, grid, no_maps, cfg):
            reevaluate(grid, ev)
        _optimize_view(index, grid, ev, cycle, cfg)
    return grid.to_map(cfg.ambc.smooth_reward)
