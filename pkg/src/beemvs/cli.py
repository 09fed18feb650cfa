"""Command-line interface: ``beemvs synth | reconstruct | depthmap | fuse | eval``.

Pipeline parameters come from three layers, later ones winning: built-in
defaults, an optional YAML file given with ``--config`` (nested exactly like
``PipelineConfig.to_dict()``), and individual flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any

import yaml

from .evaluation import evaluate
from .fusion import fuse
from .pipeline import PipelineConfig, PipelineError, estimate_view, run_pipeline
from .scene_io import SceneIOError, export_ply, load_dataset, load_map, read_ply, save_map
from .synthgen import SCENE_KINDS, load_scene, save_scene

logger = logging.getLogger("beemvs")

# flag destination -> (config section or None for top level, field name)
_FLAG_FIELDS: dict[str, tuple[str | None, str]] = {
    "food_number": ("ambc", "food_number"),
    "trial_limit": ("ambc", "trial_limit"),
    "iters": ("ambc", "iterations_per_cycle"),
    "smooth_reward": ("ambc", "smooth_reward"),
    "cycles": (None, "cycles"),
    "seed": (None, "seed"),
    "threads": (None, "threads"),
    "tri_min": ("view_selection", "tri_min"),
    "tri_max": ("view_selection", "tri_max"),
    "incident_max": ("view_selection", "incident_max"),
    "t_depth": ("consistency", "t_depth"),
    "t_normal": ("consistency", "t_normal"),
    "consistency_ratio": ("consistency", "min_ratio"),
    "fusion_rel_depth": ("fusion", "rel_depth"),
    "fusion_min_views": ("fusion", "min_views"),
    "window": ("matching", "window"),
    "window_step": ("matching", "step"),
}


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _pipeline_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("pipeline parameters")
    g.add_argument("--config", type=Path, help="YAML file mirroring PipelineConfig")
    g.add_argument("--food-number", type=int, help="food sources per pixel colony")
    g.add_argument("--trial-limit", type=int, help="failed trials before a scout restart")
    g.add_argument("--cycles", type=int, help="maximum number of cycles")
    g.add_argument("--iters", type=int, help="colony iterations per cycle")
    g.add_argument("--tri-min", type=float, help="minimum triangulation angle (deg)")
    g.add_argument("--tri-max", type=float, help="maximum triangulation angle (deg)")
    g.add_argument("--incident-max", type=float, help="maximum incident angle (deg)")
    g.add_argument("--t-depth", type=float, help="depth consistency threshold (world units)")
    g.add_argument("--t-normal", type=float, help="normal consistency threshold (deg)")
    g.add_argument("--consistency-ratio", type=float, help="share of source views that must agree")
    g.add_argument("--smooth-reward", type=float, help="fitness bonus for validated neighbours")
    g.add_argument("--fusion-rel-depth", type=float, help="relative depth tolerance for fusion")
    g.add_argument("--fusion-min-views", type=int, help="agreeing views needed to fuse a point")
    g.add_argument("--window", type=int, help="matching window size (odd)")
    g.add_argument("--window-step", type=int, help="sample every n-th window pixel")
    g.add_argument("--seed", type=int, help="random seed")
    g.add_argument("--threads", type=int, help="worker threads")
    g.add_argument("--no-pvs", action="store_true", help="disable incident and visibility view filters")
    g.add_argument("--no-inter-prop", action="store_true", help="disable inter-image propagation")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="beemvs", description="Bee-colony multi-view stereo.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)
    flags = _pipeline_flags()

    p = sub.add_parser("synth", help="render a synthetic scene with ground truth")
    p.add_argument("--kind", choices=sorted(SCENE_KINDS), default="plane")
    p.add_argument("--views", type=int, default=5)
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--height", type=int, default=120)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("reconstruct", parents=[flags], help="run the full pipeline")
    p.add_argument("scene", type=Path)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("depthmap", parents=[flags], help="estimate one view's map")
    p.add_argument("scene", type=Path)
    p.add_argument("--view", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("fuse", parents=[flags], help="fuse saved maps into a PLY cloud")
    p.add_argument("scene", type=Path)
    p.add_argument("maps", type=Path, help="directory holding one <view>.dnm per view")
    p.add_argument("--out", type=Path, required=True, help="output PLY file")

    p = sub.add_parser("eval", help="compare a reconstruction with ground truth")
    p.add_argument("scene", type=Path, help="scene written by `synth`")
    p.add_argument("recon", type=Path, help="directory with <view>.dnm maps and cloud.ply")
    p.add_argument("--stride", type=int, default=2, help="ground-truth sampling stride (pixels)")
    p.add_argument("--min-obs", type=int, default=4, help="cameras that must see a GT sample")
    p.add_argument("--out", type=Path, help="also write the report as JSON")
    return parser


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    """Merge defaults, the optional YAML file, and explicit flags."""
    data: dict[str, Any] = {}
    if getattr(args, "config", None) is not None:
        try:
            loaded = yaml.safe_load(args.config.read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from exc
        if loaded is not None and not isinstance(loaded, dict):
            raise CliError(f"config {args.config} must hold a mapping")
        data = {k: dict(v) if isinstance(v, dict) else v for k, v in (loaded or {}).items()}
    for dest, (section, name) in _FLAG_FIELDS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if section is None:
            data[name] = value
        else:
            data.setdefault(section, {})[name] = value
    if getattr(args, "no_pvs", False):
        data.setdefault("view_selection", {})["enabled"] = False
    if getattr(args, "no_inter_prop", False):
        data["inter_prop"] = False
    try:
        return PipelineConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid configuration: {exc}") from exc


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _require_dir(path: Path) -> None:
    if not path.is_dir():
        raise CliError(f"no such directory: {path}")


def _cmd_synth(args: argparse.Namespace) -> None:
    scene = SCENE_KINDS[args.kind](n_views=args.views, resolution=(args.width, args.height), rng=args.seed)
    save_scene(scene, args.out)
    print(f"wrote {len(scene.views)} views of a {args.kind} scene to {args.out}")


def _cmd_reconstruct(args: argparse.Namespace) -> None:
    _require_dir(args.scene)
    cfg = config_from_args(args)
    dataset = load_dataset(args.scene)
    result = run_pipeline(dataset, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    for v, m in zip(dataset.views, result.maps):
        save_map(m, args.out / f"{v.name}.dnm")
    export_ply(result.cloud, args.out / "cloud.ply")
    run = {
        "config": cfg.to_dict(),
        "history": [
            {"cycle": h.cycle + 1, "validated_fraction": h.validated_fraction,
             "per_view": h.per_view, "injected": h.injected}
            for h in result.history
        ],
        "points": len(result.cloud),
    }
    (args.out / "run.json").write_text(json.dumps(run, indent=2))
    print(f"{len(result.cloud)} points, validated {100 * result.history[-1].validated_fraction:.1f}%")


def _cmd_depthmap(args: argparse.Namespace) -> None:
    _require_dir(args.scene)
    cfg = config_from_args(args)
    dataset = load_dataset(args.scene)
    if not 0 <= args.view < len(dataset.views):
        raise CliError(f"--view must lie in [0, {len(dataset.views) - 1}]")
    m = estimate_view(dataset, args.view, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / f"{dataset.views[args.view].name}.dnm"
    save_map(m, path)
    print(f"wrote {path}")


def _load_maps(dataset, root: Path):
    _require_dir(root)
    maps = []
    for v in dataset.views:
        path = root / f"{v.name}.dnm"
        if not path.is_file():
            raise CliError(f"missing map for view {v.name}: {path}")
        maps.append(load_map(path))
    return maps


def _cmd_fuse(args: argparse.Namespace) -> None:
    _require_dir(args.scene)
    cfg = config_from_args(args)
    dataset = load_dataset(args.scene)
    cloud = fuse(dataset, _load_maps(dataset, args.maps), cfg.fusion)
    export_ply(cloud, args.out)
    print(f"wrote {len(cloud)} points to {args.out}")


def _cmd_eval(args: argparse.Namespace) -> None:
    _require_dir(args.scene)
    if not (args.scene / "scene.json").is_file():
        raise CliError(f"{args.scene} has no ground truth (scene.json)")
    scene = load_scene(args.scene)
    maps = _load_maps(scene.dataset, args.recon)
    cloud_path = args.recon / "cloud.ply"
    if not cloud_path.is_file():
        raise CliError(f"missing point cloud: {cloud_path}")
    report = evaluate(read_ply(cloud_path), maps, scene, stride=args.stride, min_obs=args.min_obs)
    text = json.dumps(report.to_dict(), indent=2)
    if args.out is not None:
        args.out.write_text(text)
    print(text)


_COMMANDS = {
    "synth": _cmd_synth,
    "reconstruct": _cmd_reconstruct,
    "depthmap": _cmd_depthmap,
    "fuse": _cmd_fuse,
    "eval": _cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _COMMANDS[args.command](args)
    except CliError as exc:
        parser.error(str(exc))
    except (SceneIOError, PipelineError, ValueError) as exc:
        print(f"beemvs: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
