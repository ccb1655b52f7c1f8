"""
Command-line entry point.

Subcommands: gen, seed, selftrain, eval, ablate, viz and check-grad. Every
training setting can be given in a YAML config (``--config``) and
overridden with ``--key=value``.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import yaml

from .config import load_config, parse_overrides
from .data_format import CorruptionSpec, SceneSpec
from .evaluation import metrics_document
from .exceptions import ConfigError, PseudoboxLabError
from .io import load_scenes, print_dataset_info, save_json, save_manifest, save_scenes
from .pipeline import (
    check_gradients,
    detect,
    detection_uncertainties,
    evaluate,
    load_model,
    run_ablation,
    self_train,
)
from .pseudolabel import seed_scenes
from .scenegen import make_split, open_dataset
from .viz import LAYER_NAMES, RenderSpec, render_scene, save_svg

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# Relative error accepted by check-grad
GRADIENT_TOLERANCE = 1e-4


def _reject_extra(extra: List[str]) -> None:
    if extra:
        raise ConfigError(f"Unknown arguments: {extra}")


def _config(args, extra: List[str]):
    overrides = parse_overrides(extra)
    for key in ("dataset", "output_dir"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = str(value)
    return load_config(args.config, overrides)


def cmd_gen(args, extra: List[str]) -> int:
    _reject_extra(extra)
    spec_values: Dict[str, Any] = {}
    if args.spec is not None:
        with open(args.spec, "r", encoding="utf-8") as f:
            spec_values = yaml.safe_load(f) or {}
    spec_values.setdefault("seed", args.scene_seed)
    spec = SceneSpec.from_dict(spec_values)
    corruption = None
    if args.corrupt_fraction is not None:
        corruption = CorruptionSpec(
            fraction=args.corrupt_fraction,
            stds=tuple(args.corrupt_stds) if args.corrupt_stds else CorruptionSpec().stds,
            seed=args.corrupt_seed,
        )
    handle = make_split(spec, args.n_train, args.n_test, args.out, corruption, args.workers)
    print_dataset_info(handle.root)
    return 0


def cmd_seed(args, extra: List[str]) -> int:
    cfg = _config(args, extra)
    handle = open_dataset(args.data)
    scenes = load_scenes(handle.train_path)
    seeded = seed_scenes(scenes, cfg.cluster_params(), cfg.workers)
    save_scenes(seeded, handle.train_path)
    manifest = dict(handle.manifest)
    manifest["cluster_params"] = cfg.cluster_params().to_dict()
    save_manifest(manifest, handle.root / "manifest.yaml")
    print(f"Seeded {len(seeded)} scenes with {sum(len(s.pseudo_boxes) for s in seeded)} boxes")
    return 0


def cmd_selftrain(args, extra: List[str]) -> int:
    cfg = _config(args, extra)
    reports = self_train(cfg, resume=not args.no_resume, progress=args.progress)
    for report in reports:
        cell = report.metrics["0-80m"]
        print(f"T={report.round_index}: AP_BEV {cell['AP_BEV']}  AP_3D {cell['AP_3D']}")
    return 0


def cmd_eval(args, extra: List[str]) -> int:
    cfg = _config(args, extra)
    handle = open_dataset(cfg.dataset)
    scenes = load_scenes(handle.test_path if args.split == "test" else handle.train_path)
    params = load_model(args.checkpoint, cfg)
    table = evaluate(params, scenes, cfg)
    document = metrics_document({0: table})
    if args.out is not None:
        save_json(document, args.out)
    for bucket, cell in table.table_cells().items():
        print(f"{bucket:>7}: {cell}")
    return 0


def _parse_grid(items: List[str]) -> Dict[str, List[Any]]:
    grid: Dict[str, List[Any]] = {}
    for item in items:
        if "=" not in item:
            raise argparse.ArgumentTypeError(f"Grid entries look like key=v1,v2; got '{item}'")
        key, values = item.split("=", 1)
        for value in values.split(","):
            ((name, parsed),) = parse_overrides([f"--{key}={value}"]).items()
            grid.setdefault(name, []).append(parsed)
    return grid


def cmd_ablate(args, extra: List[str]) -> int:
    cfg = _config(args, extra)
    grid = _parse_grid(args.grid)
    results = run_ablation(cfg, grid, workers=args.workers)
    for row in results:
        print(f"{row['arm']}: AP_BEV {row['AP_BEV']}  AP_3D {row['AP_3D']}")
    return 0


def cmd_viz(args, extra: List[str]) -> int:
    run = Path(args.run)
    cfg = load_config(run / "config.yaml", parse_overrides(extra))
    handle = open_dataset(cfg.dataset)
    scenes = load_scenes(handle.test_path if args.split == "test" else handle.train_path)
    matches = [s for s in scenes if s.index == args.scene]
    if not matches:
        raise PseudoboxLabError(f"Scene {args.scene} is not in the {args.split} split")
    scene = matches[0]
    layers = [name for name in args.layers.split(",") if name]
    params = load_model(run / f"round_{args.round}" / "checkpoint.hdf5", cfg)

    boxes: Dict[str, np.ndarray] = {"gt": scene.gt_boxes, "pseudo": scene.pseudo_boxes}
    if "pseudo" in layers and args.split == "train":
        labels = load_scenes(run / f"labels_round_{args.round}.jsonl")
        boxes["pseudo"] = next(s.pseudo_boxes for s in labels if s.index == scene.index)
    boxes["pred"], _ = detect(params, scene, cfg, cfg.eval_score_threshold)
    uncertainties = None
    if "uncertainty" in layers:
        values = detection_uncertainties(params, scene, boxes["pred"], cfg)
        uncertainties = {"pred": np.nan_to_num(values, nan=0.0)}
    spec = RenderSpec(layers=tuple(["points"] + layers), glyph_scale=args.glyph_scale)
    out = Path(args.out) if args.out else run / f"round_{args.round}" / f"scene_{scene.index}.svg"
    save_svg(render_scene(scene, boxes, spec, uncertainties), out)
    print(out)
    return 0


def cmd_check_grad(args, extra: List[str]) -> int:
    _reject_extra(extra)
    results = check_gradients(args.configs, args.seed)
    worst = max(r["max_relative_error"] for r in results)
    skipped = sum(r["skipped"] for r in results)
    sampled = sum(r["sampled"] for r in results)
    print(
        f"max relative error over {len(results)} configs: {worst:.3e} "
        f"({skipped} of {sampled} parameters at kinks skipped)"
    )
    return 0 if worst <= GRADIENT_TOLERANCE else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pseudobox-lab",
        allow_abbrev=False,
        description="Uncertainty-aware self-training of dense 3D box regressors on synthetic scenes",
        epilog="Training settings not listed here are passed as --key=value.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", allow_abbrev=False, help="Generate a synthetic train/test split")
    gen.add_argument("--out", required=True, type=Path, help="Dataset directory")
    gen.add_argument("--n-train", type=int, default=64)
    gen.add_argument("--n-test", type=int, default=32)
    gen.add_argument("--scene-seed", type=int, default=0)
    gen.add_argument("--spec", type=Path, help="YAML file with scene generator parameters")
    gen.add_argument("--corrupt-fraction", type=float, help="Derive noisy pseudo boxes from gt")
    gen.add_argument("--corrupt-stds", type=float, nargs=7, metavar="STD")
    gen.add_argument("--corrupt-seed", type=int, default=0)
    gen.add_argument("--workers", type=int, default=1)
    gen.set_defaults(func=cmd_gen)

    seed = sub.add_parser("seed", allow_abbrev=False, help="Write clustering seed boxes into the training scenes")
    seed.add_argument("--data", required=True, type=Path)
    seed.add_argument("--config", type=Path)
    seed.set_defaults(func=cmd_seed)

    train = sub.add_parser("selftrain", allow_abbrev=False, help="Seed training and self-training rounds")
    train.add_argument("--config", type=Path)
    train.add_argument("--data", dest="dataset", type=Path)
    train.add_argument("--out", dest="output_dir", type=Path)
    train.add_argument("--no-resume", action="store_true", help="Ignore completed rounds")
    train.add_argument("--progress", action="store_true", help="Show progress bars")
    train.set_defaults(func=cmd_selftrain)

    ev = sub.add_parser("eval", allow_abbrev=False, help="AP_BEV / AP_3D of a checkpoint")
    ev.add_argument("--checkpoint", required=True, type=Path)
    ev.add_argument("--config", type=Path)
    ev.add_argument("--data", dest="dataset", type=Path)
    ev.add_argument("--split", choices=("test", "train"), default="test")
    ev.add_argument("--out", type=Path, help="metrics.json destination")
    ev.set_defaults(func=cmd_eval)

    ablate = sub.add_parser("ablate", allow_abbrev=False, help="Self-train every arm of a config grid")
    ablate.add_argument("--config", type=Path)
    ablate.add_argument("--data", dest="dataset", type=Path)
    ablate.add_argument("--out", dest="output_dir", type=Path)
    ablate.add_argument("--grid", nargs="+", required=True, help="key=v1,v2 ...")
    ablate.add_argument("--workers", type=int, default=1)
    ablate.set_defaults(func=cmd_ablate)

    viz = sub.add_parser("viz", allow_abbrev=False, help="Render one scene of a run as SVG")
    viz.add_argument("--run", required=True, type=Path, help="Run directory")
    viz.add_argument("--round", type=int, default=0)
    viz.add_argument("--scene", type=int, required=True, help="Scene index")
    viz.add_argument("--split", choices=("test", "train"), default="test")
    viz.add_argument("--layers", default="gt,pred,uncertainty", help=f"Subset of {LAYER_NAMES[1:]}")
    viz.add_argument("--glyph-scale", type=float, default=RenderSpec().glyph_scale)
    viz.add_argument("--out", type=Path)
    viz.set_defaults(func=cmd_viz)

    check = sub.add_parser("check-grad", allow_abbrev=False, help="Finite-difference gradient check")
    check.add_argument("--configs", type=int, default=32)
    check.add_argument("--seed", type=int, default=0)
    check.set_defaults(func=cmd_check_grad)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT
    )
    try:
        return args.func(args, extra)
    except PseudoboxLabError as e:
        logger.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
