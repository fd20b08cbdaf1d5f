"""Command-line entry point: synth | split | train | eval | audit | predict.

Every run is driven by one flat JSON config; a resolved copy (all defaults
filled in) is written next to the outputs so a run directory plus its seed
reproduces the run exactly.  Report-producing commands also render figures
next to their JSON/CSV outputs unless --no-figures is passed.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import figures
from .densenet3d import DenseNetConfig, build_network, load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, NumericAbort, ShapeError, StateError
from .hsi_data import (
    HsiCube,
    SplitSpec,
    extract_patches,
    load_cube,
    pad_cube,
    patches_at,
    save_cube,
    standardize_cube,
    stratified_split,
    synth_cube,
)
from .train_eval import TrainConfig, audit, evaluate, predict_classes, train

MODEL_KEYS = ("stages", "k0", "growth_rates", "num_kernels", "num_classes",
              "bands", "patch_size", "dropout", "temperature", "use_bias")
TRAIN_KEYS = ("optimizer", "initial_lr", "momentum", "weight_decay", "epochs",
              "batch_size", "lr_drop_epochs")
DATA_KEYS = ("data_path", "split_ratios", "standardize")
OTHER_KEYS = ("seed", "recipe")
RECIPES = {"sgd100": TrainConfig.sgd100, "adam80": TrainConfig.adam80}
PATH_KEYS = ("data_path",)      # overridable through DACNET_<KEY> env vars


def load_run_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    known = set(MODEL_KEYS + TRAIN_KEYS + DATA_KEYS + OTHER_KEYS)
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return doc


def parse_ratios(value) -> tuple[int, int, int]:
    if isinstance(value, str):
        parts = value.split(":")
    else:
        parts = list(value)
    try:
        ratios = tuple(int(p) for p in parts)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"split ratios {value!r} are not integers") from exc
    if len(ratios) != 3 or min(ratios) < 1:
        raise ConfigError(f"split ratios must be three positive integers, got {value!r}")
    return ratios


def resolve_run_config(doc: dict, cube: HsiCube | None = None) -> dict:
    """Fill every default; derive bands/num_classes from the cube when absent."""
    recipe = doc.get("recipe", "sgd100")
    if recipe not in RECIPES:
        raise ConfigError(f"unknown recipe {recipe!r}; choose from {sorted(RECIPES)}")
    train_cfg = RECIPES[recipe]()
    seed = int(doc.get("seed", 0))
    resolved = {"recipe": recipe, "seed": seed}
    train_doc = train_cfg.to_dict()
    train_doc.pop("seed")
    for key in TRAIN_KEYS:
        resolved[key] = doc.get(key, train_doc[key])
    model_doc = DenseNetConfig().to_dict()
    for key in MODEL_KEYS:
        if key in doc:
            model_doc[key] = doc[key]
    if cube is not None:
        if "bands" not in doc:
            model_doc["bands"] = cube.bands
        elif model_doc["bands"] != cube.bands:
            raise ConfigError(f"config says {model_doc['bands']} bands but the cube "
                              f"has {cube.bands}")
        if "num_classes" not in doc:
            model_doc["num_classes"] = cube.num_classes
        elif model_doc["num_classes"] != cube.num_classes:
            raise ConfigError(f"config says {model_doc['num_classes']} classes but "
                              f"the cube has {cube.num_classes}")
    resolved.update(model_doc)
    resolved["data_path"] = doc.get("data_path")
    resolved["split_ratios"] = list(parse_ratios(doc.get("split_ratios", "5:1:4")))
    resolved["standardize"] = bool(doc.get("standardize", False))
    return resolved


def model_config(resolved: dict) -> DenseNetConfig:
    return DenseNetConfig.from_dict({k: resolved[k] for k in MODEL_KEYS})


def train_config(resolved: dict) -> TrainConfig:
    doc = {k: resolved[k] for k in TRAIN_KEYS}
    doc["seed"] = resolved["seed"]
    return TrainConfig.from_dict(doc)


def resolve_data_path(cli_value, resolved: dict | None = None) -> str:
    if cli_value:
        return cli_value
    env = os.environ.get("DACNET_DATA_PATH")
    if env:
        return env
    if resolved and resolved.get("data_path"):
        return resolved["data_path"]
    raise ConfigError("no cube path given (use --data, DACNET_DATA_PATH, or the "
                      "data_path config key)")


def prepare_partitions(cube: HsiCube, resolved: dict):
    """Split, optionally standardize, pad, and extract per-partition patches."""
    ratios = parse_ratios(resolved["split_ratios"])
    split = stratified_split(cube.labels, ratios, resolved["seed"])
    if resolved["standardize"]:
        cube = standardize_cube(cube, split.mask("train"))
    block = resolved["patch_size"]
    margin = (block - 1) // 2
    padded = pad_cube(cube, margin)
    padded_split = SplitSpec(np.pad(split.assignment, margin), split.ratios, split.seed)
    return extract_patches(padded, padded_split, block), split, padded


def write_pgm(path, raster: np.ndarray):
    """Binary PGM (P5, maxval 255) of small class indices."""
    if raster.max() > 255:
        raise DataError(f"PGM supports class indices up to 255, got {raster.max()}")
    h, w = raster.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(raster, dtype=np.uint8).tobytes())


def _emit(args, payload: dict, human_lines: list[str]):
    if getattr(args, "json", False):
        print(json.dumps(payload, sort_keys=True))
    else:
        for line in human_lines:
            print(line)


def cmd_synth(args) -> int:
    cube = synth_cube(args.height, args.width, args.bands, args.classes,
                      noise_sigma=args.noise, seed=args.seed)
    save_cube(cube, args.out)
    counts = {name: int((cube.labels == c + 1).sum())
              for c, name in enumerate(cube.class_names)}
    counts["background"] = int((cube.labels == 0).sum())
    _emit(args, {"path": str(args.out), "pixel_counts": counts},
          [f"wrote {args.out} ({cube.height}x{cube.width}x{cube.bands}, "
           f"{cube.num_classes} classes)"]
          + [f"  {name}: {n} px" for name, n in counts.items()])
    return 0


def cmd_split(args) -> int:
    cube = load_cube(resolve_data_path(args.data))
    ratios = parse_ratios(args.ratios)
    split = stratified_split(cube.labels, ratios, args.seed)
    per_class = {}
    for c, name in enumerate(cube.class_names, start=1):
        per_class[name] = {part: int((split.mask(part) & (cube.labels == c)).sum())
                           for part in ("train", "val", "test")}
    doc = {"ratios": list(ratios), "seed": args.seed, "counts": split.counts(),
           "per_class": per_class, "assignment": split.assignment.ravel().tolist(),
           "shape": list(split.assignment.shape)}
    if args.out:
        Path(args.out).write_text(json.dumps(doc, sort_keys=True, indent=2))
    payload = {k: doc[k] for k in ("ratios", "seed", "counts", "per_class")}
    _emit(args, payload,
          [f"split {ratios[0]}:{ratios[1]}:{ratios[2]} seed {args.seed}: "
           + ", ".join(f"{k}={v}" for k, v in split.counts().items())])
    return 0


def cmd_train(args) -> int:
    doc = load_run_config(args.config)
    data_path = resolve_data_path(args.data, doc)
    cube = load_cube(data_path)
    if args.recipe:
        doc["recipe"] = args.recipe
    resolved = resolve_run_config(doc, cube)
    resolved["data_path"] = str(data_path)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(
        json.dumps(resolved, sort_keys=True, indent=2))
    partitions, _, _ = prepare_partitions(cube, resolved)
    net = build_network(model_config(resolved), seed=resolved["seed"])
    log_path = out_dir / "epochs.jsonl"
    with open(log_path, "w", encoding="utf-8") as log_file:
        def sink(record):
            log_file.write(json.dumps(record, sort_keys=True) + "\n")
            log_file.flush()

        result = train(net, partitions["train"], train_config(resolved),
                       val_set=partitions["val"], sink=sink)
    net.load_state(result.best_state)
    ckpt_path = out_dir / "checkpoint.dacn"
    save_checkpoint(net, ckpt_path, run_config=resolved)
    if not args.no_figures:
        figures.save_training_curves(result.log, out_dir / "train_curves.png")
    summary = {
        "checkpoint": str(ckpt_path),
        "epochs": len(result.log),
        "final_train_loss": result.log[-1]["train_loss"],
        "best_val_oa": result.best_val_oa,
        "seconds": round(result.seconds, 3),
    }
    _emit(args, summary,
          [f"trained {len(result.log)} epochs in {result.seconds:.1f}s",
           f"final train loss {result.log[-1]['train_loss']:.6f}, best val OA "
           f"{result.best_val_oa if result.best_val_oa is not None else 'n/a'}",
           f"checkpoint: {ckpt_path}"])
    return 0


def _reload_run(args):
    net, doc = load_checkpoint(args.checkpoint)
    if "run" not in doc:
        raise DataError(f"checkpoint {args.checkpoint} carries no run config")
    resolved = doc["run"]
    cube = load_cube(resolve_data_path(args.data, resolved))
    if cube.bands != net.cfg.bands or cube.num_classes != net.cfg.num_classes:
        raise DataError(f"cube ({cube.bands} bands, {cube.num_classes} classes) does "
                        f"not match the checkpoint ({net.cfg.bands}, "
                        f"{net.cfg.num_classes})")
    return net, resolved, cube


def cmd_eval(args) -> int:
    net, resolved, cube = _reload_run(args)
    partitions, _, _ = prepare_partitions(cube, resolved)
    patches = partitions[args.split]
    if len(patches) == 0:
        raise DataError(f"partition {args.split!r} is empty")
    metrics = evaluate(net, patches)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / f"metrics_{args.split}.json"
    metrics_path.write_text(json.dumps(metrics.to_json_dict(), sort_keys=True))
    if not args.no_figures:
        figures.save_confusion_heatmap(metrics, cube.class_names,
                                       out_dir / f"confusion_{args.split}.png")
    if args.json:
        print(json.dumps(metrics.to_json_dict(), sort_keys=True))
    else:
        print(f"partition {args.split}: {len(patches)} samples")
        print(f"OA {metrics.oa:.4f}  AA {metrics.aa:.4f}  kappa {metrics.kappa:.4f}")
        for name, r in zip(cube.class_names, metrics.per_class_recall):
            print(f"  {name}: recall {'n/a' if np.isnan(r) else f'{r:.4f}'}")
        print(f"metrics written to {metrics_path}")
    return 0


def cmd_audit(args) -> int:
    doc = load_run_config(args.config)
    resolved = resolve_run_config(doc)
    report = audit(model_config(resolved))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "cost_report.json").write_text(
        json.dumps(report.to_json_dict(), sort_keys=True, indent=2))
    (out_dir / "cost_report.txt").write_text(report.format_table() + "\n")
    with open(out_dir / "cost_report.csv", "w", newline="") as f:
        csv.writer(f).writerows(report.csv_rows())
    if not args.no_figures:
        figures.save_cost_breakdown(report, out_dir / "cost_report.png")
    if args.json:
        print(json.dumps(report.to_json_dict(), sort_keys=True))
    else:
        print(report.format_table())
        print(f"\nreports written to {out_dir}")
    return 0


def cmd_predict(args) -> int:
    net, resolved, cube = _reload_run(args)
    block = resolved["patch_size"]
    margin = (block - 1) // 2
    work = cube
    if resolved["standardize"]:
        split = stratified_split(cube.labels, parse_ratios(resolved["split_ratios"]),
                                 resolved["seed"])
        work = standardize_cube(cube, split.mask("train"))
    padded = pad_cube(work, margin)
    if args.all_pixels:
        rows, cols = np.meshgrid(np.arange(cube.height), np.arange(cube.width),
                                 indexing="ij")
        coords = np.stack([rows.ravel(), cols.ravel()], axis=1)
    else:
        coords = np.argwhere(cube.labels > 0)
    class_map = np.zeros((cube.height, cube.width), dtype=np.int64)
    chunk = 64
    for start in range(0, len(coords), chunk):
        batch = coords[start:start + chunk]
        data = patches_at(padded, batch + margin, block)
        preds = predict_classes(net, data)
        class_map[batch[:, 0], batch[:, 1]] = preds + 1
    write_pgm(args.out_map, class_map)
    legend = {"0": "background"}
    legend.update({str(c + 1): name for c, name in enumerate(cube.class_names)})
    legend_path = Path(args.out_map).with_suffix(".legend.json")
    legend_path.write_text(json.dumps(legend, sort_keys=True, indent=2))
    if not args.no_figures:
        figures.save_class_map(class_map, cube.class_names,
                               Path(args.out_map).with_suffix(".png"))
    _emit(args, {"map": str(args.out_map), "legend": str(legend_path),
                 "classified_pixels": int(len(coords))},
          [f"classified {len(coords)} pixels",
           f"map: {args.out_map} (legend {legend_path})"])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dacnet",
        description="Dynamic attention 3D convolution networks on hyperspectral cubes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic HSC1 cube")
    p.add_argument("--out", required=True)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--bands", type=int, default=16)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="compute and report a stratified split")
    p.add_argument("--data")
    p.add_argument("--ratios", default="5:1:4")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the full assignment as JSON")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a network from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--data")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--recipe", choices=sorted(RECIPES))
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one partition")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("audit", help="parameter and multiply-add cost report")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("predict", help="classify pixels and write a PGM map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--out-map", required=True)
    p.add_argument("--all-pixels", action="store_true")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ShapeError, StateError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
