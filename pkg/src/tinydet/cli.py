"""Command-line surface: generate / train / eval / ablate."""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import __version__
from .ablation import AblationCell, run_ablation, write_per_class_svg
from .config import (
    configs_from_flat,
    dataset_config_from_dict,
    parse_config_file,
    tree_from_flat,
)
from .data import generate_dataset, load_dataset, save_dataset
from .evaluate import evaluate
from .train import load_checkpoint, train


def _load_flat(path):
    return parse_config_file(path) if path else {}


def cmd_generate(args):
    flat = _load_flat(args.config)
    tree = tree_from_flat(flat)
    data_kv = dict(tree.get("data", {}))
    if args.images is not None:
        data_kv["train_images"] = args.images
    if args.val is not None:
        data_kv["val_images"] = args.val
    if args.size is not None:
        data_kv["image_size"] = args.size
    if args.seed is not None:
        data_kv["seed"] = args.seed
    cfg = dataset_config_from_dict(data_kv)
    train_scenes, val_scenes = generate_dataset(cfg)
    os.makedirs(args.out, exist_ok=True)
    meta = dataclasses.asdict(cfg)
    save_dataset(os.path.join(args.out, "train.tds"), train_scenes, meta=meta)
    save_dataset(os.path.join(args.out, "val.tds"), val_scenes, meta=meta)
    print(f"wrote {len(train_scenes)} train / {len(val_scenes)} val scenes to {args.out}")
    return 0


def _resolve_split(data, split):
    if os.path.isdir(data):
        return os.path.join(data, f"{split}.tds")
    return data


def cmd_train(args):
    flat = _load_flat(args.config)
    cfgs = configs_from_flat(flat)
    scenes, _ = load_dataset(_resolve_split(args.data, "train"))
    result = train(
        cfgs["detector"], cfgs["train"], scenes, args.seed,
        out_dir=args.out, infer_cfg=cfgs["infer"],
        progress=(None if args.quiet else _print_progress),
    )
    print(f"trained {cfgs['train'].iterations} iterations in {result.wall_time:.1f}s; "
          f"checkpoint at {args.out}/checkpoint.tdck")
    if args.eval:
        val_path = _resolve_split(args.data, "val")
        if os.path.exists(val_path):
            metrics = _evaluate_checkpoint(
                result.detector, cfgs, val_path,
                mask_enabled=cfgs["train"].mask_head_enabled,
            )
            out_path = os.path.join(args.out, "eval.json")
            with open(out_path, "w") as f:
                json.dump(metrics, f, indent=2, sort_keys=True)
            print(json.dumps(metrics["box"], indent=2, sort_keys=True))
    return 0


def _print_progress(it, report):
    print(f"iter {it:>6d}  cls {report.cls_loss:.4f}  reg {report.reg_loss:.4f}  "
          f"mask {report.mask_loss:.4f}  pos {report.num_positives}")


def _evaluate_checkpoint(detector, cfgs, val_path, mask_enabled=True):
    scenes, _ = load_dataset(val_path)
    dets, masks = [], []
    for scene in scenes:
        d, m = detector.infer(scene.image, cfgs["infer"], mask_enabled=mask_enabled)
        dets.append(d)
        masks.append(m)
    res = evaluate(dets, scenes, masks_per_image=masks if mask_enabled else None)
    out = {"box": dataclasses.asdict(res.box)}
    if res.mask is not None:
        out["mask"] = dataclasses.asdict(res.mask)
    return out


def cmd_eval(args):
    detector, state, header = load_checkpoint(args.checkpoint)
    flat = _load_flat(args.config)
    cfgs = configs_from_flat(flat)
    metrics = _evaluate_checkpoint(
        detector, cfgs, _resolve_split(args.data, "val"), mask_enabled=not args.no_masks
    )
    text = json.dumps(metrics, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    print(text)
    return 0


def cmd_ablate(args):
    grid_flat = parse_config_file(args.grid)
    base = {}
    cell_overrides = {}
    seeds = [0, 1, 2]
    for key, value in grid_flat.items():
        if key == "seeds":
            seeds = list(value) if isinstance(value, tuple) else [value]
        elif key.startswith("cell."):
            _, cell_name, sub = key.split(".", 2)
            cell_overrides.setdefault(cell_name, {})[sub] = value
        else:
            base[key] = value
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
    cells = [AblationCell(name, kv) for name, kv in cell_overrides.items()]
    if not cells:
        raise ValueError(f"{args.grid}: no 'cell.<name>.<key>' entries found")
    report = run_ablation(
        _resolve_split(args.data, "train"), _resolve_split(args.data, "val"),
        base, cells, seeds, args.out, workers=args.workers,
    )
    if args.svg:
        write_per_class_svg(os.path.join(args.out, "per_class_deltas.svg"), report)
    failures = sum(e["failures"] for e in report["cells"])
    for entry in report["cells"]:
        summary = entry.get("box_summary")
        if summary:
            print(f"{entry['name']:<24s} AP {summary['ap']['mean']:.3f} "
                  f"+/- {summary['ap']['std']:.3f}  AP50 {summary['ap50']['mean']:.3f}")
        else:
            print(f"{entry['name']:<24s} FAILED")
    print(f"report written to {args.out}/ablation.json")
    return 1 if failures else 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="tinydet",
        description="Desk-scale single-shot detection training toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--images", type=int)
    p.add_argument("--val", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--data", required=True, help="dataset dir or train split file")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval", action="store_true", help="evaluate on the val split after")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset dir or split file")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--no-masks", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid")
    p.add_argument("--data", required=True, help="dataset dir")
    p.add_argument("--grid", required=True, help="grid config file")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", help="comma list, overrides the grid file")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--svg", action="store_true", help="emit per-class delta chart")
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
