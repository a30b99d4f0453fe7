"""Ablation orchestration: train one micro detector per (cell, seed),
evaluate on the validation split, and emit a CSV/JSON report with
mean +/- spread per cell (plus an optional per-class SVG chart).

Cells run in worker processes; each owns its model, RNG, and loss
statistics, so reports are reproducible for a fixed grid and seed list.
A failed cell is recorded with its error and the sweep continues.
"""

import csv
import json
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import configs_from_flat
from .data import CLASS_NAMES, load_dataset
from .evaluate import evaluate
from .train import train

_dataset_cache = {}


@dataclass
class AblationCell:
    name: str
    overrides: dict = field(default_factory=dict)  # flat dotted config keys


def _load_cached(path):
    if path not in _dataset_cache:
        _dataset_cache[path] = load_dataset(path)[0]
    return _dataset_cache[path]


def run_cell(args):
    """One (cell, seed) training + evaluation; importable for worker pools."""
    (cell_name, flat_cfg, seed, train_path, val_path, out_dir) = args
    try:
        cfgs = configs_from_flat(flat_cfg)
        train_scenes = _load_cached(train_path)
        val_scenes = _load_cached(val_path)
        cell_dir = os.path.join(out_dir, f"{cell_name}_seed{seed}") if out_dir else None
        result = train(cfgs["detector"], cfgs["train"], train_scenes, seed,
                       out_dir=cell_dir, infer_cfg=cfgs["infer"])
        dets, masks = [], []
        for scene in val_scenes:
            d, m = result.detector.infer(scene.image, cfgs["infer"],
                                         mask_enabled=cfgs["train"].mask_head_enabled)
            dets.append(d)
            masks.append(m)
        eval_masks = masks if cfgs["train"].mask_head_enabled else None
        res = evaluate(dets, val_scenes, masks_per_image=eval_masks)
        record = {
            "cell": cell_name,
            "seed": seed,
            "ok": True,
            "box": _metric_dict(res.box),
            "wall_time_sec": result.wall_time,
        }
        if res.mask is not None:
            record["mask"] = _metric_dict(res.mask)
        return record
    except Exception as exc:  # cell failures must not sink the sweep
        return {
            "cell": cell_name,
            "seed": seed,
            "ok": False,
            "error": f"{type(exc).__name__}: {exc}",
            "traceback": traceback.format_exc(),
        }


def _metric_dict(ms):
    return {
        "ap": ms.ap, "ap50": ms.ap50, "ap75": ms.ap75,
        "ap_s": ms.ap_s, "ap_m": ms.ap_m, "ap_l": ms.ap_l,
        "per_class": {CLASS_NAMES[c]: v for c, v in ms.per_class.items()},
    }


def run_ablation(train_path, val_path, base_flat, cells, seeds, out_dir, workers=1):
    """Train/evaluate the full grid; returns the report dict."""
    os.makedirs(out_dir, exist_ok=True)
    jobs = []
    for cell in cells:
        flat = dict(base_flat)
        flat.update(cell.overrides)
        for seed in seeds:
            jobs.append((cell.name, flat, int(seed), train_path, val_path, out_dir))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(run_cell, jobs))
    else:
        records = [run_cell(job) for job in jobs]

    report = {"seeds": [int(s) for s in seeds], "cells": []}
    for cell in cells:
        cell_records = [r for r in records if r["cell"] == cell.name]
        ok = [r for r in cell_records if r["ok"]]
        entry = {
            "name": cell.name,
            "overrides": cells[[c.name for c in cells].index(cell.name)].overrides,
            "runs": cell_records,
            "failures": len(cell_records) - len(ok),
        }
        if ok:
            entry["box_summary"] = _summarize([r["box"] for r in ok])
            if all("mask" in r for r in ok):
                entry["mask_summary"] = _summarize([r["mask"] for r in ok])
        report["cells"].append(entry)

    with open(os.path.join(out_dir, "ablation.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    _write_csv(os.path.join(out_dir, "ablation.csv"), report)
    return report


def _summarize(metric_dicts):
    out = {}
    for key in ("ap", "ap50", "ap75", "ap_s", "ap_m", "ap_l"):
        vals = np.array([m[key] for m in metric_dicts])
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std()),
                    "min": float(vals.min()), "max": float(vals.max()),
                    "per_seed": vals.tolist()}
    per_class = {}
    for name in CLASS_NAMES:
        vals = np.array([m["per_class"].get(name, 0.0) for m in metric_dicts])
        per_class[name] = {"mean": float(vals.mean()), "std": float(vals.std()),
                           "per_seed": vals.tolist()}
    out["per_class_ap"] = per_class
    return out


def _write_csv(path, report):
    cols = ["cell", "runs", "failures"]
    for key in ("ap", "ap50", "ap75", "ap_s", "ap_m", "ap_l"):
        cols += [f"box_{key}_mean", f"box_{key}_std"]
    cols += [f"ap_{name}_mean" for name in CLASS_NAMES]
    cols += ["mask_ap_mean", "mask_ap50_mean"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(cols)
        for entry in report["cells"]:
            row = [entry["name"], len(entry["runs"]), entry["failures"]]
            summary = entry.get("box_summary")
            if summary:
                for key in ("ap", "ap50", "ap75", "ap_s", "ap_m", "ap_l"):
                    row += [f"{summary[key]['mean']:.6f}", f"{summary[key]['std']:.6f}"]
                row += [
                    f"{summary['per_class_ap'][name]['mean']:.6f}" for name in CLASS_NAMES
                ]
            else:
                row += [""] * (12 + len(CLASS_NAMES))
            mask = entry.get("mask_summary")
            row += (
                [f"{mask['ap']['mean']:.6f}", f"{mask['ap50']['mean']:.6f}"]
                if mask else ["", ""]
            )
            writer.writerow(row)


def write_per_class_svg(path, report, baseline_cell=None):
    """Bar chart of per-class AP deltas of each cell against a baseline."""
    cells = [e for e in report["cells"] if e.get("box_summary")]
    if not cells:
        return
    baseline = cells[0] if baseline_cell is None else next(
        e for e in cells if e["name"] == baseline_cell
    )
    base_ap = {n: baseline["box_summary"]["per_class_ap"][n]["mean"] for n in CLASS_NAMES}
    rows = []
    for entry in cells:
        if entry["name"] == baseline["name"]:
            continue
        deltas = {
            n: entry["box_summary"]["per_class_ap"][n]["mean"] - base_ap[n]
            for n in CLASS_NAMES
        }
        rows.append((entry["name"], deltas))
    bar_w, group_gap, height, mid = 34, 30, 240, 120
    width = 80 + len(rows) * (len(CLASS_NAMES) * bar_w + group_gap)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height + 60}">',
        f'<line x1="40" y1="{mid}" x2="{width - 10}" y2="{mid}" stroke="black"/>',
    ]
    colors = ("#4878d0", "#ee854a", "#6acc64", "#d65f5f")
    x = 60
    scale = 200.0  # pixels per unit AP
    for name, deltas in rows:
        for ci, cls_name in enumerate(CLASS_NAMES):
            d = deltas[cls_name]
            h = abs(d) * scale
            y = mid - h if d >= 0 else mid
            parts.append(
                f'<rect x="{x}" y="{y:.1f}" width="{bar_w - 6}" height="{max(h, 0.5):.1f}" '
                f'fill="{colors[ci % len(colors)]}"><title>{name} {cls_name}: '
                f'{d:+.3f}</title></rect>'
            )
            x += bar_w
        parts.append(
            f'<text x="{x - len(CLASS_NAMES) * bar_w}" y="{height + 40}" '
            f'font-size="12">{name}</text>'
        )
        x += group_gap
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts))
