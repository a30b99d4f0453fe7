"""Config plumbing: dataclass reconstruction from dicts and the
human-readable key-value config file format.

Config files are flat ``dotted.key = value`` lines; ``#`` starts a
comment. Values parse as int, float, true/false, comma-separated lists
of those, or plain strings. Dotted prefixes select the config group
(``data.``, ``detector.``, ``train.``, ``infer.``), deeper dots reach
nested blocks (``detector.anchors.scale_factor``). Unknown keys are
errors so typos fail loudly.
"""

import dataclasses

from .anchors import AnchorConfig
from .data import DatasetConfig
from .losses import FocalParams
from .model import DetectorConfig, InferenceConfig, MicroBackboneConfig
from .train import TrainConfig


def parse_value(text):
    s = text.strip()
    if "," in s:
        return tuple(parse_value(part) for part in s.split(","))
    low = s.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null"):
        return None
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def parse_config_file(path):
    """-> flat {dotted_key: parsed_value}."""
    flat = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, value = line.split("=", 1)
            flat[key.strip()] = parse_value(value)
    return flat


def tree_from_flat(flat):
    tree = {}
    for key, value in flat.items():
        parts = key.split(".")
        node = tree
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValueError(f"config key {key!r} conflicts with a scalar value")
        node[parts[-1]] = value
    return tree


def _build(cls, values):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, v in values.items():
        if isinstance(v, list):
            v = tuple(v)
        kwargs[name] = v
    return cls(**kwargs)


def detector_config_from_dict(d):
    d = dict(d)
    backbone = _build(MicroBackboneConfig, _tupled(d.pop("backbone", {})))
    anchor = _build(AnchorConfig, _tupled(d.pop("anchors", {})))
    focal = _build(FocalParams, d.pop("focal", {}))
    d = _tupled(d)
    names = {f.name for f in dataclasses.fields(DetectorConfig)} - {
        "backbone", "anchors", "focal"
    }
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown DetectorConfig keys: {sorted(unknown)}")
    return DetectorConfig(backbone=backbone, anchors=anchor, focal=focal, **d)


def train_config_from_dict(d):
    return _build(TrainConfig, _tupled(d))


def dataset_config_from_dict(d):
    return _build(DatasetConfig, _tupled(d))


def inference_config_from_dict(d):
    return _build(InferenceConfig, _tupled(d))


def configs_from_flat(flat):
    """Flat dotted keys -> dict with data/detector/train/infer configs."""
    tree = tree_from_flat(flat)
    known = {"data", "detector", "train", "infer"}
    unknown = set(tree) - known
    if unknown:
        raise ValueError(f"unknown config groups: {sorted(unknown)} (expected {sorted(known)})")
    return {
        "data": dataset_config_from_dict(tree.get("data", {})),
        "detector": detector_config_from_dict(tree.get("detector", {})),
        "train": train_config_from_dict(tree.get("train", {})),
        "infer": inference_config_from_dict(tree.get("infer", {})),
    }


def _tupled(d):
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
