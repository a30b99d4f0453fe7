"""Synthetic shape scenes standing in for a real detection corpus.

Four classes: rectangle, ellipse, triangle, and stick (an axis-aligned
bar with aspect ratio >= 8:1, deliberately an outlier no anchor shape can
reach IoU 0.5 with). Masks are exact rasterizations of the generating
shape on pixel centers and every box is the tight bounding box of its
mask. Datasets serialize to one binary file per split with run-length
encoded masks; generation is byte-reproducible from the seed.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from .geometry import iou_matrix

CLASS_NAMES = ("rectangle", "ellipse", "triangle", "stick")
RECTANGLE, ELLIPSE, TRIANGLE, STICK = range(4)
STICK_MIN_ASPECT = 8.0

_MAGIC = b"TDDS"
_VERSION = 1


@dataclass
class SyntheticScene:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    boxes: np.ndarray  # (G, 4) float32, tight around each mask
    class_ids: np.ndarray  # (G,) int32
    masks: np.ndarray  # (G, H, W) uint8


@dataclass(frozen=True)
class DatasetConfig:
    train_images: int = 500
    val_images: int = 100
    image_size: int = 128
    seed: int = 0
    max_objects: int = 8
    class_probs: tuple = (0.3, 0.3, 0.3, 0.1)  # sticks are the 10% outlier class


def _pixel_centers(size):
    ys, xs = np.mgrid[0:size, 0:size]
    return ys + 0.5, xs + 0.5


def _rect_mask(ys, xs, cx, cy, w, h):
    return (np.abs(xs - cx) <= w / 2) & (np.abs(ys - cy) <= h / 2)


def _ellipse_mask(ys, xs, cx, cy, a, b):
    return ((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2 <= 1.0


def _triangle_mask(ys, xs, pts):
    def half_plane(p, q):
        return (q[0] - p[0]) * (ys - p[1]) - (q[1] - p[1]) * (xs - p[0])

    d1 = half_plane(pts[0], pts[1])
    d2 = half_plane(pts[1], pts[2])
    d3 = half_plane(pts[2], pts[0])
    neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
    pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
    return ~(neg & pos)


def _sample_object(rng, size, class_probs):
    """One shape: (class_id, bool mask). May return None for a degenerate draw.

    Extents scale with the image so any size >= 64 px works. Sticks snap to
    whole pixels, which makes the rasterized box aspect exactly >= 8:1.
    """
    ys, xs = _pixel_centers(size)
    cls = int(rng.choice(len(CLASS_NAMES), p=class_probs))
    margin = 3
    if cls == RECTANGLE:
        w = rng.uniform(0.055, 0.375) * size
        h = float(np.clip(w * rng.uniform(1 / 3, 3), 0.047 * size, 0.44 * size))
        cx = rng.uniform(margin + w / 2, size - margin - w / 2)
        cy = rng.uniform(margin + h / 2, size - margin - h / 2)
        mask = _rect_mask(ys, xs, cx, cy, w, h)
    elif cls == ELLIPSE:
        a = rng.uniform(0.031, 0.19) * size
        b = float(np.clip(a * rng.uniform(1 / 3, 3), 0.027 * size, 0.22 * size))
        cx = rng.uniform(margin + a, size - margin - a)
        cy = rng.uniform(margin + b, size - margin - b)
        mask = _ellipse_mask(ys, xs, cx, cy, a, b)
    elif cls == TRIANGLE:
        span = rng.uniform(0.11, 0.41) * size
        x0 = rng.uniform(margin, size - margin - span)
        y0 = rng.uniform(margin, size - margin - span)
        for _ in range(8):
            pts = rng.uniform(0, span, size=(3, 2)) + np.array([x0, y0])
            area2 = abs(
                (pts[1, 0] - pts[0, 0]) * (pts[2, 1] - pts[0, 1])
                - (pts[2, 0] - pts[0, 0]) * (pts[1, 1] - pts[0, 1])
            )
            if area2 > 0.2 * span * span:
                break
        else:
            return None
        mask = _triangle_mask(ys, xs, pts)
    else:  # stick: integer-aligned thin bar
        thickness = int(rng.choice([2, 3]))
        max_len = min(int(0.6 * size), size - 2 * margin)
        length = int(rng.integers(thickness * STICK_MIN_ASPECT, max_len + 1))
        w, h = (length, thickness) if rng.random() < 0.5 else (thickness, length)
        x1 = int(rng.integers(margin, size - margin - w + 1))
        y1 = int(rng.integers(margin, size - margin - h + 1))
        mask = _rect_mask(ys, xs, x1 + w / 2, y1 + h / 2, w, h)
    if mask.sum() < 8:
        return None
    return cls, mask


def _tight_box(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    # pixel (r, c) covers [c, c+1] x [r, r+1] in continuous coordinates
    return np.array(
        [cols[0], rows[0], cols[-1] + 1, rows[-1] + 1], dtype=np.float32
    )


def generate_scene(rng, config):
    size = config.image_size
    n_objects = int(rng.integers(1, config.max_objects + 1))
    class_probs = np.asarray(config.class_probs, dtype=np.float64)
    class_probs = class_probs / class_probs.sum()
    masks = []
    boxes = []
    classes = []
    attempts = 0
    while len(masks) < n_objects and attempts < 60:
        attempts += 1
        drawn = _sample_object(rng, size, class_probs)
        if drawn is None:
            continue
        cls, mask = drawn
        box = _tight_box(mask)
        if boxes:
            overlap = iou_matrix(box[None], np.stack(boxes)).max()
            if overlap > 0.3:
                continue
        masks.append(mask)
        boxes.append(box)
        classes.append(cls)
    if not masks:  # pathological rng stream: place one fixed rectangle
        ys, xs = _pixel_centers(size)
        mask = _rect_mask(ys, xs, size / 2, size / 2, size / 4, size / 4)
        masks.append(mask)
        boxes.append(_tight_box(mask))
        classes.append(RECTANGLE)
    image = rng.uniform(0.0, 0.2, size=(size, size)).astype(np.float32)
    for mask in masks:
        fill = rng.uniform(0.5, 1.0)
        noise = rng.normal(0.0, 0.02, size=(size, size))
        image = np.where(mask, np.clip(fill + noise, 0.0, 1.0), image).astype(np.float32)
    return SyntheticScene(
        image=image,
        boxes=np.stack(boxes).astype(np.float32),
        class_ids=np.asarray(classes, dtype=np.int32),
        masks=np.stack(masks).astype(np.uint8),
    )


def generate_dataset(config):
    """Reproducible (train, val) scene lists."""
    rng = np.random.default_rng(config.seed)
    train = [generate_scene(rng, config) for _ in range(config.train_images)]
    val = [generate_scene(rng, config) for _ in range(config.val_images)]
    return train, val


# -- run-length encoding ------------------------------------------------------

def rle_encode(mask):
    """Row-major RLE: run lengths of alternating values starting with 0."""
    flat = np.asarray(mask, dtype=np.uint8).reshape(-1)
    if flat.size == 0:
        return np.zeros(0, dtype=np.uint32)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).astype(np.uint32)
    if flat[0] == 1:  # leading zero-run of length 0 keeps the convention
        runs = np.concatenate([[np.uint32(0)], runs])
    return runs


def rle_decode(runs, shape):
    total = int(np.prod(shape))
    flat = np.zeros(total, dtype=np.uint8)
    pos = 0
    value = 0
    for run in runs:
        run = int(run)
        if value:
            flat[pos : pos + run] = 1
        pos += run
        value ^= 1
    if pos != total:
        raise ValueError(f"RLE covers {pos} pixels, mask has {total}")
    return flat.reshape(shape)


# -- binary split files -------------------------------------------------------
# magic "TDDS", u32 version, u64 header length, JSON header, then per image:
#   image float32 (H*W) | u32 G | boxes float32 (G*4) | classes int32 (G)
#   | per mask: u32 run count + u32 runs

def save_dataset(path, scenes, meta=None):
    header = {
        "version": _VERSION,
        "num_images": len(scenes),
        "class_names": list(CLASS_NAMES),
    }
    if meta:
        header["meta"] = meta
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQ", _VERSION, len(blob)))
        f.write(blob)
        for scene in scenes:
            h, w = scene.image.shape
            f.write(struct.pack("<II", h, w))
            f.write(np.ascontiguousarray(scene.image, dtype="<f4").tobytes())
            g = len(scene.boxes)
            f.write(struct.pack("<I", g))
            f.write(np.ascontiguousarray(scene.boxes, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(scene.class_ids, dtype="<i4").tobytes())
            for mask in scene.masks:
                runs = rle_encode(mask)
                f.write(struct.pack("<I", len(runs)))
                f.write(np.ascontiguousarray(runs, dtype="<u4").tobytes())


def load_dataset(path):
    """Returns (scenes, header_dict)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a dataset file (bad magic {magic!r})")
        version, hlen = struct.unpack("<IQ", f.read(12))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported dataset version {version}")
        header = json.loads(f.read(hlen).decode("utf-8"))
        scenes = []
        for _ in range(header["num_images"]):
            h, w = struct.unpack("<II", f.read(8))
            image = np.frombuffer(f.read(4 * h * w), dtype="<f4").reshape(h, w).copy()
            (g,) = struct.unpack("<I", f.read(4))
            boxes = np.frombuffer(f.read(16 * g), dtype="<f4").reshape(g, 4).copy()
            classes = np.frombuffer(f.read(4 * g), dtype="<i4").copy()
            masks = np.zeros((g, h, w), dtype=np.uint8)
            for i in range(g):
                (nruns,) = struct.unpack("<I", f.read(4))
                runs = np.frombuffer(f.read(4 * nruns), dtype="<u4")
                masks[i] = rle_decode(runs, (h, w))
            scenes.append(
                SyntheticScene(image=image, boxes=boxes, class_ids=classes, masks=masks)
            )
    return scenes, header
