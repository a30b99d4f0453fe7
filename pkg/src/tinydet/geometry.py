"""Box arithmetic shared by matching, training, and inference.

Boxes are axis-aligned corner-form rectangles (x1, y1, x2, y2) in
continuous pixel coordinates; width = x2 - x1 with no "+1" pixel
convention. Scalar helpers operate on ``Box``; the batched helpers
operate on (N, 4) float arrays and are the ones the pipeline uses.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"degenerate box: {self}")

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return self.width * self.height

    @property
    def center(self):
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_array(self):
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @classmethod
    def from_array(cls, arr):
        return cls(float(arr[0]), float(arr[1]), float(arr[2]), float(arr[3]))


@dataclass(frozen=True)
class BoxDelta:
    """Center offsets normalized by anchor extent, log-scale size ratios."""

    dx: float
    dy: float
    dw: float
    dh: float

    def as_array(self):
        return np.array([self.dx, self.dy, self.dw, self.dh], dtype=np.float64)


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    class_id: int
    level: int

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")


def iou(a, b):
    """Intersection over union of two boxes; two zero-area boxes give 0."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a, b):
    """Pairwise IoU of (N, 4) and (M, 4) arrays -> (N, M) float64."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def encode(gt, anchor):
    """Regression target for predicting ``gt`` from ``anchor``."""
    out = encode_boxes(gt.as_array()[None], anchor.as_array()[None])[0]
    return BoxDelta(float(out[0]), float(out[1]), float(out[2]), float(out[3]))


def decode(delta, anchor):
    out = decode_boxes(delta.as_array()[None], anchor.as_array()[None])[0]
    return Box.from_array(out)


def encode_boxes(gts, anchors):
    """(N, 4) corner boxes -> (N, 4) deltas (dx, dy, dw, dh), unit weights."""
    gts = np.asarray(gts, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("encode: anchors must have positive width and height")
    gw = gts[:, 2] - gts[:, 0]
    gh = gts[:, 3] - gts[:, 1]
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise ValueError("encode: ground-truth boxes must have positive width and height")
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    gcx = gts[:, 0] + 0.5 * gw
    gcy = gts[:, 1] + 0.5 * gh
    return np.stack(
        [(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1
    )


def decode_boxes(deltas, anchors):
    """Inverse of encode_boxes."""
    deltas = np.asarray(deltas, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    cx = anchors[:, 0] + 0.5 * aw + deltas[:, 0] * aw
    cy = anchors[:, 1] + 0.5 * ah + deltas[:, 1] * ah
    w = aw * np.exp(deltas[:, 2])
    h = ah * np.exp(deltas[:, 3])
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_to_image(box, width, height):
    """Clamp a box to [0, width] x [0, height]; ordering is preserved."""
    if width <= 0 or height <= 0:
        raise ValueError("clip_to_image: image extents must be positive")
    x1 = min(max(box.x1, 0.0), float(width))
    y1 = min(max(box.y1, 0.0), float(height))
    x2 = min(max(box.x2, 0.0), float(width))
    y2 = min(max(box.y2, 0.0), float(height))
    return Box(x1, y1, x2, y2)


def clip_boxes(boxes, width, height):
    """(N, 4) variant of clip_to_image."""
    if width <= 0 or height <= 0:
        raise ValueError("clip_boxes: image extents must be positive")
    out = np.array(boxes, dtype=np.float64, copy=True)
    out[:, 0::2] = np.clip(out[:, 0::2], 0, width)
    out[:, 1::2] = np.clip(out[:, 1::2], 0, height)
    return out


def nms(dets, iou_threshold):
    """Greedy NMS on a same-class detection list; returns kept indices.

    Highest score survives; ties broken by lower original index; a box is
    suppressed when its IoU with a kept box exceeds the threshold.
    """
    if len(dets) == 0:
        return []
    boxes = np.array([[d.box.x1, d.box.y1, d.box.x2, d.box.y2] for d in dets])
    scores = np.array([d.score for d in dets])
    return nms_arrays(boxes, scores, iou_threshold).tolist()


def nms_arrays(boxes, scores, iou_threshold):
    """Array form of nms: (N, 4), (N,) -> int64 kept indices."""
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    return _kernels.nms_keep(boxes, scores, float(iou_threshold))


def box_aspect_ratio(box):
    """max(w, h) / min(w, h); infinity when the short side is 0."""
    w, h = box.x2 - box.x1, box.y2 - box.y1
    lo, hi = min(w, h), max(w, h)
    return math.inf if lo == 0 else hi / lo
