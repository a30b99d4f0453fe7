"""Dense anchor generation over pyramid levels and anchor-to-gt assignment.

Assignment follows the usual two-threshold rule (>= 0.5 positive, < 0.4
negative, in between ignored) plus a relaxation pass: any ground truth
that got no positive from the threshold rule claims its single best
anchor when that overlap beats ``best_match_thresh``. The relaxation only
adds positives; it never reassigns or removes one.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import iou_matrix

POSITIVE = 1
NEGATIVE = 0
IGNORE = -1

SOURCE_NONE = -1
SOURCE_THRESHOLD = 0
SOURCE_BEST_MATCH = 1


@dataclass(frozen=True)
class AnchorConfig:
    levels: tuple = (3, 4, 5, 6, 7)
    base_size: float = 32.0  # side at the first level, doubling per level
    scale_factor: float = 1.0  # global shrink for desk-scale images
    aspect_ratios: tuple = (0.5, 1.0, 2.0)
    size_multipliers: tuple = (1.0, 2.0 ** (1.0 / 3.0), 2.0 ** (2.0 / 3.0))

    def __post_init__(self):
        if len(self.levels) == 0:
            raise ValueError("AnchorConfig.levels must not be empty")

    @property
    def anchors_per_location(self):
        return len(self.aspect_ratios) * len(self.size_multipliers)

    def stride(self, level):
        return 2**level

    def base_for(self, level):
        return self.base_size * self.scale_factor * 2 ** (level - self.levels[0])


@dataclass
class AnchorSet:
    boxes: np.ndarray  # (A, 4) float32, corner form, unclipped
    level_of: np.ndarray  # (A,) int32
    location_of: np.ndarray  # (A, 2) int32 grid cell (iy, ix)
    level_slices: dict = field(default_factory=dict)  # level -> slice into the flat arrays

    def __len__(self):
        return self.boxes.shape[0]


def feature_extents(config, image_width, image_height):
    """Per-level feature-map extents: ceil(image / stride) = pad-up convention."""
    return {
        lvl: (
            math.ceil(image_height / config.stride(lvl)),
            math.ceil(image_width / config.stride(lvl)),
        )
        for lvl in config.levels
    }


def cell_anchor_extents(config, level):
    """(width, height) of each of the anchors placed at one grid cell."""
    base = config.base_for(level)
    sizes = []
    for m in config.size_multipliers:
        side = base * m
        for r in config.aspect_ratios:
            # area preserved: w*h = side^2, w/h = r
            w = side * math.sqrt(r)
            h = side / math.sqrt(r)
            sizes.append((w, h))
    return np.array(sizes, dtype=np.float64)


def generate_anchors(config, image_width, image_height):
    """Dense anchor grid; centers at (i + 0.5) * stride per level."""
    extents = feature_extents(config, image_width, image_height)
    all_boxes = []
    all_levels = []
    all_locations = []
    slices = {}
    offset = 0
    for lvl in config.levels:
        fh, fw = extents[lvl]
        stride = config.stride(lvl)
        wh = cell_anchor_extents(config, lvl)  # (A, 2)
        a = wh.shape[0]
        cy = (np.arange(fh) + 0.5) * stride
        cx = (np.arange(fw) + 0.5) * stride
        grid_cy, grid_cx = np.meshgrid(cy, cx, indexing="ij")  # (fh, fw)
        centers = np.stack([grid_cx, grid_cy], axis=-1).reshape(-1, 1, 2)  # (fh*fw, 1, 2)
        half = 0.5 * wh.reshape(1, a, 2)
        boxes = np.concatenate([centers - half, centers + half], axis=2)  # (fh*fw, A, 4)
        boxes = boxes.reshape(-1, 4)
        count = boxes.shape[0]
        iy, ix = np.meshgrid(np.arange(fh), np.arange(fw), indexing="ij")
        locs = np.stack([iy, ix], axis=-1).reshape(-1, 1, 2)
        locs = np.broadcast_to(locs, (fh * fw, a, 2)).reshape(-1, 2)
        all_boxes.append(boxes)
        all_levels.append(np.full(count, lvl, dtype=np.int32))
        all_locations.append(locs)
        slices[lvl] = slice(offset, offset + count)
        offset += count
    return AnchorSet(
        boxes=np.concatenate(all_boxes).astype(np.float32),
        level_of=np.concatenate(all_levels),
        location_of=np.concatenate(all_locations).astype(np.int32),
        level_slices=slices,
    )


@dataclass
class MatchResult:
    labels: np.ndarray  # (A,) int8: POSITIVE / NEGATIVE / IGNORE
    gt_index: np.ndarray  # (A,) int32, -1 when unmatched
    source: np.ndarray  # (A,) int8: SOURCE_* for positives, SOURCE_NONE otherwise

    @property
    def positive_indices(self):
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def num_positives(self):
        return int((self.labels == POSITIVE).sum())


def match(anchors, gt_boxes, pos_thresh=0.5, neg_thresh=0.4, best_match_thresh=None):
    """Assign anchors to ground truths.

    ``best_match_thresh`` in [0, 0.5] enables the relaxation pass; None
    disables it (0.5 is equivalent in effect since the threshold rule
    already claims any overlap >= 0.5). Argmax ties break toward the lower
    index on both axes; ground truths are relaxed in index order.
    """
    boxes = anchors.boxes if isinstance(anchors, AnchorSet) else np.asarray(anchors)
    if pos_thresh < neg_thresh:
        raise ValueError(f"pos_thresh {pos_thresh} < neg_thresh {neg_thresh}")
    if best_match_thresh is not None and not 0.0 <= best_match_thresh <= pos_thresh:
        raise ValueError(
            f"best_match_thresh {best_match_thresh} outside [0, pos_thresh={pos_thresh}]"
        )
    a = boxes.shape[0]
    labels = np.full(a, NEGATIVE, dtype=np.int8)
    gt_index = np.full(a, -1, dtype=np.int32)
    source = np.full(a, SOURCE_NONE, dtype=np.int8)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    g = gt_boxes.shape[0]
    if g == 0:
        return MatchResult(labels, gt_index, source)

    overlaps = iou_matrix(boxes, gt_boxes)  # (A, G)
    best_gt = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(a), best_gt]

    pos = best_iou >= pos_thresh
    labels[pos] = POSITIVE
    gt_index[pos] = best_gt[pos]
    source[pos] = SOURCE_THRESHOLD
    labels[~pos & (best_iou >= neg_thresh)] = IGNORE

    if best_match_thresh is not None:
        covered = np.zeros(g, dtype=bool)
        covered[gt_index[pos]] = True
        for gi in np.flatnonzero(~covered):
            ai = int(overlaps[:, gi].argmax())
            if overlaps[ai, gi] > best_match_thresh and labels[ai] != POSITIVE:
                labels[ai] = POSITIVE
                gt_index[ai] = gi
                source[ai] = SOURCE_BEST_MATCH
    return MatchResult(labels, gt_index, source)
