"""COCO-protocol average precision over boxes and instance masks.

Protocol (the test-suite reference implements the same rules
independently):

- IoU thresholds 0.50:0.05:0.95; AP is the 101-point interpolated
  average (precision at recall r = max precision over PR points whose
  recall >= r, 0 if none), averaged over thresholds and over classes
  that have at least one ground truth.
- Detections are matched greedily per image in canonical order
  (descending score, then box coordinates lexicographically): each
  detection takes the unused same-class ground truth with the highest
  IoU >= threshold (IoU ties toward the lower ground-truth index).
- PR points are computed at distinct-score boundaries of the pooled
  detection list, which makes the result invariant to image order and
  to detection order within equal scores.
- Size buckets S/M/L split ground truths by mask pixel area at 32^2 and
  96^2 scaled by (image_size / 800)^2. Out-of-bucket ground truths are
  ignored: detections prefer countable ground truths, may match an
  ignored one (and then drop out of scoring), and unmatched detections
  whose own area lies outside the bucket are dropped rather than counted
  as false positives.
- Box AP uses box IoU and box areas for detections; mask AP uses
  pixelwise mask IoU and mask pixel counts.
"""

from dataclasses import dataclass

import numpy as np

from .geometry import iou_matrix
from .masks import paste_mask

IOU_THRESHOLDS = np.arange(0.5, 1.0, 0.05).round(2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
SIZE_REFERENCE = 800.0  # image scale the 32^2 / 96^2 area thresholds assume


@dataclass
class MetricSet:
    ap: float
    ap50: float
    ap75: float
    ap_s: float
    ap_m: float
    ap_l: float
    per_class: dict


@dataclass
class EvalResult:
    box: MetricSet
    mask: MetricSet = None


def evaluate(detections_per_image, scenes, masks_per_image=None, num_classes=None):
    """Score per-image detection lists (and optional instance masks)
    against ground-truth scenes."""
    if len(detections_per_image) != len(scenes):
        raise ValueError("detections and scenes must align per image")
    if num_classes is None:
        num_classes = int(max((s.class_ids.max() for s in scenes if len(s.class_ids)),
                              default=-1)) + 1
    image_size = max(scenes[0].image.shape) if scenes else SIZE_REFERENCE
    factor = (image_size / SIZE_REFERENCE) ** 2
    small, medium = 32.0**2 * factor, 96.0**2 * factor
    buckets = {
        "all": (0.0, np.inf),
        "s": (0.0, small),
        "m": (small, medium),
        "l": (medium, np.inf),
    }

    box_entries = _box_entries(detections_per_image, scenes, num_classes)
    box_metrics = _metric_set(box_entries, buckets, num_classes)
    mask_metrics = None
    if masks_per_image is not None:
        mask_entries = _mask_entries(detections_per_image, masks_per_image, scenes,
                                     num_classes)
        mask_metrics = _metric_set(mask_entries, buckets, num_classes)
    return EvalResult(box=box_metrics, mask=mask_metrics)


class _ClassImage:
    """Per (class, image) pre-sorted detections and ground truths."""

    __slots__ = ("scores", "det_areas", "ious", "gt_areas")

    def __init__(self, scores, det_areas, ious, gt_areas):
        self.scores = scores
        self.det_areas = det_areas
        self.ious = ious  # (n_det, n_gt)
        self.gt_areas = gt_areas


def _canonical_order(scores, boxes):
    keys = np.empty(len(scores), dtype=[("s", "f8"), ("a", "f8"), ("b", "f8"),
                                        ("c", "f8"), ("d", "f8")])
    keys["s"] = -np.asarray(scores)
    keys["a"], keys["b"], keys["c"], keys["d"] = (
        boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    )
    return np.argsort(keys, order=("s", "a", "b", "c", "d"), kind="stable")


def _box_entries(detections_per_image, scenes, num_classes):
    entries = {c: [] for c in range(num_classes)}
    for dets, scene in zip(detections_per_image, scenes):
        gt_areas_all = np.array([m.sum() for m in scene.masks], dtype=np.float64)
        for c in range(num_classes):
            det_c = [d for d in dets if d.class_id == c]
            boxes = np.array(
                [[d.box.x1, d.box.y1, d.box.x2, d.box.y2] for d in det_c]
            ).reshape(-1, 4)
            scores = np.array([d.score for d in det_c], dtype=np.float64)
            order = _canonical_order(scores, boxes) if len(det_c) else np.zeros(0, np.int64)
            boxes, scores = boxes[order], scores[order]
            gt_sel = scene.class_ids == c
            gt_boxes = scene.boxes[gt_sel].astype(np.float64).reshape(-1, 4)
            det_areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
            entries[c].append(
                _ClassImage(scores, det_areas, iou_matrix(boxes, gt_boxes),
                            gt_areas_all[gt_sel])
            )
    return entries


def _mask_iou_matrix(pred_masks, gt_masks):
    n, m = len(pred_masks), len(gt_masks)
    out = np.zeros((n, m))
    for i, pm in enumerate(pred_masks):
        for j, gm in enumerate(gt_masks):
            inter = np.logical_and(pm, gm).sum()
            union = np.logical_or(pm, gm).sum()
            out[i, j] = inter / union if union > 0 else 0.0
    return out


def mask_scores_for(detections, masks):
    """Score each instance mask by its source detection (matched on the
    exact box and class); unmatched masks score 0."""
    lookup = {}
    for d in detections:
        key = (d.box.x1, d.box.y1, d.box.x2, d.box.y2, d.class_id)
        lookup[key] = max(lookup.get(key, 0.0), d.score)
    return [
        lookup.get((m.box.x1, m.box.y1, m.box.x2, m.box.y2, m.class_id), 0.0)
        for m in masks
    ]


def _mask_entries(detections_per_image, masks_per_image, scenes, num_classes):
    entries = {c: [] for c in range(num_classes)}
    for dets, inst_masks, scene in zip(detections_per_image, masks_per_image, scenes):
        h, w = scene.image.shape[:2]
        scores_all = mask_scores_for(dets, inst_masks)
        pasted = [paste_mask(m.grid, m.box, h, w) for m in inst_masks]
        gt_areas_all = np.array([m.sum() for m in scene.masks], dtype=np.float64)
        for c in range(num_classes):
            idx = [i for i, m in enumerate(inst_masks) if m.class_id == c]
            scores = np.array([scores_all[i] for i in idx], dtype=np.float64)
            boxes = np.array(
                [[inst_masks[i].box.x1, inst_masks[i].box.y1,
                  inst_masks[i].box.x2, inst_masks[i].box.y2] for i in idx]
            ).reshape(-1, 4)
            order = _canonical_order(scores, boxes) if idx else np.zeros(0, np.int64)
            pred = [pasted[idx[i]] for i in order]
            scores = scores[order]
            det_areas = np.array([p.sum() for p in pred], dtype=np.float64)
            gt_sel = scene.class_ids == c
            gt_masks = [m.astype(bool) for m, s in zip(scene.masks, gt_sel) if s]
            entries[c].append(
                _ClassImage(scores, det_areas, _mask_iou_matrix(pred, gt_masks),
                            gt_areas_all[gt_sel])
            )
    return entries


def _metric_set(entries, buckets, num_classes):
    ap_by = {}
    per_class_all = {}
    for name, area_range in buckets.items():
        per_class = {}
        per_class_by_thresh = {}
        for c in range(num_classes):
            aps = _class_ap(entries[c], area_range)
            if aps is None:
                continue
            per_class[c] = float(np.mean(aps))
            per_class_by_thresh[c] = aps
        if per_class:
            ap_by[name] = float(np.mean(list(per_class.values())))
            if name == "all":
                per_class_all = per_class
                values = np.array([per_class_by_thresh[c] for c in per_class_by_thresh])
                ap50 = float(values[:, 0].mean())
                ap75 = float(values[:, 5].mean())
        else:
            ap_by[name] = 0.0
            if name == "all":
                ap50 = ap75 = 0.0
    return MetricSet(
        ap=ap_by["all"], ap50=ap50, ap75=ap75,
        ap_s=ap_by["s"], ap_m=ap_by["m"], ap_l=ap_by["l"],
        per_class=per_class_all,
    )


def _class_ap(class_images, area_range):
    """AP at each IoU threshold for one class and area bucket, or None if
    the bucket holds no ground truth of this class."""
    lo, hi = area_range
    n_gt = sum(
        int(np.sum((ci.gt_areas >= lo) & (ci.gt_areas < hi))) for ci in class_images
    )
    if n_gt == 0:
        return None
    aps = []
    for t in IOU_THRESHOLDS:
        scores = []
        flags = []  # 1 tp, 0 fp
        for ci in class_images:
            gt_ignore = ~((ci.gt_areas >= lo) & (ci.gt_areas < hi))
            used = np.zeros(len(ci.gt_areas), dtype=bool)
            for di in range(len(ci.scores)):
                ious = ci.ious[di]
                best, best_iou = -1, -1.0
                matched_ignore = False
                for gi in range(len(ci.gt_areas)):
                    if used[gi] or ious[gi] < t:
                        continue
                    if gt_ignore[gi]:
                        matched_ignore = True
                        continue
                    if ious[gi] > best_iou:  # IoU ties keep the lower gt index
                        best, best_iou = gi, ious[gi]
                if best >= 0:
                    used[best] = True
                    scores.append(ci.scores[di])
                    flags.append(1)
                elif matched_ignore or not (lo <= ci.det_areas[di] < hi):
                    continue  # ignored detection: neither tp nor fp
                else:
                    scores.append(ci.scores[di])
                    flags.append(0)
        aps.append(_ap_101(np.asarray(scores), np.asarray(flags), n_gt))
    return aps


def _ap_101(scores, flags, n_gt):
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    scores, flags = scores[order], flags[order]
    # PR points only at distinct-score boundaries: invariant to tie order
    boundary = np.flatnonzero(np.diff(scores) != 0)
    ends = np.concatenate([boundary, [scores.size - 1]])
    cum_tp = np.cumsum(flags)[ends]
    cum_fp = np.cumsum(1 - flags)[ends]
    recalls = cum_tp / n_gt
    precisions = cum_tp / np.maximum(cum_tp + cum_fp, 1)
    # running max of precision from the right = interpolated precision
    interp = np.maximum.accumulate(precisions[::-1])[::-1]
    idx = np.searchsorted(recalls, RECALL_POINTS, side="left")
    out = np.where(idx < len(recalls), interp[np.minimum(idx, len(recalls) - 1)], 0.0)
    return float(out.mean())
