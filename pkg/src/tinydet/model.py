"""The micro detector: a small from-scratch backbone, a five-level
feature pyramid, shared classification/regression heads, the instance
mask head, and the full inference post-processing chain.

The mask path runs strictly after detections are finalized, so toggling
it cannot change detection outputs; ``last_detection_ops`` records the
op count of the detection path for asserting exactly that.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff, opcount
from .anchors import AnchorConfig, generate_anchors
from .autodiff import Tensor
from .geometry import Box, Detection, clip_boxes, decode_boxes, nms_arrays
from .layers import ConvLayer
from .losses import FocalParams
from .masks import (
    MASK_SIZE,
    InstanceMask,
    MaskHead,
    MaskProposal,
    assign_level,
    roi_align,
)


@dataclass(frozen=True)
class MicroBackboneConfig:
    """Stage widths for the 5 stride-2 convs (strides 2..32) and the
    pyramid width shared by every FPN level."""

    channels_per_stage: tuple = (16, 32, 32, 64, 64)
    fpn_width: int = 32
    levels: tuple = (3, 4, 5, 6, 7)


@dataclass(frozen=True)
class InferenceConfig:
    score_threshold: float = 0.05
    per_level_topk: int = 1000
    nms_threshold: float = 0.4
    max_detections: int = 100
    mask_proposals: int = 50

    def __post_init__(self):
        if self.mask_proposals > self.max_detections:
            raise ValueError(
                f"mask_proposals {self.mask_proposals} > max_detections {self.max_detections}"
            )


@dataclass(frozen=True)
class DetectorConfig:
    num_classes: int = 4
    image_channels: int = 1
    backbone: MicroBackboneConfig = field(default_factory=MicroBackboneConfig)
    anchors: AnchorConfig = field(default_factory=lambda: AnchorConfig(scale_factor=0.125))
    focal: FocalParams = field(default_factory=FocalParams)
    head_depth: int = 4
    mask_levels: tuple = (3, 4, 5)
    # canonical proposal size of the level-assignment rule, scaled like the anchors
    mask_canonical: float = None
    mask_width: int = None

    def __post_init__(self):
        if self.mask_canonical is None:
            object.__setattr__(self, "mask_canonical", 224.0 * self.anchors.scale_factor)
        if self.mask_width is None:
            object.__setattr__(self, "mask_width", self.backbone.fpn_width)


class HeadNet:
    """Conv tower shared across pyramid levels, plus one prediction conv."""

    def __init__(self, rng, width, depth, out_channels, out_bias=0.0):
        self.convs = [ConvLayer(rng, width, width, kernel=3) for _ in range(depth)]
        self.predict = ConvLayer(rng, width, out_channels, kernel=3,
                                 weight_std=0.01, bias_init=out_bias)

    def __call__(self, x):
        for conv in self.convs:
            x = autodiff.relu(conv(x))
        return self.predict(x)

    def params(self, prefix):
        out = []
        for i, conv in enumerate(self.convs):
            out += conv.params(f"{prefix}.conv{i}")
        out += self.predict.params(f"{prefix}.predict")
        return out


def build_heads(rng, fpn_width, num_anchors, num_classes, depth=4, focal=None):
    """Classification and class-agnostic regression heads.

    Prediction convs draw weights from N(0, 0.01); the classification bias
    makes the initial sigmoid sit at the focal prior probability.
    """
    focal = focal or FocalParams()
    cls_head = HeadNet(rng, fpn_width, depth, num_anchors * num_classes,
                       out_bias=focal.logit_prior)
    reg_head = HeadNet(rng, fpn_width, depth, num_anchors * 4)
    return cls_head, reg_head


class Detector:
    """Single-shot detector with a training-time instance mask head."""

    def __init__(self, config, rng):
        self.config = config
        bb = config.backbone
        chans = bb.channels_per_stage
        in_ch = config.image_channels
        self.stages = []
        prev = in_ch
        for ch in chans:
            self.stages.append(ConvLayer(rng, prev, ch, kernel=3, stride=2))
            prev = ch
        w = bb.fpn_width
        # stage outputs at strides (2, 4, 8, 16, 32) = (C1, C2, C3, C4, C5)
        self.lateral = {
            3: ConvLayer(rng, chans[2], w, kernel=1),
            4: ConvLayer(rng, chans[3], w, kernel=1),
            5: ConvLayer(rng, chans[4], w, kernel=1),
        }
        self.smooth = {lvl: ConvLayer(rng, w, w, kernel=3) for lvl in (3, 4, 5)}
        if 2 in config.mask_levels:
            self.lateral[2] = ConvLayer(rng, chans[1], w, kernel=1)
            self.smooth[2] = ConvLayer(rng, w, w, kernel=3)
        self.p6_conv = ConvLayer(rng, chans[4], w, kernel=3, stride=2)
        self.p7_conv = ConvLayer(rng, w, w, kernel=3, stride=2)
        self.cls_head, self.reg_head = build_heads(
            rng, w, config.anchors.anchors_per_location, config.num_classes,
            depth=config.head_depth, focal=config.focal,
        )
        self.mask_head = MaskHead(rng, w, config.num_classes, width=config.mask_width)
        self.last_detection_ops = 0
        self._anchor_cache = {}

    # -- parameters -------------------------------------------------------
    def params(self):
        out = []
        for i, st in enumerate(self.stages):
            out += st.params(f"backbone.stage{i}")
        for lvl in sorted(self.lateral):
            out += self.lateral[lvl].params(f"fpn.lateral{lvl}")
            out += self.smooth[lvl].params(f"fpn.smooth{lvl}")
        out += self.p6_conv.params("fpn.p6")
        out += self.p7_conv.params("fpn.p7")
        out += self.cls_head.params("cls_head")
        out += self.reg_head.params("reg_head")
        out += self.mask_head.params("mask_head")
        return out

    def zero_grads(self):
        for _, p in self.params():
            p.grad = None

    def anchors_for(self, width, height):
        key = (width, height)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = generate_anchors(self.config.anchors, width, height)
        return self._anchor_cache[key]

    # -- forward ------------------------------------------------------------
    def forward(self, images):
        """images: Tensor (N, C, H, W) -> (pyramid, cls_map, reg_map) dicts."""
        x = images
        stage_outs = []
        for st in self.stages:
            x = autodiff.relu(st(x))
            stage_outs.append(x)
        c2, c3, c4, c5 = stage_outs[1], stage_outs[2], stage_outs[3], stage_outs[4]
        pyramid = {}
        p5 = self.lateral[5](c5)
        p4 = self.lateral[4](c4) + autodiff.upsample2x_nearest(p5)
        p3 = self.lateral[3](c3) + autodiff.upsample2x_nearest(p4)
        pyramid[5] = self.smooth[5](p5)
        pyramid[4] = self.smooth[4](p4)
        pyramid[3] = self.smooth[3](p3)
        if 2 in self.lateral:
            p2 = self.lateral[2](c2) + autodiff.upsample2x_nearest(p3)
            pyramid[2] = self.smooth[2](p2)
        pyramid[6] = self.p6_conv(c5)
        pyramid[7] = self.p7_conv(autodiff.relu(pyramid[6]))
        cls_map = {}
        reg_map = {}
        for lvl in self.config.backbone.levels:
            cls_map[lvl] = self.cls_head(pyramid[lvl])
            reg_map[lvl] = self.reg_head(pyramid[lvl])
        return pyramid, cls_map, reg_map

    def flatten_outputs(self, cls_map, reg_map):
        """Per-level (N, A*K, H, W) maps -> (N, total_anchors, K) and
        (N, total_anchors, 4), in anchor enumeration order."""
        num_anchors = self.config.anchors.anchors_per_location
        k = self.config.num_classes
        cls_parts = []
        reg_parts = []
        for lvl in self.config.backbone.levels:
            cls_parts.append(_to_rows(cls_map[lvl], num_anchors, k))
            reg_parts.append(_to_rows(reg_map[lvl], num_anchors, 4))
        return autodiff.concatenate(cls_parts, axis=1), autodiff.concatenate(reg_parts, axis=1)

    # -- inference ------------------------------------------------------------
    def infer(self, image, cfg=None, mask_enabled=True):
        """Full post-processing chain on one image.

        Returns (detections, masks): score-filtered, per-level top-k,
        per-class NMS across pooled levels, global top-N; the mask path
        runs on the top-scoring survivors and never alters detections.
        """
        cfg = cfg or InferenceConfig()
        img = _as_image_array(image, self.config.image_channels)
        _, h, w = img.shape
        start_ops = opcount.total()
        with autodiff.no_grad():
            images = Tensor(img[None])
            pyramid, cls_map, reg_map = self.forward(images)
            cls_flat, reg_flat = self.flatten_outputs(cls_map, reg_map)
        anchorset = self.anchors_for(w, h)
        detections = self._postprocess(
            cls_flat.data[0], reg_flat.data[0], anchorset, (w, h), cfg
        )
        self.last_detection_ops = opcount.total() - start_ops
        masks = []
        if mask_enabled:
            masks = self._predict_masks(pyramid, detections, cfg)
        return detections, masks

    def _postprocess(self, cls_rows, reg_rows, anchorset, image_wh, cfg):
        """cls_rows: (A_total, K) logits; reg_rows: (A_total, 4) deltas."""
        w, h = image_wh
        scores_all = _np_sigmoid(cls_rows)
        picked = []  # (box, score, class_id, level)
        for lvl, sl in anchorset.level_slices.items():
            scores = scores_all[sl]  # (a, K)
            flat = scores.reshape(-1)
            keep = np.flatnonzero(flat >= cfg.score_threshold)
            if keep.size == 0:
                continue
            if keep.size > cfg.per_level_topk:
                order = keep[np.argsort(-flat[keep], kind="stable")[: cfg.per_level_topk]]
            else:
                order = keep
            k = scores.shape[1]
            anchor_idx = order // k
            class_idx = order % k
            boxes = decode_boxes(reg_rows[sl][anchor_idx], anchorset.boxes[sl][anchor_idx])
            boxes = clip_boxes(boxes, w, h)
            for b, s, c in zip(boxes, flat[order], class_idx):
                picked.append((b, float(s), int(c), lvl))
        if not picked:
            return []
        all_boxes = np.array([p[0] for p in picked])
        all_scores = np.array([p[1] for p in picked])
        all_classes = np.array([p[2] for p in picked])
        kept = []
        for c in np.unique(all_classes):
            idx = np.flatnonzero(all_classes == c)
            keep_c = nms_arrays(all_boxes[idx], all_scores[idx], cfg.nms_threshold)
            kept.extend(idx[keep_c].tolist())
        kept = sorted(kept, key=lambda i: (-all_scores[i], i))[: cfg.max_detections]
        return [
            Detection(
                box=Box.from_array(all_boxes[i]),
                score=float(all_scores[i]),
                class_id=int(all_classes[i]),
                level=int(picked[i][3]),
            )
            for i in kept
        ]

    def _predict_masks(self, pyramid, detections, cfg):
        proposals = []
        for det in detections[: cfg.mask_proposals]:
            if det.box.width <= 0 or det.box.height <= 0:
                continue
            lvl = assign_level(
                det.box,
                canonical=self.config.mask_canonical,
                min_level=min(self.config.mask_levels),
                max_level=max(self.config.mask_levels),
            )
            proposals.append(MaskProposal(det.box, det.class_id, lvl))
        if not proposals:
            return []
        with autodiff.no_grad():
            feats = extract_roi_features(pyramid, proposals, image_index=None)
            logits = self.mask_head(feats)
        probs = _np_sigmoid(logits.data)
        out = []
        for i, prop in enumerate(proposals):
            out.append(
                InstanceMask(
                    grid=probs[i, prop.class_id].astype(np.float32),
                    box=prop.box,
                    class_id=prop.class_id,
                )
            )
        return out


def extract_roi_features(pyramid, proposals, image_index=None):
    """ROI-align each proposal on its assigned level, restitched in input
    order. ``pyramid`` maps level -> Tensor (N, C, Hl, Wl); image_index
    gives each proposal's batch element (None = single image 0)."""
    n_props = len(proposals)
    if image_index is None:
        image_index = np.zeros(n_props, dtype=np.int64)
    groups = {}
    for i, prop in enumerate(proposals):
        groups.setdefault((int(image_index[i]), prop.assigned_level), []).append(i)
    parts = []
    order = []
    for (img_i, lvl), idxs in sorted(groups.items()):
        boxes = np.array(
            [[proposals[i].box.x1, proposals[i].box.y1,
              proposals[i].box.x2, proposals[i].box.y2] for i in idxs]
        )
        feat = pyramid[lvl][img_i]
        parts.append(roi_align(feat, boxes, stride=2**lvl))
        order.extend(idxs)
    stacked = autodiff.concatenate(parts, axis=0) if len(parts) > 1 else parts[0]
    inverse = np.argsort(np.asarray(order, dtype=np.int64), kind="stable")
    return autodiff.take_rows(stacked, inverse)


def _to_rows(head_out, num_anchors, per_anchor):
    """(N, A*D, H, W) -> (N, H*W*A, D) matching anchor enumeration order."""
    n, ad, h, w = head_out.data.shape
    t = head_out.reshape((n, num_anchors, per_anchor, h, w))
    t = t.transpose((0, 3, 4, 1, 2))
    return t.reshape((n, h * w * num_anchors, per_anchor))


def _as_image_array(image, channels):
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.shape[0] != channels:
        raise ValueError(f"expected {channels}-channel image, got shape {arr.shape}")
    return arr


def _np_sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
