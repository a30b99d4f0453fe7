"""Training: loss assembly over a batch, SGD with momentum and weight
decay, the step-schedule learning rate, metric/statistics logging, and
the checkpoint format.

Matching and regression targets depend only on the fixed anchors and each
image's ground truth, so they are computed once per image and cached for
the whole run. Mask training follows the inference-style selection chain
on the current (detached) predictions, then injects the ground-truth
boxes as additional proposals.
"""

import json
import math
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff
from .anchors import POSITIVE, match
from .autodiff import Tensor
from .geometry import Box, encode_boxes, iou_matrix
from .losses import (
    LossReport,
    SelfAdjustState,
    focal_loss,
    mask_bce,
    self_adjusting_smooth_l1,
    smooth_l1,
)
from .masks import MaskProposal, assign_level, rasterize_mask_target
from .model import Detector, DetectorConfig, InferenceConfig, extract_roi_features


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    base_lr: float = 0.005
    lr_drop_fracs: tuple = (2.0 / 3.0, 8.0 / 9.0)
    lr_drop_factor: float = 0.1
    warmup_iters: int = 100
    batch_size: int = 4
    weight_decay: float = 1e-4
    momentum: float = 0.9
    # matching
    pos_thresh: float = 0.5
    neg_thresh: float = 0.4
    best_match_enabled: bool = True
    best_match_thresh: float = 0.0
    # box regression loss
    self_adjust_enabled: bool = True
    beta_hat: float = 0.11
    fixed_beta: float = 0.11
    shared_channels: bool = False
    # mask training
    mask_head_enabled: bool = True
    mask_proposal_budget: int = 100
    mask_match_thresh: float = 0.5

    def __post_init__(self):
        pts = self.drop_points()
        ok = all(0 < p < self.iterations for p in pts) and all(
            a < b for a, b in zip(pts, pts[1:])
        )
        if not ok:
            raise ValueError(
                f"lr drop points {pts} must be strictly increasing and inside "
                f"(0, {self.iterations})"
            )

    def drop_points(self):
        return [int(math.floor(f * self.iterations)) for f in self.lr_drop_fracs]

    def lr_at(self, iteration):
        lr = self.base_lr
        if self.warmup_iters > 0 and iteration < self.warmup_iters:
            return lr * (iteration + 1) / self.warmup_iters
        for point in self.drop_points():
            if iteration >= point:
                lr *= self.lr_drop_factor
        return lr


class SGD:
    """SGD with momentum and decoupled-from-nothing L2 weight decay:
    v = m*v + g + wd*w; w -= lr*v. Parameters without a gradient are
    left untouched."""

    def __init__(self, named_params, momentum=0.9, weight_decay=1e-4):
        self.named_params = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def step(self, lr):
        for name, p in self.named_params:
            if p.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            if self.weight_decay:
                v += self.weight_decay * p.data
            p.data -= np.float32(lr) * v

    def zero_grads(self):
        for _, p in self.named_params:
            p.grad = None


@dataclass
class ImageTargets:
    """Per-image matching products, fixed for the whole run."""

    included_rows: np.ndarray  # anchor rows that enter the classification loss
    cls_targets: np.ndarray  # class index or -1 background, aligned to included_rows
    positive_rows: np.ndarray
    reg_targets: np.ndarray  # (P, 4) encode(gt, anchor)
    num_positives: int


def build_targets(anchorset, scene, cfg):
    """Match one image's ground truth against the anchor grid and freeze
    the classification/regression targets."""
    bm = cfg.best_match_thresh if cfg.best_match_enabled else None
    result = match(
        anchorset,
        scene.boxes,
        pos_thresh=cfg.pos_thresh,
        neg_thresh=cfg.neg_thresh,
        best_match_thresh=bm,
    )
    labels = result.labels
    included = np.flatnonzero(labels != -1)
    cls_targets = np.full(included.size, -1, dtype=np.int64)
    pos_in_included = labels[included] == POSITIVE
    matched_gt = result.gt_index[included[pos_in_included]]
    cls_targets[pos_in_included] = scene.class_ids[matched_gt]
    pos_rows = np.flatnonzero(labels == POSITIVE)
    if pos_rows.size:
        reg_targets = encode_boxes(
            scene.boxes[result.gt_index[pos_rows]], anchorset.boxes[pos_rows]
        ).astype(np.float32)
    else:
        reg_targets = np.zeros((0, 4), dtype=np.float32)
    return ImageTargets(
        included_rows=included,
        cls_targets=cls_targets,
        positive_rows=pos_rows,
        reg_targets=reg_targets,
        num_positives=int(pos_rows.size),
    )


def train_step(detector, scenes, targets, state, cfg, optimizer, lr, infer_cfg=None):
    """One optimizer step over a batch of scenes; returns a LossReport."""
    n = len(scenes)
    images = Tensor(np.stack([_image_chw(s, detector.config.image_channels) for s in scenes]))
    pyramid, cls_map, reg_map = detector.forward(images)
    cls_flat, reg_flat = detector.flatten_outputs(cls_map, reg_map)
    a_total = cls_flat.data.shape[1]
    k = cls_flat.data.shape[2]

    included, cls_tgt, pos_rows, reg_tgt = [], [], [], []
    for i, tg in enumerate(targets):
        included.append(tg.included_rows + i * a_total)
        cls_tgt.append(tg.cls_targets)
        pos_rows.append(tg.positive_rows + i * a_total)
        reg_tgt.append(tg.reg_targets)
    included = np.concatenate(included)
    cls_tgt = np.concatenate(cls_tgt)
    pos_rows = np.concatenate(pos_rows)
    reg_tgt = np.concatenate(reg_tgt)
    num_pos = int(sum(tg.num_positives for tg in targets))

    cls_rows = autodiff.take_rows(cls_flat.reshape((n * a_total, k)), included)
    cls_loss = focal_loss(cls_rows, cls_tgt, detector.config.focal, num_positives=num_pos)

    if pos_rows.size:
        pred = autodiff.take_rows(reg_flat.reshape((n * a_total, 4)), pos_rows)
        residuals = pred - Tensor(reg_tgt)
        if cfg.self_adjust_enabled:
            reg_loss = self_adjusting_smooth_l1(
                residuals, state, training=True, num_positives=num_pos
            )
        else:
            reg_loss = smooth_l1(residuals, cfg.fixed_beta) * (1.0 / max(1, num_pos))
    else:
        reg_loss = Tensor(np.zeros((), dtype=np.float32))

    if cfg.mask_head_enabled:
        mask_loss = _mask_loss(
            detector, scenes, pyramid, cls_flat.data, reg_flat.data, cfg, infer_cfg
        )
    else:
        mask_loss = Tensor(np.zeros((), dtype=np.float32))

    total = cls_loss + reg_loss + mask_loss
    optimizer.zero_grads()
    total.backward()
    optimizer.step(lr)
    return LossReport(
        cls_loss=float(cls_loss.data),
        reg_loss=float(reg_loss.data),
        mask_loss=float(mask_loss.data),
        num_positives=num_pos,
        beta_per_channel=state.beta(),
    )


def select_mask_proposals(detections, gt_boxes, gt_classes, budget, canonical,
                          mask_levels=(3, 4, 5)):
    """Training-time proposal set: the top-``budget`` detections from the
    inference chain plus every ground-truth box, so the count is
    (selected + Gt). Detection proposals keep their predicted class;
    injected ones carry the ground-truth class.

    Returns (proposals, source_gt): source_gt[i] is the ground-truth index
    an injected proposal came from, -1 for detection proposals.
    """
    proposals = []
    source_gt = []
    for det in detections[:budget]:
        if det.box.width <= 0 or det.box.height <= 0:
            continue
        lvl = assign_level(det.box, canonical=canonical,
                           min_level=min(mask_levels), max_level=max(mask_levels))
        proposals.append(MaskProposal(det.box, det.class_id, lvl))
        source_gt.append(-1)
    for gi, (box, cls) in enumerate(zip(gt_boxes, gt_classes)):
        b = Box.from_array(box)
        if b.width <= 0 or b.height <= 0:
            continue
        lvl = assign_level(b, canonical=canonical,
                           min_level=min(mask_levels), max_level=max(mask_levels))
        proposals.append(MaskProposal(b, int(cls), lvl, is_ground_truth_injected=True))
        source_gt.append(gi)
    return proposals, source_gt


def _mask_loss(detector, scenes, pyramid, cls_data, reg_data, cfg, infer_cfg):
    infer_cfg = infer_cfg or InferenceConfig()
    chain_cfg = InferenceConfig(
        score_threshold=infer_cfg.score_threshold,
        per_level_topk=infer_cfg.per_level_topk,
        nms_threshold=infer_cfg.nms_threshold,
        max_detections=max(cfg.mask_proposal_budget, 1),
        mask_proposals=min(infer_cfg.mask_proposals, max(cfg.mask_proposal_budget, 1)),
    )
    all_props = []
    img_index = []
    prop_targets = []
    prop_classes = []
    for i, scene in enumerate(scenes):
        if len(scene.boxes) == 0:
            continue
        h, w = scene.image.shape[:2]
        anchorset = detector.anchors_for(w, h)
        detections = detector._postprocess(
            cls_data[i], reg_data[i], anchorset, (w, h), chain_cfg
        )
        proposals, source_gt = select_mask_proposals(
            detections, scene.boxes, scene.class_ids, cfg.mask_proposal_budget,
            detector.config.mask_canonical, detector.config.mask_levels,
        )
        for prop, gt_i in zip(proposals, source_gt):
            if gt_i < 0:
                box = np.array([[prop.box.x1, prop.box.y1, prop.box.x2, prop.box.y2]])
                overlaps = iou_matrix(box, scene.boxes)[0]
                gt_i = int(overlaps.argmax())
                if overlaps[gt_i] < cfg.mask_match_thresh:
                    continue  # poorly localized proposal: no mask supervision
            target = rasterize_mask_target(scene.masks[gt_i], prop.box)
            all_props.append(prop)
            img_index.append(i)
            prop_targets.append(target)
            prop_classes.append(int(scene.class_ids[gt_i]))
    if not all_props:
        return Tensor(np.zeros((), dtype=np.float32))
    feats = extract_roi_features(pyramid, all_props, np.asarray(img_index))
    logits = detector.mask_head(feats)
    return mask_bce(logits, np.stack(prop_targets), np.asarray(prop_classes))


def _image_chw(scene, channels):
    img = np.asarray(scene.image, dtype=np.float32)
    if img.ndim == 2:
        img = img[None]
    elif img.ndim == 3:
        img = img.transpose(2, 0, 1)
    if img.shape[0] != channels:
        raise ValueError(f"scene image has {img.shape[0]} channels, detector wants {channels}")
    return img


@dataclass
class TrainResult:
    detector: Detector
    state: SelfAdjustState
    reports: list = field(default_factory=list)
    wall_time: float = 0.0


def train(detector_cfg, train_cfg, scenes, seed, out_dir=None, log_every=20,
          infer_cfg=None, progress=None):
    """Full training run; deterministic given (configs, scenes, seed).

    Writes metrics.jsonl (one record per logged iteration), loss_stats.csv
    (per-iteration control point and running mean per channel), a final
    checkpoint, and summary.json when ``out_dir`` is given.
    """
    t0 = time.time()
    rng = np.random.default_rng(seed)
    detector = Detector(detector_cfg, rng)
    state = SelfAdjustState(beta_hat=train_cfg.beta_hat,
                            shared_channels=train_cfg.shared_channels)
    optimizer = SGD(detector.params(), momentum=train_cfg.momentum,
                    weight_decay=train_cfg.weight_decay)
    targets = []
    for s in scenes:
        h, w = s.image.shape[:2]
        targets.append(build_targets(detector.anchors_for(w, h), s, train_cfg))

    metrics_f = csv_f = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_f = open(f"{out_dir}/metrics.jsonl", "w")
        csv_f = open(f"{out_dir}/loss_stats.csv", "w")
        channels = ("dx", "dy", "dw", "dh")
        cols = [f"beta_{c}" for c in channels] + [f"mu_{c}" for c in channels]
        csv_f.write("iteration," + ",".join(cols) + "\n")

    order = rng.permutation(len(scenes))
    cursor = 0
    reports = []
    for it in range(train_cfg.iterations):
        if cursor + train_cfg.batch_size > len(order):
            order = rng.permutation(len(scenes))
            cursor = 0
        batch_idx = order[cursor : cursor + train_cfg.batch_size]
        cursor += train_cfg.batch_size
        lr = train_cfg.lr_at(it)
        report = train_step(
            detector,
            [scenes[j] for j in batch_idx],
            [targets[j] for j in batch_idx],
            state,
            train_cfg,
            optimizer,
            lr,
            infer_cfg=infer_cfg,
        )
        reports.append(report)
        if csv_f is not None:
            beta = state.beta()
            mu = state.mu_r if not train_cfg.shared_channels else np.repeat(state.mu_r, 4)
            csv_f.write(
                f"{it}," + ",".join(f"{v:.8f}" for v in beta)
                + "," + ",".join(f"{v:.8f}" for v in mu) + "\n"
            )
        if metrics_f is not None and (it % log_every == 0 or it == train_cfg.iterations - 1):
            rec = {
                "iteration": it,
                "lr": lr,
                "cls_loss": report.cls_loss,
                "reg_loss": report.reg_loss,
                "mask_loss": report.mask_loss,
                "total_loss": report.total,
                "num_positives": report.num_positives,
            }
            metrics_f.write(json.dumps(rec) + "\n")
        if progress is not None and it % log_every == 0:
            progress(it, report)
    wall = time.time() - t0
    if out_dir is not None:
        metrics_f.close()
        csv_f.close()
        save_checkpoint(f"{out_dir}/checkpoint.tdck", detector, state,
                        extra={"train": _cfg_dict(train_cfg), "seed": seed})
        summary = {
            "iterations": train_cfg.iterations,
            "final_total_loss": reports[-1].total if reports else None,
            "final_cls_loss": reports[-1].cls_loss if reports else None,
            "final_reg_loss": reports[-1].reg_loss if reports else None,
            "final_mask_loss": reports[-1].mask_loss if reports else None,
            "wall_time_sec": wall,
            "seed": seed,
            "train_config": _cfg_dict(train_cfg),
            "detector_config": _cfg_dict(detector_cfg),
        }
        with open(f"{out_dir}/summary.json", "w") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
    return TrainResult(detector=detector, state=state, reports=reports, wall_time=wall)


# -- checkpoint format -------------------------------------------------------
# magic "TDCK", u32 version, u64 header length, JSON header (configs, self-
# adjust state, tensor manifest with shapes/offsets), then raw little-endian
# float32 tensor payloads in manifest order.

_CKPT_MAGIC = b"TDCK"
_CKPT_VERSION = 1


def _cfg_dict(cfg):
    import dataclasses

    return dataclasses.asdict(cfg)


def save_checkpoint(path, detector, state, extra=None):
    params = detector.params()
    manifest = []
    offset = 0
    for name, p in params:
        nbytes = p.data.size * 4
        manifest.append({"name": name, "shape": list(p.data.shape), "offset": offset})
        offset += nbytes
    header = {
        "version": _CKPT_VERSION,
        "detector_config": _cfg_dict(detector.config),
        "self_adjust": state.to_dict(),
        "tensors": manifest,
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<IQ", _CKPT_VERSION, len(blob)))
        f.write(blob)
        for _, p in params:
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns (detector, self_adjust_state, header_dict)."""
    from .config import detector_config_from_dict

    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic {magic!r})")
        version, hlen = struct.unpack("<IQ", f.read(12))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    det_cfg = detector_config_from_dict(header["detector_config"])
    detector = Detector(det_cfg, np.random.default_rng(0))
    named = dict(detector.params())
    for entry in header["tensors"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        if name not in named:
            raise ValueError(f"{path}: unknown tensor {name!r} in checkpoint")
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(shape)
        if named[name].data.shape != arr.shape:
            raise ValueError(
                f"{path}: tensor {name!r} shape {arr.shape} != model shape "
                f"{named[name].data.shape}"
            )
        named[name].data = arr.astype(np.float32).copy()
    state = SelfAdjustState.from_dict(header["self_adjust"])
    return detector, state, header
