"""Instance-mask machinery downstream of box predictions: pyramid level
assignment for proposals, ROI-Align feature extraction, 28x28 training
target rasterization, mask pasting, and the mask head network.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels, autodiff, opcount
from .autodiff import Tensor, _accumulate, _make
from .geometry import Box
from .layers import ConvLayer, DeconvLayer

MIN_MASK_LEVEL = 3
MAX_MASK_LEVEL = 5
ROI_SIZE = 14
MASK_SIZE = 28


@dataclass(frozen=True)
class MaskProposal:
    box: Box
    class_id: int
    assigned_level: int
    is_ground_truth_injected: bool = False


@dataclass
class InstanceMask:
    grid: np.ndarray  # (MASK_SIZE, MASK_SIZE) probabilities in [0, 1]
    box: Box
    class_id: int


def assign_level(box, k0=4, canonical=224.0, min_level=MIN_MASK_LEVEL,
                 max_level=MAX_MASK_LEVEL):
    """Pyramid level for sampling a proposal's features:
    floor(k0 + log2(sqrt(w*h) / canonical)), clamped to [min, max]."""
    w = box.x2 - box.x1
    h = box.y2 - box.y1
    if w <= 0 or h <= 0:
        raise ValueError(f"assign_level: box must have positive area, got {box}")
    k = math.floor(k0 + math.log2(math.sqrt(w * h) / canonical))
    return int(min(max(k, min_level), max_level))


def roi_align(feature, boxes, stride, out_size=ROI_SIZE, sampling=2):
    """Autodiff-tracked ROI-Align over one feature map.

    feature: Tensor (C, H, W) at the given stride; boxes: (R, 4) array in
    image coordinates. Output (R, C, out, out); gradients flow to the
    feature map only (box coordinates are sampling positions, not
    differentiable inputs here).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scale = 1.0 / float(stride)
    out = _kernels.roi_align_forward(feature.data, boxes, scale, out_size, sampling)
    opcount.add(out.size * sampling * sampling * 4)

    def backward(g):
        dfeat = _kernels.roi_align_backward(
            np.ascontiguousarray(g), boxes, scale, feature.data.shape, out_size, sampling
        )
        opcount.add(out.size * sampling * sampling * 4)
        _accumulate(feature, dfeat)

    return _make(out, (feature,), backward)


def _bilinear_sample(arr, ys, xs):
    """Bilinear read of a 2D array at pixel-center coordinates.

    arr[r, c] is treated as the value at (y, x) = (r + 0.5, c + 0.5);
    points outside the array read zero.
    """
    h, w = arr.shape
    fy = ys - 0.5
    fx = xs - 0.5
    y0 = np.floor(fy).astype(np.int64)
    x0 = np.floor(fx).astype(np.int64)
    ly = fy - y0
    lx = fx - x0
    out = np.zeros(ys.shape, dtype=np.float64)
    for di, dj, wy, wx in (
        (0, 0, 1 - ly, 1 - lx),
        (0, 1, 1 - ly, lx),
        (1, 0, ly, 1 - lx),
        (1, 1, ly, lx),
    ):
        yy = y0 + di
        xx = x0 + dj
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        out += np.where(valid, arr[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)], 0.0) * wy * wx
    return out


def rasterize_mask_target(gt_mask, box, out_size=MASK_SIZE):
    """Ground-truth mask restricted to ``box``, resampled to out_size^2 and
    thresholded at 0.5. A box disjoint from the mask gives all zeros."""
    if box.x2 <= box.x1 or box.y2 <= box.y1:
        raise ValueError(f"rasterize_mask_target: box must have positive area, got {box}")
    mask = np.asarray(gt_mask, dtype=np.float64)
    cell = (np.arange(out_size) + 0.5) / out_size
    ys = box.y1 + cell * (box.y2 - box.y1)
    xs = box.x1 + cell * (box.x2 - box.x1)
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    vals = _bilinear_sample(mask, grid_y, grid_x)
    return (vals >= 0.5).astype(np.float32)


def paste_mask(grid, box, image_height, image_width, threshold=0.5):
    """Project a mask grid predicted over ``box`` back onto the image grid.

    Inverse resampling of rasterize_mask_target with edge clamping inside
    the box; pixels outside the box are 0. Returns a bool (H, W) mask.
    """
    out = np.zeros((image_height, image_width), dtype=bool)
    x1 = max(int(math.floor(box.x1)), 0)
    y1 = max(int(math.floor(box.y1)), 0)
    x2 = min(int(math.ceil(box.x2)), image_width)
    y2 = min(int(math.ceil(box.y2)), image_height)
    if x2 <= x1 or y2 <= y1 or box.x2 <= box.x1 or box.y2 <= box.y1:
        return out
    size = grid.shape[0]
    pys = np.arange(y1, y2) + 0.5
    pxs = np.arange(x1, x2) + 0.5
    gy = (pys - box.y1) / (box.y2 - box.y1) * size - 0.5
    gx = (pxs - box.x1) / (box.x2 - box.x1) * size - 0.5
    gy = np.clip(gy, 0, size - 1)
    gx = np.clip(gx, 0, size - 1)
    grid_y, grid_x = np.meshgrid(gy + 0.5, gx + 0.5, indexing="ij")
    vals = _bilinear_sample(np.asarray(grid, dtype=np.float64), grid_y, grid_x)
    inside = vals >= threshold
    # only pixels whose centers fall inside the box belong to the instance
    cx_ok = (pxs >= box.x1) & (pxs <= box.x2)
    cy_ok = (pys >= box.y1) & (pys <= box.y2)
    inside &= cy_ok[:, None] & cx_ok[None, :]
    out[y1:y2, x1:x2] = inside
    return out


class MaskHead:
    """Four 3x3 convs at 14x14, a 2x2 stride-2 transposed conv up to 28x28
    (with relu), and a 1x1 per-class logit predictor."""

    def __init__(self, rng, in_channels, num_classes, width=None):
        width = width or in_channels
        self.convs = [
            ConvLayer(rng, in_channels if i == 0 else width, width, kernel=3)
            for i in range(4)
        ]
        self.deconv = DeconvLayer(rng, width, width)
        self.predictor = ConvLayer(rng, width, num_classes, kernel=1, weight_std=0.01)
        self.num_classes = num_classes

    def __call__(self, features):
        x = features
        for conv in self.convs:
            x = autodiff.relu(conv(x))
        x = autodiff.relu(self.deconv(x))
        return self.predictor(x)

    def params(self, prefix="mask_head"):
        out = []
        for i, conv in enumerate(self.convs):
            out += conv.params(f"{prefix}.conv{i}")
        out += self.deconv.params(f"{prefix}.deconv")
        out += self.predictor.params(f"{prefix}.predictor")
        return out
