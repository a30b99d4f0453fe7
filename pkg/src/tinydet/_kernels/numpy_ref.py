"""Pure-NumPy implementations of the hot kernels.

Same contract as the compiled core in ``_core.pyx``: 2D convolution
forward/backward (im2col + BLAS matmul), ROI-Align forward/backward
(bilinear sampling with zero padding outside the map), and greedy NMS.
Used automatically when the extension is not built, or when forced via
``TINYDET_KERNELS=numpy``.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _conv_out_extent(size, k, stride, padding):
    out = (size + 2 * padding - k) // stride + 1
    if out <= 0:
        raise ValueError(
            f"convolution output extent {out} <= 0 "
            f"(input {size}, kernel {k}, stride {stride}, padding {padding})"
        )
    return out


def _im2col(x, kh, kw, stride, padding, out_h, out_w):
    # (N, C, H, W) -> (N*out_h*out_w, C*kh*kw), window-major rows
    n, c, _, _ = x.shape
    if padding > 0:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sn, sc, sh, sw = x.strides
    windows = as_strided(
        x,
        shape=(n, out_h, out_w, c, kh, kw),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
    )
    return windows.reshape(n * out_h * out_w, c * kh * kw)


def conv2d_forward(x, w, stride=1, padding=0):
    """x: (N, C, H, W), w: (K, C, kh, kw) -> (N, K, H', W')."""
    n, c, h, width = x.shape
    k, c2, kh, kw = w.shape
    if c != c2:
        raise ValueError(f"channel mismatch: input has {c}, weight expects {c2}")
    out_h = _conv_out_extent(h, kh, stride, padding)
    out_w = _conv_out_extent(width, kw, stride, padding)
    if n == 0:
        return np.zeros((0, k, out_h, out_w), dtype=x.dtype)
    cols = _im2col(x, kh, kw, stride, padding, out_h, out_w)
    y = cols @ w.reshape(k, -1).T
    return y.reshape(n, out_h, out_w, k).transpose(0, 3, 1, 2).copy()


def conv2d_backward(x, w, dy, stride=1, padding=0, need_dx=True, need_dw=True):
    """Gradients of conv2d_forward w.r.t. input and weight: (dx, dw).

    Either side can be skipped (returned as None) when not required.
    """
    n, c, h, width = x.shape
    k, _, kh, kw = w.shape
    _, _, out_h, out_w = dy.shape
    if n == 0:
        return (np.zeros_like(x) if need_dx else None,
                np.zeros_like(w) if need_dw else None)
    dy_rows = dy.transpose(0, 2, 3, 1).reshape(n * out_h * out_w, k)
    dw = None
    if need_dw:
        cols = _im2col(x, kh, kw, stride, padding, out_h, out_w)
        dw = (dy_rows.T @ cols).reshape(k, c, kh, kw)
    dx = None
    if need_dx:
        dcols = dy_rows @ w.reshape(k, -1)
        dcols = dcols.reshape(n, out_h, out_w, c, kh, kw)
        hp, wp = h + 2 * padding, width + 2 * padding
        dxp = np.zeros((n, c, hp, wp), dtype=x.dtype)
        for ki in range(kh):
            for kj in range(kw):
                dxp[:, :, ki : ki + stride * out_h : stride, kj : kj + stride * out_w : stride] += (
                    dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
                )
        if padding > 0:
            dxp = dxp[:, :, padding : padding + h, padding : padding + width]
        dx = np.ascontiguousarray(dxp)
    return dx, dw


def _roi_sample_grid(boxes, scale, out_size, sampling):
    """Per-roi sample coordinates on the feature grid.

    Returns (ys, xs), each of shape (R, out*sampling, out*sampling): the
    full cartesian sample grid per roi. Bins partition the scaled box and
    samples sit at fractions (s + 0.5) / sampling inside each bin.
    """
    r = boxes.shape[0]
    off = (np.arange(out_size)[:, None] + (np.arange(sampling) + 0.5)[None, :] / sampling)
    off = off.reshape(-1)  # (out*sampling,) in bin units
    y1 = boxes[:, 1] * scale
    x1 = boxes[:, 0] * scale
    bh = (boxes[:, 3] - boxes[:, 1]) * scale / out_size
    bw = (boxes[:, 2] - boxes[:, 0]) * scale / out_size
    ys = y1[:, None] + bh[:, None] * off[None, :]  # (R, out*s)
    xs = x1[:, None] + bw[:, None] * off[None, :]
    ys = np.broadcast_to(ys[:, :, None], (r, off.size, off.size))
    xs = np.broadcast_to(xs[:, None, :], (r, off.size, off.size))
    return np.ascontiguousarray(ys), np.ascontiguousarray(xs)


def _bilinear_taps(ys, xs, h, w):
    # Corner indices and weights for bilinear interpolation on a grid that is
    # zero outside [0, h-1] x [0, w-1]. Indices are clipped for gathering;
    # out-of-bounds taps get weight zero.
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    ly = ys - y0
    lx = xs - x0
    taps = []
    for di, dj, wy, wx in (
        (0, 0, 1.0 - ly, 1.0 - lx),
        (0, 1, 1.0 - ly, lx),
        (1, 0, ly, 1.0 - lx),
        (1, 1, ly, lx),
    ):
        yy = y0 + di
        xx = x0 + dj
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        weight = wy * wx * valid
        taps.append((np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1), weight))
    return taps


def roi_align_forward(feat, boxes, scale, out_size=14, sampling=2):
    """feat: (C, H, W), boxes: (R, 4) in image coords -> (R, C, out, out).

    ``scale`` maps image coordinates to feature coordinates (1 / stride).
    Each bin averages sampling x sampling bilinear samples; points outside
    the map read zero.
    """
    c, h, w = feat.shape
    r = boxes.shape[0]
    if r == 0:
        return np.zeros((0, c, out_size, out_size), dtype=feat.dtype)
    ys, xs = _roi_sample_grid(boxes.astype(np.float64), scale, out_size, sampling)
    vals = np.zeros((c,) + ys.shape, dtype=np.float64)
    for yy, xx, weight in _bilinear_taps(ys, xs, h, w):
        vals += feat[:, yy, xx] * weight
    # (C, R, out, s, out, s) -> average the s*s sub-samples of each bin
    vals = vals.reshape(c, r, out_size, sampling, out_size, sampling)
    out = vals.mean(axis=(3, 5)).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out, dtype=feat.dtype)


def roi_align_backward(dy, boxes, scale, feat_shape, out_size=14, sampling=2):
    """Gradient to the feature map: dy (R, C, out, out) -> (C, H, W)."""
    c, h, w = feat_shape
    dfeat = np.zeros((c, h * w), dtype=np.float64)
    r = boxes.shape[0]
    if r == 0:
        return dfeat.reshape(c, h, w).astype(dy.dtype)
    ys, xs = _roi_sample_grid(boxes.astype(np.float64), scale, out_size, sampling)
    ys = ys.reshape(-1)
    xs = xs.reshape(-1)
    # upstream gradient per sample = dy[bin] / sampling^2, expanded to the
    # (R, out, s, out, s) sample layout then flattened to match ys/xs
    dy_s = np.repeat(np.repeat(dy, sampling, axis=2), sampling, axis=3)
    dy_s = dy_s.transpose(1, 0, 2, 3).reshape(c, -1) / float(sampling * sampling)
    for yy, xx, weight in _bilinear_taps(ys, xs, h, w):
        idx = yy * w + xx
        for ch in range(c):
            dfeat[ch] += np.bincount(idx, weights=dy_s[ch] * weight, minlength=h * w)
    return dfeat.reshape(c, h, w).astype(dy.dtype)


def _pairwise_iou_row(box, boxes):
    xx1 = np.maximum(box[0], boxes[:, 0])
    yy1 = np.maximum(box[1], boxes[:, 1])
    xx2 = np.minimum(box[2], boxes[:, 2])
    yy2 = np.minimum(box[3], boxes[:, 3])
    inter = np.clip(xx2 - xx1, 0, None) * np.clip(yy2 - yy1, 0, None)
    area = (box[2] - box[0]) * (box[3] - box[1])
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    union = area + areas - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def nms_keep(boxes, scores, iou_threshold):
    """Greedy NMS. Returns kept indices, highest score first.

    Ties in score are broken by lower original index. A box is suppressed
    when its IoU with an already-kept box exceeds the threshold (strict).
    """
    n = boxes.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    boxes = boxes.astype(np.float64)
    keep = []
    while order.size > 0:
        i = order[0]
        keep.append(i)
        if order.size == 1:
            break
        rest = order[1:]
        ious = _pairwise_iou_row(boxes[i], boxes[rest])
        order = rest[ious <= iou_threshold]
    return np.asarray(keep, dtype=np.int64)
