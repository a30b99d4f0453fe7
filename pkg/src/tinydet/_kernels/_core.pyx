# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled implementations of the hot kernels.

Mirrors ``numpy_ref`` exactly: conv2d forward/backward (C im2col/col2im
packing, BLAS matmul for the contraction), ROI-Align forward/backward,
and greedy NMS. float32 and float64 are both supported.
"""

import numpy as np

cimport numpy as cnp
from cython cimport floating
from libc.math cimport floor

cnp.import_array()


def _conv_out_extent(Py_ssize_t size, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t padding):
    out = (size + 2 * padding - k) // stride + 1
    if out <= 0:
        raise ValueError(
            f"convolution output extent {out} <= 0 "
            f"(input {size}, kernel {k}, stride {stride}, padding {padding})"
        )
    return out


def _im2col_fill(floating[:, :, :, ::1] x, floating[:, ::1] cols,
                 Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
                 Py_ssize_t padding, Py_ssize_t oh, Py_ssize_t ow):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t i, oy, ox, ch, ky, kx, iy, ix, row, col
    for i in range(n):
        for oy in range(oh):
            for ox in range(ow):
                row = (i * oh + oy) * ow + ox
                col = 0
                for ch in range(c):
                    for ky in range(kh):
                        iy = oy * stride + ky - padding
                        for kx in range(kw):
                            ix = ox * stride + kx - padding
                            if 0 <= iy < h and 0 <= ix < w:
                                cols[row, col] = x[i, ch, iy, ix]
                            else:
                                cols[row, col] = 0
                            col += 1


def _col2im_add(floating[:, ::1] dcols, floating[:, :, :, ::1] dx,
                Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
                Py_ssize_t padding, Py_ssize_t oh, Py_ssize_t ow):
    cdef Py_ssize_t n = dx.shape[0], c = dx.shape[1], h = dx.shape[2], w = dx.shape[3]
    cdef Py_ssize_t i, oy, ox, ch, ky, kx, iy, ix, row, col
    for i in range(n):
        for oy in range(oh):
            for ox in range(ow):
                row = (i * oh + oy) * ow + ox
                col = 0
                for ch in range(c):
                    for ky in range(kh):
                        iy = oy * stride + ky - padding
                        for kx in range(kw):
                            ix = ox * stride + kx - padding
                            if 0 <= iy < h and 0 <= ix < w:
                                dx[i, ch, iy, ix] += dcols[row, col]
                            col += 1


def conv2d_forward(x, w, stride=1, padding=0):
    """x: (N, C, H, W), w: (K, C, kh, kw) -> (N, K, H', W')."""
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w)
    n, c, h, width = x.shape
    k, c2, kh, kw = w.shape
    if c != c2:
        raise ValueError(f"channel mismatch: input has {c}, weight expects {c2}")
    oh = _conv_out_extent(h, kh, stride, padding)
    ow = _conv_out_extent(width, kw, stride, padding)
    if n == 0:
        return np.zeros((0, k, oh, ow), dtype=x.dtype)
    cols = np.empty((n * oh * ow, c * kh * kw), dtype=x.dtype)
    _im2col_fill(x, cols, kh, kw, stride, padding, oh, ow)
    y = cols @ w.reshape(k, -1).T
    return y.reshape(n, oh, ow, k).transpose(0, 3, 1, 2).copy()


def conv2d_backward(x, w, dy, stride=1, padding=0, need_dx=True, need_dw=True):
    """Gradients of conv2d_forward w.r.t. input and weight: (dx, dw).

    Either side can be skipped (returned as None) when not required.
    """
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w)
    dy = np.ascontiguousarray(dy)
    n, c, h, width = x.shape
    k = w.shape[0]
    kh, kw = w.shape[2], w.shape[3]
    oh, ow = dy.shape[2], dy.shape[3]
    if n == 0:
        return (np.zeros_like(x) if need_dx else None,
                np.zeros_like(w) if need_dw else None)
    dy_rows = dy.transpose(0, 2, 3, 1).reshape(n * oh * ow, k)
    dw = None
    if need_dw:
        cols = np.empty((n * oh * ow, c * kh * kw), dtype=x.dtype)
        _im2col_fill(x, cols, kh, kw, stride, padding, oh, ow)
        dw = (dy_rows.T @ cols).reshape(k, c, kh, kw)
    dx = None
    if need_dx:
        dcols = np.ascontiguousarray(dy_rows @ w.reshape(k, -1))
        dx = np.zeros_like(x)
        _col2im_add(dcols, dx, kh, kw, stride, padding, oh, ow)
    return dx, dw


cdef inline double _bilinear_read(floating[:, :, ::1] feat, Py_ssize_t ch,
                                  double y, double x,
                                  Py_ssize_t h, Py_ssize_t w) noexcept nogil:
    cdef Py_ssize_t y0 = <Py_ssize_t>floor(y)
    cdef Py_ssize_t x0 = <Py_ssize_t>floor(x)
    cdef double ly = y - y0, lx = x - x0
    cdef double v = 0
    if 0 <= y0 < h and 0 <= x0 < w:
        v += (1 - ly) * (1 - lx) * feat[ch, y0, x0]
    if 0 <= y0 < h and 0 <= x0 + 1 < w:
        v += (1 - ly) * lx * feat[ch, y0, x0 + 1]
    if 0 <= y0 + 1 < h and 0 <= x0 < w:
        v += ly * (1 - lx) * feat[ch, y0 + 1, x0]
    if 0 <= y0 + 1 < h and 0 <= x0 + 1 < w:
        v += ly * lx * feat[ch, y0 + 1, x0 + 1]
    return v


def roi_align_forward(feat, boxes, scale, out_size=14, sampling=2):
    """feat: (C, H, W), boxes: (R, 4) in image coords -> (R, C, out, out)."""
    feat = np.ascontiguousarray(feat)
    boxes64 = np.ascontiguousarray(boxes, dtype=np.float64)
    r = boxes64.shape[0]
    c, h, w = feat.shape
    out = np.zeros((r, c, out_size, out_size), dtype=feat.dtype)
    if r == 0:
        return out
    _roi_align_fwd(feat, boxes64, float(scale), out_size, sampling, out)
    return out


def _roi_align_fwd(floating[:, :, ::1] feat, double[:, ::1] boxes,
                   double scale, Py_ssize_t out_size, Py_ssize_t sampling,
                   floating[:, :, :, ::1] out):
    cdef Py_ssize_t r = boxes.shape[0], c = feat.shape[0]
    cdef Py_ssize_t h = feat.shape[1], w = feat.shape[2]
    cdef Py_ssize_t i, ch, by, bx, sy, sx
    cdef double y1, x1, bh, bw, yy, xx, acc
    cdef double inv = 1.0 / (sampling * sampling)
    for i in range(r):
        x1 = boxes[i, 0] * scale
        y1 = boxes[i, 1] * scale
        bw = (boxes[i, 2] - boxes[i, 0]) * scale / out_size
        bh = (boxes[i, 3] - boxes[i, 1]) * scale / out_size
        for ch in range(c):
            for by in range(out_size):
                for bx in range(out_size):
                    acc = 0
                    for sy in range(sampling):
                        yy = y1 + bh * (by + (sy + 0.5) / sampling)
                        for sx in range(sampling):
                            xx = x1 + bw * (bx + (sx + 0.5) / sampling)
                            acc += _bilinear_read(feat, ch, yy, xx, h, w)
                    out[i, ch, by, bx] = <floating>(acc * inv)


def roi_align_backward(dy, boxes, scale, feat_shape, out_size=14, sampling=2):
    """Gradient to the feature map: dy (R, C, out, out) -> (C, H, W)."""
    dy = np.ascontiguousarray(dy)
    boxes64 = np.ascontiguousarray(boxes, dtype=np.float64)
    c, h, w = feat_shape
    dfeat = np.zeros((c, h, w), dtype=dy.dtype)
    if boxes64.shape[0] == 0:
        return dfeat
    _roi_align_bwd(dy, boxes64, float(scale), out_size, sampling, dfeat)
    return dfeat


def _roi_align_bwd(floating[:, :, :, ::1] dy, double[:, ::1] boxes,
                   double scale, Py_ssize_t out_size, Py_ssize_t sampling,
                   floating[:, :, ::1] dfeat):
    cdef Py_ssize_t r = boxes.shape[0], c = dfeat.shape[0]
    cdef Py_ssize_t h = dfeat.shape[1], w = dfeat.shape[2]
    cdef Py_ssize_t i, ch, by, bx, sy, sx, y0, x0
    cdef double y1, x1, bh, bw, yy, xx, g, ly, lx
    cdef double inv = 1.0 / (sampling * sampling)
    for i in range(r):
        x1 = boxes[i, 0] * scale
        y1 = boxes[i, 1] * scale
        bw = (boxes[i, 2] - boxes[i, 0]) * scale / out_size
        bh = (boxes[i, 3] - boxes[i, 1]) * scale / out_size
        for ch in range(c):
            for by in range(out_size):
                for bx in range(out_size):
                    g = dy[i, ch, by, bx] * inv
                    for sy in range(sampling):
                        yy = y1 + bh * (by + (sy + 0.5) / sampling)
                        for sx in range(sampling):
                            xx = x1 + bw * (bx + (sx + 0.5) / sampling)
                            y0 = <Py_ssize_t>floor(yy)
                            x0 = <Py_ssize_t>floor(xx)
                            ly = yy - y0
                            lx = xx - x0
                            if 0 <= y0 < h and 0 <= x0 < w:
                                dfeat[ch, y0, x0] += <floating>(g * (1 - ly) * (1 - lx))
                            if 0 <= y0 < h and 0 <= x0 + 1 < w:
                                dfeat[ch, y0, x0 + 1] += <floating>(g * (1 - ly) * lx)
                            if 0 <= y0 + 1 < h and 0 <= x0 < w:
                                dfeat[ch, y0 + 1, x0] += <floating>(g * ly * (1 - lx))
                            if 0 <= y0 + 1 < h and 0 <= x0 + 1 < w:
                                dfeat[ch, y0 + 1, x0 + 1] += <floating>(g * ly * lx)


def nms_keep(boxes, scores, iou_threshold):
    """Greedy NMS. Returns kept indices, highest score first.

    Ties in score are broken by lower original index. A box is suppressed
    when its IoU with an already-kept box exceeds the threshold (strict).
    """
    boxes64 = np.ascontiguousarray(boxes, dtype=np.float64)
    scores64 = np.asarray(scores, dtype=np.float64)
    n = boxes64.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores64, kind="stable").astype(np.int64)
    keep = np.empty(n, dtype=np.int64)
    nkept = _nms_loop(boxes64, order, float(iou_threshold), keep)
    return keep[:nkept].copy()


def _nms_loop(double[:, ::1] boxes, long[::1] order,
              double thresh, long[::1] keep):
    cdef Py_ssize_t n = order.shape[0]
    cdef Py_ssize_t nkept = 0
    cdef Py_ssize_t oi, oj, i, j
    cdef double xx1, yy1, xx2, yy2, inter, union, iou, ai, aj
    cdef bint dead
    for oi in range(n):
        i = order[oi]
        dead = False
        ai = (boxes[i, 2] - boxes[i, 0]) * (boxes[i, 3] - boxes[i, 1])
        for oj in range(nkept):
            j = keep[oj]
            xx1 = max(boxes[i, 0], boxes[j, 0])
            yy1 = max(boxes[i, 1], boxes[j, 1])
            xx2 = min(boxes[i, 2], boxes[j, 2])
            yy2 = min(boxes[i, 3], boxes[j, 3])
            inter = max(xx2 - xx1, 0.0) * max(yy2 - yy1, 0.0)
            aj = (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1])
            union = ai + aj - inter
            iou = inter / union if union > 0 else 0.0
            if iou > thresh:
                dead = True
                break
        if not dead:
            keep[nkept] = i
            nkept += 1
    return nkept
