"""Parameter-holding conv layers built on the autodiff ops."""

import math

import numpy as np

from . import autodiff
from .autodiff import Tensor


def he_normal(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(np.float32)


class ConvLayer:
    """3x3 / 1x1 / strided conv with bias."""

    def __init__(self, rng, in_ch, out_ch, kernel=3, stride=1, padding=None,
                 weight_std=None, bias_init=0.0):
        if padding is None:
            padding = kernel // 2
        self.stride = stride
        self.padding = padding
        shape = (out_ch, in_ch, kernel, kernel)
        if weight_std is None:
            w = he_normal(rng, shape, in_ch * kernel * kernel)
        else:
            w = rng.normal(0.0, weight_std, size=shape).astype(np.float32)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.full(out_ch, bias_init, dtype=np.float32), requires_grad=True)

    def __call__(self, x):
        return autodiff.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def params(self, prefix):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


class DeconvLayer:
    """2x2 stride-2 transposed conv with bias (exact 2x upsampling)."""

    def __init__(self, rng, in_ch, out_ch):
        w = he_normal(rng, (in_ch, out_ch, 2, 2), in_ch * 4)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(out_ch, dtype=np.float32), requires_grad=True)

    def __call__(self, x):
        return autodiff.conv_transpose2d_2x2(x, self.w, self.b)

    def params(self, prefix):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]
