"""Training losses: sigmoid focal classification loss, fixed and
self-adjusting smooth L1 box regression, and per-class mask BCE.

All losses return scalar ``Tensor`` nodes with hand-derived analytic
backward rules (checked against finite differences in the test suite).
The self-adjusting variant keeps per-channel running statistics of the
absolute residuals in float64 and derives its control point each step as
clamp(mean - variance, 0, beta_hat); no gradient flows through the
statistics.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, _accumulate, _make

_P_EPS = 1e-7  # probability clamp before logs


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0
    prior_prob: float = 0.01  # initial positive probability targeted by the logit bias

    @property
    def logit_prior(self):
        """Bias value whose sigmoid equals prior_prob."""
        return -math.log((1.0 - self.prior_prob) / self.prior_prob)


def focal_loss(logits, target_class, params, num_positives=None):
    """Sigmoid focal loss, summed and divided by max(1, num_positives).

    logits: Tensor (A, C); target_class: int array (A,), class index or -1
    for background. Ignore-labeled anchors must be filtered out by the
    caller. alpha weights the target-class term, (1 - alpha) the rest.
    """
    x = logits.data
    a, c = x.shape
    tgt = np.asarray(target_class)
    onehot = np.zeros((a, c), dtype=bool)
    fg = tgt >= 0
    onehot[np.flatnonzero(fg), tgt[fg]] = True
    if num_positives is None:
        num_positives = int(fg.sum())
    norm = float(max(1, num_positives))

    p = _sigmoid(x)
    pt = np.where(onehot, p, 1.0 - p)
    pt_c = np.clip(pt, _P_EPS, 1.0 - _P_EPS)
    at = np.where(onehot, params.alpha, 1.0 - params.alpha)
    one_minus = 1.0 - pt_c
    loss_map = -at * one_minus**params.gamma * np.log(pt_c)
    value = np.asarray(loss_map.sum() / norm, dtype=x.dtype)

    def backward(g):
        # d/dx [-at (1-pt)^g log pt] = s * at * (1-pt)^g * (g*pt*log(pt) + pt - 1)
        # with s = +1 on the target class and -1 elsewhere.
        sign = np.where(onehot, 1.0, -1.0)
        grad = sign * at * one_minus**params.gamma * (
            params.gamma * pt_c * np.log(pt_c) + pt_c - 1.0
        )
        _accumulate(logits, (float(g) * grad / norm).astype(x.dtype))

    return _make(value, (logits,), backward)


def smooth_l1(residual, beta):
    """Summed smooth L1: 0.5 x^2 / beta below the control point, |x| - beta/2
    beyond it; beta = 0 degenerates to pure L1."""
    if beta < 0:
        raise ValueError(f"beta must be nonnegative, got {beta}")
    x = residual.data
    ax = np.abs(x)
    if beta == 0:
        value = np.asarray(ax.sum(), dtype=x.dtype)
    else:
        value = np.asarray(
            np.where(ax < beta, 0.5 * ax * ax / beta, ax - 0.5 * beta).sum(), dtype=x.dtype
        )

    def backward(g):
        if beta == 0:
            grad = np.sign(x)
        else:
            grad = np.where(ax < beta, x / beta, np.sign(x))
        _accumulate(residual, (float(g) * grad).astype(x.dtype))

    return _make(value, (residual,), backward)


@dataclass
class SelfAdjustState:
    """Running mean/variance of |residual| and the derived control point.

    Statistics live in float64. With shared_channels the four regression
    channels pool into a single (mean, variance) pair, so all channels
    report the same beta.
    """

    momentum: float = 0.9
    beta_hat: float = 0.11
    shared_channels: bool = False
    num_channels: int = 4
    mu_r: np.ndarray = field(default=None)
    sigma2_r: np.ndarray = field(default=None)

    def __post_init__(self):
        width = 1 if self.shared_channels else self.num_channels
        if self.mu_r is None:
            self.mu_r = np.zeros(width, dtype=np.float64)
        if self.sigma2_r is None:
            self.sigma2_r = np.zeros(width, dtype=np.float64)
        self.mu_r = np.asarray(self.mu_r, dtype=np.float64).reshape(width)
        self.sigma2_r = np.asarray(self.sigma2_r, dtype=np.float64).reshape(width)

    def update(self, abs_residuals):
        """EMA update from one batch of absolute residuals (P, num_channels)."""
        ar = np.asarray(abs_residuals, dtype=np.float64)
        if ar.size == 0:
            return
        if self.shared_channels:
            mu_b = np.array([ar.mean()])
            var_b = np.array([((ar - mu_b[0]) ** 2).mean()])
        else:
            mu_b = ar.mean(axis=0)
            var_b = ((ar - mu_b[None, :]) ** 2).mean(axis=0)
        m = self.momentum
        self.mu_r = self.mu_r * m + mu_b * (1.0 - m)
        self.sigma2_r = self.sigma2_r * m + var_b * (1.0 - m)
        if not (np.all(np.isfinite(self.mu_r)) and np.all(np.isfinite(self.sigma2_r))):
            raise FloatingPointError("self-adjust running statistics became non-finite")
        if np.any(self.mu_r < 0) or np.any(self.sigma2_r < 0):
            raise FloatingPointError("self-adjust running statistics became negative")

    def beta(self):
        """Per-channel control point: clamp(mu - sigma^2, 0, beta_hat)."""
        b = np.clip(self.mu_r - self.sigma2_r, 0.0, self.beta_hat)
        if self.shared_channels:
            b = np.repeat(b, self.num_channels)
        return b

    def to_dict(self):
        return {
            "momentum": self.momentum,
            "beta_hat": self.beta_hat,
            "shared_channels": self.shared_channels,
            "num_channels": self.num_channels,
            "mu_r": self.mu_r.tolist(),
            "sigma2_r": self.sigma2_r.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            momentum=d["momentum"],
            beta_hat=d["beta_hat"],
            shared_channels=d["shared_channels"],
            num_channels=d["num_channels"],
            mu_r=np.asarray(d["mu_r"], dtype=np.float64),
            sigma2_r=np.asarray(d["sigma2_r"], dtype=np.float64),
        )


def self_adjusting_smooth_l1(residuals, state, training=True, num_positives=None):
    """Smooth L1 whose control point tracks the residual statistics.

    residuals: Tensor (P, num_channels). In training mode the running
    statistics are updated from this batch first, then beta is derived,
    then the loss is computed with that beta (treated as a constant in the
    gradient). The sum is divided by max(1, num_positives), defaulting to
    P. An empty batch leaves the statistics untouched and returns 0.
    """
    x = residuals.data
    p = x.shape[0]
    if p == 0:
        return _make(np.zeros((), dtype=x.dtype), (residuals,), lambda g: None)
    if training:
        state.update(np.abs(x))
    beta = state.beta()  # (num_channels,)
    if num_positives is None:
        num_positives = p
    norm = float(max(1, num_positives))

    ax = np.abs(x)
    b = beta[None, :]
    quad = b > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        quad_val = np.where(quad, 0.5 * ax * ax / np.where(quad, b, 1.0), 0.0)
    per_elem = np.where(quad & (ax < b), quad_val, ax - np.where(quad, 0.5 * b, 0.0))
    value = np.asarray(per_elem.sum() / norm, dtype=x.dtype)

    def backward(g):
        grad = np.where(quad & (ax < b), x / np.where(quad, b, 1.0), np.sign(x))
        _accumulate(residuals, (float(g) * grad / norm).astype(x.dtype))

    return _make(value, (residuals,), backward)


def mask_bce(pred_logits, targets, classes):
    """Per-class sigmoid BCE on each proposal's own class channel.

    pred_logits: Tensor (M, num_classes, S, S); targets: (M, S, S) binary;
    classes: (M,) int. Averaged over proposals and pixels; only the
    selected channel of each proposal receives gradient.
    """
    x = pred_logits.data
    m = x.shape[0]
    if m == 0:
        return _make(np.zeros((), dtype=x.dtype), (pred_logits,), lambda g: None)
    classes = np.asarray(classes, dtype=np.int64)
    t = np.asarray(targets, dtype=x.dtype)
    sel = x[np.arange(m), classes]  # (M, S, S)
    # stable BCE-with-logits: max(x,0) - x*t + log(1 + exp(-|x|))
    per_px = np.maximum(sel, 0) - sel * t + np.log1p(np.exp(-np.abs(sel)))
    norm = float(per_px.size)
    value = np.asarray(per_px.sum() / norm, dtype=x.dtype)

    def backward(g):
        grad = np.zeros_like(x)
        grad[np.arange(m), classes] = (_sigmoid(sel) - t) / norm
        _accumulate(pred_logits, float(g) * grad)

    return _make(value, (pred_logits,), backward)


@dataclass
class LossReport:
    cls_loss: float
    reg_loss: float
    mask_loss: float
    num_positives: int
    beta_per_channel: np.ndarray

    @property
    def total(self):
        return self.cls_loss + self.reg_loss + self.mask_loss


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
