"""Dense-tensor reverse-mode autodiff.

A ``Tensor`` wraps a contiguous float32 (or float64) ndarray and records
the operations applied to it; ``Tensor.backward()`` replays the recorded
graph in reverse topological order, visiting each node once and summing
gradients into every reachable ``requires_grad`` tensor. Gradients
accumulate additively across backward calls; callers zero them between
optimizer steps.

Conventions: activations and gradients default to float32 (float64 is
supported, mainly for finite-difference checks); layout is row-major
NCHW; binary ops broadcast numpy-style with gradients summed back over
the broadcast axes.
"""

import numpy as np

from . import _kernels, opcount

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording (forward still runs)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """N-d array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None:
            arr = data if data.dtype in _FLOAT_DTYPES else data.astype(np.float32)
        else:
            arr = np.asarray(data, dtype=dtype or np.float32)
        # ascontiguousarray would promote 0-d scalars to 1-d; keep them 0-d
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    def detach(self):
        """Same data, cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data.reshape(-1)[0])

    def backward(self):
        """Populate grads of all reachable requires_grad tensors.

        Only defined for scalar (single-element) outputs. Each graph node's
        backward rule runs exactly once, in reverse topological order;
        propagation uses per-pass buffers, so each call adds exactly one
        unit of output gradient (repeat calls accumulate additively).
        """
        global _pass_grads
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar output, got shape {self.data.shape}")
        order = _toposort(self)
        _pass_grads = {}
        try:
            _accumulate(self, np.ones_like(self.data))
            for node in reversed(order):
                entry = _pass_grads.get(id(node))
                if entry is None or node._backward is None:
                    continue
                node._backward(entry[1])
            for tensor, g in _pass_grads.values():
                if tensor.grad is None:
                    tensor.grad = g
                else:
                    tensor.grad += g
        finally:
            _pass_grads = None

    # -- arithmetic sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return _slice(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _as_tensor(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data, parents, backward):
    """Internal node constructor; graph edges kept only when needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, iter(root._parents))]
    seen.add(id(root))
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in seen and p._parents:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
            seen.add(id(p))
        if not advanced:
            order.append(node)
            stack.pop()
    return order


_pass_grads = None  # id(tensor) -> [tensor, buffer] while a backward pass runs


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    if _pass_grads is None:  # outside a pass: write through
        if tensor.grad is None:
            tensor.grad = np.zeros_like(tensor.data)
        tensor.grad += grad
        return
    entry = _pass_grads.get(id(tensor))
    if entry is None:
        _pass_grads[id(tensor)] = [tensor, np.array(grad, dtype=tensor.data.dtype)]
    else:
        entry[1] += grad


def _accumulate_at(tensor, key, grad):
    """Scatter-add accumulation for indexed ops (duplicate indices sum)."""
    if not tensor.requires_grad:
        return
    buf = np.zeros_like(tensor.data)
    np.add.at(buf, key, grad)
    _accumulate(tensor, buf)


def _unbroadcast(grad, shape):
    """Sum ``grad`` back down to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a, b, op_name):
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ValueError(
            f"{op_name}: shapes {a.data.shape} and {b.data.shape} are not broadcastable"
        ) from None


# -- elementwise ops -----------------------------------------------------

def add(a, b):
    a = _as_tensor(a, getattr(b, "dtype", np.float32))
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a, b, "add")
    data = a.data + b.data
    opcount.add(data.size)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a, b):
    a = _as_tensor(a, getattr(b, "dtype", np.float32))
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a, b, "sub")
    data = a.data - b.data
    opcount.add(data.size)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b):
    a = _as_tensor(a, getattr(b, "dtype", np.float32))
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a, b, "mul")
    data = a.data * b.data
    opcount.add(data.size)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a, b):
    a = _as_tensor(a, getattr(b, "dtype", np.float32))
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a, b, "div")
    data = a.data / b.data
    opcount.add(data.size)

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def relu(x):
    data = np.maximum(x.data, 0)
    opcount.add(data.size)

    def backward(g):
        _accumulate(x, g * (x.data > 0))

    return _make(data, (x,), backward)


def sigmoid(x):
    data = _sigmoid_stable(x.data)
    opcount.add(4 * data.size)

    def backward(g):
        _accumulate(x, g * data * (1 - data))

    return _make(data, (x,), backward)


def _sigmoid_stable(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log(x):
    data = np.log(x.data)
    opcount.add(data.size)

    def backward(g):
        _accumulate(x, g / x.data)

    return _make(data, (x,), backward)


def exp(x):
    data = np.exp(x.data)
    opcount.add(data.size)

    def backward(g):
        _accumulate(x, g * data)

    return _make(data, (x,), backward)


def power(x, exponent):
    e = float(exponent)
    data = x.data**e
    opcount.add(data.size)

    def backward(g):
        _accumulate(x, g * e * x.data ** (e - 1.0))

    return _make(data, (x,), backward)


def absolute(x):
    data = np.abs(x.data)
    opcount.add(data.size)

    def backward(g):
        _accumulate(x, g * np.sign(x.data))

    return _make(data, (x,), backward)


def maximum(x, const):
    """Elementwise max with a scalar constant. Subgradient 0 at the tie."""
    c = float(const)
    data = np.maximum(x.data, c)
    opcount.add(data.size)

    def backward(g):
        _accumulate(x, g * (x.data > c))

    return _make(data, (x,), backward)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "relu": relu,
    "sigmoid": sigmoid,
    "log": log,
    "exp": exp,
    "pow": power,
    "max_with_const": maximum,
    "abs": absolute,
}


def elementwise(op_kind, a, b=None):
    """Dispatch an elementwise op by name (see ``_ELEMENTWISE`` for kinds)."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    return fn(a) if b is None else fn(a, b)


# -- shape & reduction ops ------------------------------------------------

def sum_(x, axis=None, keepdims=False):
    data = x.data.sum(axis=axis, keepdims=keepdims)
    data = np.asarray(data, dtype=x.dtype)
    opcount.add(x.size)

    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g.reshape((1,) * x.data.ndim), x.data.shape))
            return
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % x.data.ndim for a in axes)
        if not keepdims:
            expand = list(g.shape)
            for a in sorted(axes):
                expand.insert(a, 1)
            g = g.reshape(expand)
        _accumulate(x, np.broadcast_to(g, x.data.shape))

    return _make(data, (x,), backward)


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else np.prod(
        [x.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(max(n, 1)))


def reshape(x, shape):
    data = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _make(data, (x,), backward)


def transpose(x, axes):
    axes = tuple(axes)
    data = np.ascontiguousarray(x.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(x, g.transpose(inverse))

    return _make(data, (x,), backward)


def concatenate(tensors, axis=0):
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(index)])

    return _make(data, tuple(tensors), backward)


def take_rows(x, indices):
    """Row gather along axis 0; duplicate indices sum their gradients."""
    idx = np.asarray(indices, dtype=np.int64)
    data = np.ascontiguousarray(x.data[idx])

    def backward(g):
        _accumulate_at(x, idx, g)

    return _make(data, (x,), backward)


def _slice(x, key):
    data = np.ascontiguousarray(x.data[key])

    def backward(g):
        _accumulate_at(x, key, g)

    return _make(data, (x,), backward)


def upsample2x_nearest(x):
    """(N, C, H, W) -> (N, C, 2H, 2W) by pixel duplication."""
    data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    opcount.add(data.size)

    def backward(g):
        n, c, h2, w2 = g.shape
        _accumulate(x, g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))

    return _make(data, (x,), backward)


# -- convolution ops -------------------------------------------------------

def conv2d(x, weight, bias=None, stride=1, padding=0):
    """(N, C, H, W) * (K, C, kh, kw) -> (N, K, H', W'), H' = (H + 2p - kh)/s + 1."""
    y = _kernels.conv2d_forward(x.data, weight.data, stride, padding)
    n, k, oh, ow = y.shape
    kh, kw = weight.data.shape[2], weight.data.shape[3]
    opcount.add(n * k * oh * ow * weight.data.shape[1] * kh * kw)
    if bias is not None:
        y = y + bias.data.reshape(1, k, 1, 1)
        parents = (x, weight, bias)
    else:
        parents = (x, weight)

    def backward(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad or weight.requires_grad:
            dx, dw = _kernels.conv2d_backward(
                x.data, weight.data, g, stride, padding,
                need_dx=x.requires_grad, need_dw=weight.requires_grad,
            )
            opcount.add(2 * n * k * oh * ow * weight.data.shape[1] * kh * kw)
            if dx is not None:
                _accumulate(x, dx)
            if dw is not None:
                _accumulate(weight, dw)
        if bias is not None:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))

    return _make(y, parents, backward)


def conv_transpose2d_2x2(x, weight, bias=None):
    """Stride-2 transposed conv with a 2x2 kernel: exact 2x upsampling.

    x: (N, C, H, W), weight: (C, K, 2, 2) -> (N, K, 2H, 2W). Stride equals
    the kernel extent, so output positions never overlap.
    """
    n, c, h, w = x.data.shape
    if weight.data.shape[0] != c or weight.data.shape[2:] != (2, 2):
        raise ValueError(
            f"weight shape {weight.data.shape} incompatible with input {x.data.shape}; "
            "expected (C_in, C_out, 2, 2)"
        )
    k = weight.data.shape[1]
    y = np.zeros((n, k, 2 * h, 2 * w), dtype=x.dtype)
    for di in range(2):
        for dj in range(2):
            # (N,C,H,W) x (C,K) -> (N,H,W,K)
            contrib = np.tensordot(x.data, weight.data[:, :, di, dj], axes=([1], [0]))
            y[:, :, di::2, dj::2] = contrib.transpose(0, 3, 1, 2)
    opcount.add(4 * n * c * k * h * w)
    if bias is not None:
        y += bias.data.reshape(1, k, 1, 1)
        parents = (x, weight, bias)
    else:
        parents = (x, weight)

    def backward(g):
        opcount.add(8 * n * c * k * h * w)
        dw_full = np.zeros_like(weight.data) if weight.requires_grad else None
        for di in range(2):
            for dj in range(2):
                gslice = g[:, :, di::2, dj::2]  # (N, K, H, W)
                if x.requires_grad:
                    dx = np.tensordot(gslice, weight.data[:, :, di, dj], axes=([1], [1]))
                    _accumulate(x, np.ascontiguousarray(dx.transpose(0, 3, 1, 2)))
                if dw_full is not None:
                    dw_full[:, :, di, dj] = np.tensordot(
                        x.data, gslice, axes=([0, 2, 3], [0, 2, 3])
                    )
        if dw_full is not None:
            _accumulate(weight, dw_full)
        if bias is not None:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))

    return _make(y, parents, backward)
