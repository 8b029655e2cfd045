"""Dense float64 tensors with reverse-mode differentiation.

Layout is row-major and channel-first throughout: volumes are ``[C, T, H, W]``,
images ``[C, H, W]``, feature maps ``[C, M]``.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .errors import ArgumentError, DimensionError, NumericError


class Tensor:
    """An array plus, when ``requires_grad``, an accumulated gradient of equal shape."""

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def backward(self):
        """Populate ``.grad`` on every node reachable from this scalar root."""
        if self.data.ndim != 0:
            raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            return
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad += 1.0
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return tsum(self, axis)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def _node(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.grad = np.zeros_like(data)
        out._parents = parents
        out._backward = backward
    else:
        out.grad = None
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _acc(t, g):
    if t.requires_grad:
        t.grad += g


def _check_axis(axis, ndim):
    if not -ndim <= axis < ndim:
        raise ArgumentError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def backward(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _node(data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def backward(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, -_unbroadcast(g, b.shape))

    return _node(data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def backward(g):
        _acc(a, _unbroadcast(g * b.data, a.shape))
        _acc(b, _unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), backward)


def scale(a, c):
    c = float(c)

    def backward(g):
        _acc(a, g * c)

    return _node(a.data * c, (a,), backward)


def tabs(a):
    def backward(g):
        _acc(a, g * np.sign(a.data))

    return _node(np.abs(a.data), (a,), backward)


def square(a):
    def backward(g):
        _acc(a, 2.0 * a.data * g)

    return _node(a.data * a.data, (a,), backward)


def tanh(a):
    y = np.tanh(a.data)

    def backward(g):
        _acc(a, g * (1.0 - y * y))

    return _node(y, (a,), backward)


def leaky_relu(a, slope=0.2):
    pos = a.data >= 0

    def backward(g):
        _acc(a, np.where(pos, g, slope * g))

    return _node(np.where(pos, a.data, slope * a.data), (a,), backward)


# reductions


def tsum(a, axis=None):
    if axis is not None:
        axis = _check_axis(axis, a.ndim)
    data = np.asarray(a.data.sum(axis=axis))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.shape))

    return _node(data, (a,), backward)


def mean(a, axis=None):
    n = a.data.size if axis is None else a.shape[_check_axis(axis, a.ndim)]
    return scale(tsum(a, axis), 1.0 / n)


def softmax(a, axis=-1):
    """Max-shifted softmax; the normaliser is summed sequentially along ``axis``."""
    axis = _check_axis(axis, a.ndim)
    if np.isnan(a.data).any():
        raise NumericError("softmax input contains NaN")
    x = np.moveaxis(a.data, axis, -1)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    total = e[..., 0].copy()
    for i in range(1, e.shape[-1]):
        total += e[..., i]
    y = np.moveaxis(e / total[..., None], -1, axis)

    def backward(g):
        _acc(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _node(np.ascontiguousarray(y), (a,), backward)


# structural


def reshape(a, shape):
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def backward(g):
        _acc(a, g.reshape(a.shape))

    return _node(data, (a,), backward)


def transpose(a, axes=None):
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)

    def backward(g):
        _acc(a, np.transpose(g, inv))

    return _node(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), backward)


def getitem(a, idx):
    data = np.array(a.data[idx])

    def backward(g):
        if a.requires_grad:
            np.add.at(a.grad, idx, g)

    return _node(data, (a,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    axis = _check_axis(axis, tensors[0].ndim)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _acc(t, g[tuple(sl)])

    return _node(data, tuple(tensors), backward)


def split(a, sizes, axis=0):
    axis = _check_axis(axis, a.ndim)
    if sum(sizes) != a.shape[axis]:
        raise DimensionError(f"split sizes {sizes} do not cover extent {a.shape[axis]}")
    out, lo = [], 0
    for n in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(lo, lo + n)
        out.append(getitem(a, tuple(sl)))
        lo += n
    return out


# linear algebra


def matmul(a, b):
    """Matrix product for 2-d/3-d operands; a 2-d side is shared across the batch.

    Contractions accumulate sequentially, so results are reproducible bit for bit.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise DimensionError(f"matmul needs 2-d or 3-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    B = a.shape[0] if a.ndim == 3 else (b.shape[0] if b.ndim == 3 else 1)
    a3 = np.broadcast_to(a.data, (B,) + a.shape[-2:])
    b3 = np.broadcast_to(b.data, (B,) + b.shape[-2:])
    data = kernels.matmul(a3, b3)
    if a.ndim == 2 and b.ndim == 2:
        data = data[0]

    def backward(g):
        g3 = g.reshape((B,) + g.shape[-2:])
        if a.requires_grad:
            ga = kernels.matmul(g3, np.swapaxes(b3, 1, 2))
            _acc(a, ga if a.ndim == 3 else ga.sum(axis=0))
        if b.requires_grad:
            gb = kernels.matmul(np.swapaxes(a3, 1, 2), g3)
            _acc(b, gb if b.ndim == 3 else gb.sum(axis=0))

    return _node(data, (a, b), backward)


def matvec(w, x):
    if x.ndim != 1:
        raise DimensionError(f"matvec expects a vector, got shape {x.shape}")
    return reshape(matmul(w, reshape(x, (x.shape[0], 1))), (w.shape[0],))


def one_by_one_conv(x, w):
    """Pointwise channel mixing of ``x[C, M]`` (or ``[B, C, M]``) by ``w[C', C]``."""
    if w.ndim != 2 or x.ndim not in (2, 3) or w.shape[1] != x.shape[-2]:
        raise DimensionError(f"1x1 conv weight {w.shape} does not match input {x.shape}")
    return matmul(w, x)


# convolution and pooling


def _triple(v, n=3):
    if np.isscalar(v):
        return (int(v),) * n
    v = tuple(int(i) for i in v)
    if len(v) != n:
        raise ArgumentError(f"expected {n} values, got {v}")
    return v


def _conv(x, k, stride, padding, dilation):
    if x.ndim != 4 or k.ndim != 5:
        raise DimensionError(f"conv expects input [C,T,H,W] and kernel [O,C,kT,kH,kW], got {x.shape}, {k.shape}")
    if k.shape[1] != x.shape[0]:
        raise DimensionError(f"kernel expects {k.shape[1]} input channels, input has {x.shape[0]}")
    if min(stride) < 1:
        raise ArgumentError(f"strides must be >= 1, got {stride}")
    if min(dilation) < 1:
        raise ArgumentError(f"dilation must be >= 1, got {dilation}")
    if min(padding) < 0:
        raise ArgumentError(f"padding must be >= 0, got {padding}")
    for n, kn, p, d in zip(x.shape[1:], k.shape[2:], padding, dilation):
        if (kn - 1) * d + 1 > n + 2 * p:
            raise DimensionError(f"kernel {k.shape[2:]} (dilation {dilation}) exceeds padded input {x.shape[1:]}")
    pad = ((0, 0),) + tuple((p, p) for p in padding)
    xp = np.pad(x.data, pad) if any(padding) else x.data
    data = kernels.conv_forward(xp, k.data, stride, dilation)

    def backward(g):
        if x.requires_grad:
            gx = kernels.conv_grad_input(g, k.data, stride, dilation, xp.shape)
            inner = (slice(None),) + tuple(slice(p, p + n) for p, n in zip(padding, x.shape[1:]))
            _acc(x, gx[inner])
        if k.requires_grad:
            _acc(k, kernels.conv_grad_weight(g, xp, k.shape, stride, dilation))

    return _node(data, (x, k), backward)


def conv3d(x, k, stride=(1, 1, 1), padding=None, dilation=(1, 1, 1)):
    """Cross-correlate ``x[C_in,T,H,W]`` with ``k[C_out,C_in,kT,kH,kW]``.

    ``padding=None`` pads each axis by ``(k - 1) // 2 * dilation`` ("same" before striding).
    """
    stride, dilation = _triple(stride), _triple(dilation)
    if padding is None:
        padding = tuple((kn - 1) // 2 * d for kn, d in zip(k.shape[2:], dilation))
    return _conv(x, k, stride, _triple(padding), dilation)


def conv2d(x, k, stride=(1, 1), padding=None, dilation=(1, 1)):
    """2-d variant on ``x[C_in,H,W]``, ``k[C_out,C_in,kH,kW]``; dilation spaces the taps."""
    stride, dilation = _triple(stride, 2), _triple(dilation, 2)
    if x.ndim != 3 or k.ndim != 4:
        raise DimensionError(f"conv2d expects input [C,H,W] and kernel [O,C,kH,kW], got {x.shape}, {k.shape}")
    if padding is None:
        padding = tuple((kn - 1) // 2 * d for kn, d in zip(k.shape[2:], dilation))
    padding = _triple(padding, 2)
    if min(dilation) < 1:
        raise ArgumentError(f"dilation must be >= 1, got {dilation}")
    c, h, w = x.shape
    o, _, kh, kw = k.shape
    y = _conv(reshape(x, (c, 1, h, w)), reshape(k, (o, c, 1, kh, kw)),
              (1,) + stride, (0,) + padding, (1,) + dilation)
    return reshape(y, (o,) + y.shape[2:])


def _pool_view(x, size):
    c, h, w = x.shape
    if h < size or w < size:
        raise DimensionError(f"cannot pool {x.shape} with window {size}")
    h2, w2 = h // size, w // size
    v = x.data[:, :h2 * size, :w2 * size].reshape(c, h2, size, w2, size)
    return v.transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, size * size)


def _pool_scatter(x, g, size):
    c, h, w = x.shape
    h2, w2 = g.shape[1:3]
    full = np.zeros_like(x.data)
    blocks = g.reshape(c, h2, w2, size, size).transpose(0, 1, 3, 2, 4).reshape(c, h2 * size, w2 * size)
    full[:, :h2 * size, :w2 * size] = blocks
    return full


def maxpool2d(x, size=2):
    """Non-overlapping ``size x size`` max pooling of ``x[C,H,W]``; ties route to the first max."""
    v = _pool_view(x, size)
    arg = v.argmax(axis=-1)
    data = np.take_along_axis(v, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        onehot = np.zeros(v.shape)
        np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
        _acc(x, _pool_scatter(x, onehot, size))

    return _node(data, (x,), backward)


def avgpool2d(x, size=2):
    v = _pool_view(x, size)
    data = v.mean(axis=-1)

    def backward(g):
        spread = np.repeat(g[..., None] / (size * size), size * size, axis=-1)
        _acc(x, _pool_scatter(x, spread, size))

    return _node(data, (x,), backward)
