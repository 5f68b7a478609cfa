"""Reverse-mode automatic differentiation on numpy arrays.

A small tape-based engine: every operation builds a `Tensor` node that
remembers its parents and a closure computing parent gradients from the
output gradient. `Tensor.backward()` on a scalar walks the tape in reverse
topological order. All data is float64 so finite-difference checks have
headroom.

Forward passes that do not need gradients should run under `no_grad()`;
otherwise convolution column buffers are retained for the backward pass.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64

_GRAD_ENABLED = True


def grad_enabled():
    return _GRAD_ENABLED


class no_grad:
    """Context manager disabling tape construction (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverses numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, (g, s) in enumerate(zip(grad.shape, shape)):
        if s == 1 and g != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A numpy array plus optional gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._parents = ()

    # -- bookkeeping --------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad=None, free_graph=True):
        """Backpropagate from this node. Scalar nodes may omit `grad`.

        With `free_graph` (default) the tape is released as it is consumed
        and intermediate gradients are dropped, keeping peak memory low.
        A freed graph cannot be backpropagated twice.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without gradient requires a scalar")
            grad = np.ones_like(self.data)
        # iterative topological sort (graphs are deep)
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.asarray(grad, dtype=DTYPE) if self.grad is None \
            else self.grad + np.asarray(grad, dtype=DTYPE)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
            if free_graph:
                had_parents = bool(node._parents)
                node._backward = None
                node._parents = ()
                if had_parents and node is not self:
                    node.grad = None

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_t(other), -1.0))

    def __rsub__(self, other):
        return add(_t(other), mul(self, -1.0))

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_t(other), self)

    def __pow__(self, k):
        return pow_scalar(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def cos(self):
        return cos(self)

    def clamp(self, lo, hi):
        return clamp(self, lo, hi)


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _make(data, parents, backward):
    """Build an op node; tape is recorded only when gradients are live."""
    need = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=need)
    if need:
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- elementwise -------------------------------------------------------


def add(a, b):
    a, b = _t(a), _t(b)
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), backward)


def mul(a, b):
    a, b = _t(a), _t(b)
    data = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), backward)


def div(a, b):
    a, b = _t(a), _t(b)
    data = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape) \
            if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), backward)


def pow_scalar(a, k):
    a = _t(a)
    k = float(k)
    data = a.data ** k

    def backward(g):
        return (g * k * a.data ** (k - 1.0),)

    return _make(data, (a,), backward)


def exp(a):
    a = _t(a)
    data = np.exp(a.data)

    def backward(g):
        return (g * data,)

    return _make(data, (a,), backward)


def log(a):
    a = _t(a)
    data = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _make(data, (a,), backward)


def sqrt(a):
    a = _t(a)
    data = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / data,)

    return _make(data, (a,), backward)


def cos(a):
    a = _t(a)
    data = np.cos(a.data)

    def backward(g):
        return (-g * np.sin(a.data),)

    return _make(data, (a,), backward)


def relu(a):
    a = _t(a)
    data = np.maximum(a.data, 0.0)

    def backward(g):
        return (g * (a.data > 0.0),)

    return _make(data, (a,), backward)


def sigmoid(a):
    a = _t(a)
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * data * (1.0 - data),)

    return _make(data, (a,), backward)


def clamp(a, lo, hi):
    a = _t(a)
    data = np.clip(a.data, lo, hi)

    def backward(g):
        return (g * ((a.data >= lo) & (a.data <= hi)),)

    return _make(data, (a,), backward)


# -- reductions & shape ------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = _t(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(ax % a.data.ndim for ax in axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = _t(a)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    s = tsum(a, axis, keepdims)
    return mul(s, 1.0 / float(count))


def amax(a, axis, keepdims=False):
    """Max along an axis; gradient splits equally among ties."""
    a = _t(a)
    data = a.data.max(axis=axis, keepdims=keepdims)

    def backward(g):
        full = a.data.max(axis=axis, keepdims=True)
        mask = (a.data == full)
        counts = mask.sum(axis=axis, keepdims=True)
        g = np.asarray(g)
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(ax % a.data.ndim for ax in axes):
                g = np.expand_dims(g, ax)
        return (mask * (g / counts),)

    return _make(data, (a,), backward)


def reshape(a, shape):
    a = _t(a)
    data = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.data.shape),)

    return _make(data, (a,), backward)


def transpose(a, axes=None):
    a = _t(a)
    data = a.data.transpose(axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _make(data, (a,), backward)


def concat(tensors, axis=0):
    tensors = [_t(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, bounds, axis=axis)
        return tuple(p if t.requires_grad else None
                     for p, t in zip(pieces, tensors))

    return _make(data, tuple(tensors), backward)


def narrow(a, axis, start, length):
    """Slice `length` entries from `start` along `axis`."""
    a = _t(a)
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    data = a.data[index]

    def backward(g):
        out = np.zeros_like(a.data)
        out[index] = g
        return (out,)

    return _make(data, (a,), backward)


def matmul(a, b):
    a, b = _t(a), _t(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul supports 2-D operands")
    data = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), backward)


def softmax(a, axis):
    """Numerically stable softmax composed from primitives."""
    a = _t(a)
    shifted = a - amax(a, axis=axis, keepdims=True)
    e = exp(shifted)
    return div(e, tsum(e, axis=axis, keepdims=True))


# -- convolution & spatial ops ------------------------------------------


def _conv_out_size(n, k, stride, padding, dilation):
    eff = (k - 1) * dilation + 1
    return (n + 2 * padding - eff) // stride + 1


def _im2col(xp, kh, kw, stride, dilation, oh, ow):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            hi = i * dilation
            wj = j * dilation
            cols[:, :, i, j] = xp[:, :, hi:hi + stride * oh:stride,
                                  wj:wj + stride * ow:stride]
    return cols


def _conv1x1(x, w, b):
    """Pointwise convolution fast path: no column buffer needed."""
    n, c, h, wd = x.data.shape
    f = w.data.shape[0]
    w2 = w.data.reshape(f, c)
    out = np.tensordot(w2, x.data, axes=([1], [1]))  # (F, N, H, W)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    if b is not None:
        out += b.data.reshape(1, f, 1, 1)

    def backward(g):
        gw = None
        if w.requires_grad:
            gw = np.tensordot(g, x.data, axes=([0, 2, 3], [0, 2, 3]))
            gw = gw.reshape(f, c, 1, 1)
        gb = g.sum(axis=(0, 2, 3)) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            gx = np.tensordot(w2, g, axes=([0], [1]))  # (C, N, H, W)
            gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
        if b is None:
            return gx, gw
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def conv2d(x, w, b=None, stride=1, padding=0, dilation=1):
    """2-D convolution, NCHW layout, square stride/padding/dilation."""
    x, w = _t(x), _t(w)
    if b is not None:
        b = _t(b)
    n, c, h, wd = x.data.shape
    f, cw, kh, kw = w.data.shape
    if cw != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight {cw}")
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        return _conv1x1(x, w, b)
    oh = _conv_out_size(h, kh, stride, padding, dilation)
    ow = _conv_out_size(wd, kw, stride, padding, dilation)
    if oh < 1 or ow < 1:
        raise ValueError("conv2d output would be empty; check kernel/padding")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    cols = _im2col(xp, kh, kw, stride, dilation, oh, ow)
    out = np.tensordot(w.data, cols, axes=([1, 2, 3], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    if b is not None:
        out += b.data.reshape(1, f, 1, 1)

    def backward(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5])) \
            if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            dcols = np.tensordot(g, w.data, axes=([1], [0]))  # (n,oh,ow,c,kh,kw)
            dcols = dcols.transpose(0, 3, 4, 5, 1, 2)
            hp, wp = h + 2 * padding, wd + 2 * padding
            dxp = np.zeros((n, c, hp, wp), dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    hi = i * dilation
                    wj = j * dilation
                    dxp[:, :, hi:hi + stride * oh:stride,
                        wj:wj + stride * ow:stride] += dcols[:, :, i, j]
            gx = dxp[:, :, padding:hp - padding, padding:wp - padding] \
                if padding else dxp
        if b is None:
            return gx, gw
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def max_pool2d(x):
    """2x2 max pooling, stride 2. Requires even spatial size."""
    x = _t(x)
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2d requires even spatial size, got {h}x{w}")
    xr = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
    data = xr.max(axis=(3, 5))

    def backward(g):
        mask = xr == data[:, :, :, None, :, None]
        counts = mask.sum(axis=(3, 5), keepdims=True)
        gr = mask * (g[:, :, :, None, :, None] / counts)
        return (gr.reshape(n, c, h, w),)

    return _make(data, (x,), backward)


def avg_pool2d(x):
    """2x2 average pooling, stride 2. Requires even spatial size."""
    x = _t(x)
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2d requires even spatial size, got {h}x{w}")
    data = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        gr = np.broadcast_to(g[:, :, :, None, :, None] * 0.25,
                             (n, c, h // 2, 2, w // 2, 2))
        return (gr.reshape(n, c, h, w).copy(),)

    return _make(data, (x,), backward)


def global_avg_pool(x):
    """Mean over spatial dims: (N,C,H,W) -> (N,C)."""
    return tmean(x, axis=(2, 3))


_RESIZE_CACHE = {}


def _resize_matrix(n_in, n_out):
    """Dense bilinear interpolation matrix (half-pixel centers, edge clamp)."""
    key = (n_in, n_out)
    m = _RESIZE_CACHE.get(key)
    if m is None:
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        i0 = np.floor(pos).astype(int)
        frac = pos - i0
        i0c = np.clip(i0, 0, n_in - 1)
        i1c = np.clip(i0 + 1, 0, n_in - 1)
        m = np.zeros((n_out, n_in), dtype=DTYPE)
        rows = np.arange(n_out)
        np.add.at(m, (rows, i0c), 1.0 - frac)
        np.add.at(m, (rows, i1c), frac)
        _RESIZE_CACHE[key] = m
    return m


def bilinear_resize(x, out_h, out_w):
    """Bilinear spatial resize of (N,C,H,W); exactly linear, so the
    backward pass is the transposed interpolation."""
    x = _t(x)
    n, c, h, w = x.data.shape
    if (h, w) == (out_h, out_w):
        return x
    mh = _resize_matrix(h, out_h)
    mw = _resize_matrix(w, out_w)
    t = np.einsum('ih,nchw->nciw', mh, x.data, optimize=True)
    data = np.einsum('jw,nciw->ncij', mw, t, optimize=True)

    def backward(g):
        gt = np.einsum('ih,ncij->nchj', mh, g, optimize=True)
        return (np.einsum('jw,nchj->nchw', mw, gt, optimize=True),)

    return _make(data, (x,), backward)
