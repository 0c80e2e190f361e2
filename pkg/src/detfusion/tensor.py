"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value in this package lives in a row-major numpy float64 array.
Differentiable operations record a backward closure plus parent references;
`Tensor.backward` replays the recorded graph once in reverse creation order.
Parents are always created before children, so descending creation ids are a
valid reverse-topological order, and the replay is bit-deterministic.

Gradients accumulate additively into `.grad` of requires-grad leaves (and of
nodes that called `retain_grad`) until `zero_grad` clears them.
"""

from __future__ import annotations

import itertools

import numpy as np

_ids = itertools.count()


class GradMode:
    """Process-wide switch; no graph is recorded while disabled."""

    enabled = True


class no_grad:
    """Context manager that suspends graph recording."""

    def __enter__(self):
        self._prev = GradMode.enabled
        GradMode.enabled = False
        return self

    def __exit__(self, *exc):
        GradMode.enabled = self._prev
        return False


class Tensor:
    """N-dimensional float64 array that can participate in backprop."""

    __slots__ = ("data", "requires_grad", "grad", "retains_grad", "_parents", "_backward", "_op", "_id")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.retains_grad = False
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._id = next(_ids)

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, op={self._op!r}{flag})"

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._scalar_error()

    def _scalar_error(self):
        raise ValueError(f"item() requires a scalar tensor, got shape {self.data.shape}")

    # -- graph management --------------------------------------------------

    def detach(self):
        return Tensor(self.data.copy())

    def retain_grad(self):
        self.retains_grad = True
        return self

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Populate `.grad` of every reachable requires-grad leaf.

        Repeated calls without `zero_grad` accumulate. The loss must be a
        scalar (single element).
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.data.shape}")
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)

        nodes = []
        seen = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._id, reverse=True)

        flowing = {id(self): seed}
        for t in nodes:
            g = flowing.pop(id(t), None)
            if g is None:
                continue
            is_leaf = t._backward is None
            if t.requires_grad and (is_leaf or t.retains_grad):
                t.grad = g.copy() if t.grad is None else t.grad + g
            if t._backward is None:
                continue
            for parent, pg in zip(t._parents, t._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in flowing:
                    flowing[key] = flowing[key] + pg
                else:
                    flowing[key] = pg

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data, parents, backward, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.retains_grad = False
    out._id = next(_ids)
    out._op = op
    if GradMode.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ------------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _from_op(data, (a, b), bw, "add")


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _from_op(data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _from_op(data, (a, b), bw, "mul")


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _from_op(data, (a, b), bw, "div")


def neg(a):
    a = _wrap(a)
    return _from_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p):
    a = _wrap(a)
    p = float(p)
    data = a.data**p

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _from_op(data, (a,), bw, "pow")


def exp(a):
    a = _wrap(a)
    data = np.exp(a.data)

    def bw(g):
        return (g * data,)

    return _from_op(data, (a,), bw, "exp")


def log(a):
    a = _wrap(a)
    data = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return _from_op(data, (a,), bw, "log")


def tanh(a):
    a = _wrap(a)
    data = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - data * data),)

    return _from_op(data, (a,), bw, "tanh")


def sigmoid(a):
    a = _wrap(a)
    data = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        return (g * data * (1.0 - data),)

    return _from_op(data, (a,), bw, "sigmoid")


def relu(a):
    a = _wrap(a)
    data = np.maximum(a.data, 0.0)

    def bw(g):
        return (g * (a.data > 0.0),)

    return _from_op(data, (a,), bw, "relu")


def maximum(a, b):
    a, b = _wrap(a), _wrap(b)
    data = np.maximum(a.data, b.data)

    def bw(g):
        # ties route to the first argument
        pick_a = a.data >= b.data
        return _unbroadcast(g * pick_a, a.data.shape), _unbroadcast(g * ~pick_a, b.data.shape)

    return _from_op(data, (a, b), bw, "maximum")


def minimum(a, b):
    a, b = _wrap(a), _wrap(b)
    data = np.minimum(a.data, b.data)

    def bw(g):
        pick_a = a.data <= b.data
        return _unbroadcast(g * pick_a, a.data.shape), _unbroadcast(g * ~pick_a, b.data.shape)

    return _from_op(data, (a, b), bw, "minimum")


def clip(a, lo, hi):
    return minimum(maximum(a, lo), hi)


def absolute(a):
    return maximum(a, neg(a))


# -- linear algebra / reductions --------------------------------------------


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.data.shape} x {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _from_op(data, (a, b), bw, "matmul")


def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy() if np.ndim(g) == 0 or g.shape != a.data.shape else g,)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, a.data.shape).copy(),)

    return _from_op(np.asarray(data), (a,), bw, "sum")


def tmean(a, axis=None, keepdims=False):
    a = _wrap(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def tmax(a, axis=None, keepdims=False):
    a = _wrap(a)
    data = a.data.max(axis=axis, keepdims=keepdims)

    def bw(g):
        mask = np.zeros_like(a.data)
        if axis is None:
            mask[np.unravel_index(np.argmax(a.data), a.data.shape)] = 1.0
            return (mask * g,)
        idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
        np.put_along_axis(mask, idx, 1.0, axis)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (mask * ge,)

    return _from_op(np.asarray(data), (a,), bw, "max")


def reshape(a, shape):
    a = _wrap(a)
    data = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.data.shape),)

    return _from_op(data, (a,), bw, "reshape")


def transpose(a, axes=None):
    a = _wrap(a)
    data = a.data.transpose(axes)
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        return (g.transpose(inv),)

    return _from_op(data, (a,), bw, "transpose")


def take(a, idx):
    """Indexing/slicing; gradient scatters (with accumulation) back to `a`."""
    a = _wrap(a)
    data = a.data[idx]

    def bw(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _from_op(np.asarray(data), (a,), bw, "take")


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _from_op(data, tuple(tensors), bw, "concat")


def stack(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _from_op(data, tuple(tensors), bw, "stack")


# -- normalizations ----------------------------------------------------------


def softmax(a, axis=-1):
    """Max-subtracted exponential normalization along `axis`."""
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _from_op(data, (a,), bw, "softmax")


def log_softmax(a, axis=-1):
    a = _wrap(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def bw(g):
        return (g - np.exp(data) * g.sum(axis=axis, keepdims=True),)

    return _from_op(data, (a,), bw, "log_softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Zero-mean unit-variance normalization of the last axis, then affine."""
    x = _wrap(x)
    mu = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return add(mul(mul(centered, inv), gamma), beta)


# -- structured ops ----------------------------------------------------------


def bilinear_sample(feature_map, points):
    """Bilinearly interpolate `feature_map` [H,W,C] at continuous points [P,2].

    Points are (row, column) pixel coordinates; sampling exactly at integer
    (i, j) returns map[i, j, :]. Coordinates outside [0,H-1]x[0,W-1] read as
    zero, which keeps the op differentiable w.r.t. both the map values and
    the point coordinates everywhere.
    """
    feature_map, points = _wrap(feature_map), _wrap(points)
    m = feature_map.data
    if m.ndim != 3:
        raise ValueError(f"bilinear_sample expects a [H,W,C] map, got shape {m.shape}")
    pts = points.data
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"bilinear_sample expects [P,2] points, got shape {pts.shape}")
    h, w, _ = m.shape
    r, c = pts[:, 0], pts[:, 1]
    r0 = np.floor(r)
    c0 = np.floor(c)
    dr = (r - r0)[:, None]
    dc = (c - c0)[:, None]
    r0i, c0i = r0.astype(np.int64), c0.astype(np.int64)

    def corner(ri, ci):
        valid = (ri >= 0) & (ri <= h - 1) & (ci >= 0) & (ci <= w - 1)
        vals = m[np.clip(ri, 0, h - 1), np.clip(ci, 0, w - 1), :]
        return np.where(valid[:, None], vals, 0.0), valid

    v00, ok00 = corner(r0i, c0i)
    v01, ok01 = corner(r0i, c0i + 1)
    v10, ok10 = corner(r0i + 1, c0i)
    v11, ok11 = corner(r0i + 1, c0i + 1)
    w00 = (1.0 - dr) * (1.0 - dc)
    w01 = (1.0 - dr) * dc
    w10 = dr * (1.0 - dc)
    w11 = dr * dc
    data = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def bw(g):
        gm = np.zeros_like(m)
        for (ri, ci, ok, wgt) in (
            (r0i, c0i, ok00, w00),
            (r0i, c0i + 1, ok01, w01),
            (r0i + 1, c0i, ok10, w10),
            (r0i + 1, c0i + 1, ok11, w11),
        ):
            contrib = g * wgt
            np.add.at(gm, (ri[ok], ci[ok]), contrib[ok])
        d_dr = (v10 - v00) * (1.0 - dc) + (v11 - v01) * dc
        d_dc = (v01 - v00) * (1.0 - dr) + (v11 - v10) * dr
        gp = np.stack([(g * d_dr).sum(axis=1), (g * d_dc).sum(axis=1)], axis=1)
        return gm, gp

    return _from_op(data, (feature_map, points), bw, "bilinear_sample")


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-d convolution on a channel-last image.

    x: [H,W,Cin], weight: [kh,kw,Cin,Cout], bias: [Cout] or None.
    """
    x, weight = _wrap(x), _wrap(weight)
    bias = None if bias is None else _wrap(bias)
    kh, kw, cin, cout = weight.data.shape
    if x.data.ndim != 3 or x.data.shape[2] != cin:
        raise ValueError(f"conv2d input {x.data.shape} incompatible with kernel {weight.data.shape}")
    s, p = int(stride), int(padding)
    xp = np.pad(x.data, ((p, p), (p, p), (0, 0))) if p else x.data
    hp, wp, _ = xp.shape
    ho = (hp - kh) // s + 1
    wo = (wp - kw) // s + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    cols = windows[::s, ::s].transpose(0, 1, 3, 4, 2).reshape(ho * wo, kh * kw * cin)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out = out + bias.data
    data = out.reshape(ho, wo, cout)

    def bw(g):
        gm = g.reshape(ho * wo, cout)
        gw = (cols.T @ gm).reshape(kh, kw, cin, cout)
        gcols = (gm @ wmat.T).reshape(ho, wo, kh, kw, cin)
        gxp = np.zeros((hp, wp, cin))
        for i in range(kh):
            for j in range(kw):
                gxp[i : i + s * ho : s, j : j + s * wo : s, :] += gcols[:, :, i, j, :]
        gx = gxp[p : hp - p, p : wp - p, :] if p else gxp
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _from_op(data, parents, bw, "conv2d")


# -- derived numerics ---------------------------------------------------------


def inverse_sigmoid(x, eps=1e-6):
    xc = clip(x, eps, 1.0 - eps)
    return sub(log(xc), log(sub(1.0, xc)))


def bce_with_logits(logits, targets):
    """Elementwise binary cross-entropy on raw logits, numerically stable."""
    z, t = _wrap(logits), _wrap(targets)
    return add(sub(relu(z), mul(z, t)), log(add(1.0, exp(neg(absolute(z))))))
