"""Minimal reverse-mode autodiff over numpy arrays.

Just enough tape to differentiate the dense transformer and its loss suite:
array ops record closures onto their output nodes, `backward` replays them in
reverse topological order. Gradients accumulate in float with the same dtype
as the forward data, so the whole graph can run in float64 for the
finite-difference and partition-invariance checks and float32 for training.

Every op accepts plain numpy arrays / scalars in place of Var (treated as
constants with no gradient).
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Var",
    "as_var",
    "add", "sub", "mul", "div", "neg", "pow_const",
    "matmul", "reshape", "transpose", "concat", "getitem",
    "take_rows", "put_rows", "select_lastdim",
    "vsum", "vmean", "vmax_const",
    "exp", "log", "sqrt", "tanh", "sigmoid", "softplus", "gelu",
    "softmax", "log_softmax", "layernorm",
    "backward",
]


class Var:
    """A node in the tape: numpy payload plus backward closure."""

    __slots__ = ("data", "grad", "parents", "bw", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, parents=(), bw=None):
        self.data = np.asarray(data)
        self.grad = None
        self.parents = parents
        self.bw = bw
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data, dtype=self.data.dtype)
        self.grad += g

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        return f"Var(shape={self.data.shape}, grad={'yes' if self.requires_grad else 'no'})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape it was broadcast from."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(a, b, out_data, da_fn, db_fn):
    a, b = as_var(a), as_var(b)
    out = Var(out_data, parents=(a, b))
    if out.requires_grad:
        def bw(g):
            if a.requires_grad:
                a.accumulate(_unbroadcast(da_fn(g), a.data.shape))
            if b.requires_grad:
                b.accumulate(_unbroadcast(db_fn(g), b.data.shape))
        out.bw = bw
    return out


def _unary(a, out_data, da_fn):
    a = as_var(a)
    out = Var(out_data, parents=(a,))
    if out.requires_grad:
        def bw(g):
            a.accumulate(_unbroadcast(da_fn(g), a.data.shape))
        out.bw = bw
    return out


def add(a, b):
    a, b = as_var(a), as_var(b)
    return _binary(a, b, a.data + b.data, lambda g: g, lambda g: g)


def sub(a, b):
    a, b = as_var(a), as_var(b)
    return _binary(a, b, a.data - b.data, lambda g: g, lambda g: -g)


def mul(a, b):
    a, b = as_var(a), as_var(b)
    return _binary(a, b, a.data * b.data, lambda g: g * b.data, lambda g: g * a.data)


def div(a, b):
    a, b = as_var(a), as_var(b)
    return _binary(a, b, a.data / b.data,
                   lambda g: g / b.data,
                   lambda g: -g * a.data / (b.data * b.data))


def neg(a):
    a = as_var(a)
    return _unary(a, -a.data, lambda g: -g)


def pow_const(a, exponent: float):
    """a ** exponent for a constant exponent (a >= 0 when exponent < 1)."""
    a = as_var(a)
    out_data = a.data ** exponent
    return _unary(a, out_data, lambda g: g * exponent * a.data ** (exponent - 1.0))


def matmul(a, b):
    a, b = as_var(a), as_var(b)
    out_data = a.data @ b.data

    def da(g):
        return g @ np.swapaxes(b.data, -1, -2)

    def db(g):
        return np.swapaxes(a.data, -1, -2) @ g

    return _binary(a, b, out_data, da, db)


def reshape(a, shape):
    a = as_var(a)
    return _unary(a, a.data.reshape(shape), lambda g: g.reshape(a.data.shape))


def transpose(a, axes):
    a = as_var(a)
    inv = np.argsort(axes)
    return _unary(a, a.data.transpose(axes), lambda g: g.transpose(inv))


def concat(parts, axis=0):
    parts = [as_var(p) for p in parts]
    out = Var(np.concatenate([p.data for p in parts], axis=axis), parents=tuple(parts))
    if out.requires_grad:
        sizes = [p.data.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]

        def bw(g):
            for p, piece in zip(parts, np.split(g, splits, axis=axis)):
                if p.requires_grad:
                    p.accumulate(piece)
        out.bw = bw
    return out


def getitem(a, key):
    a = as_var(a)
    out = Var(a.data[key], parents=(a,))
    if out.requires_grad:
        def bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, key, g)
            a.accumulate(full)
        out.bw = bw
    return out


def take_rows(a, idx):
    """Gather rows along axis 0; backward scatter-adds."""
    a = as_var(a)
    idx = np.asarray(idx)
    out = Var(a.data[idx], parents=(a,))
    if out.requires_grad:
        def bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a.accumulate(full)
        out.bw = bw
    return out


def put_rows(a, idx, values):
    """Copy of `a` with rows at `idx` replaced by `values` (no duplicates)."""
    a, values = as_var(a), as_var(values)
    idx = np.asarray(idx)
    data = a.data.copy()
    data[idx] = values.data
    out = Var(data, parents=(a, values))
    if out.requires_grad:
        def bw(g):
            if a.requires_grad:
                ga = g.copy()
                ga[idx] = 0.0
                a.accumulate(ga)
            if values.requires_grad:
                values.accumulate(g[idx])
        out.bw = bw
    return out


def select_lastdim(a, idx):
    """out[i] = a[i, idx[i]] for a 2D input (one class per row)."""
    a = as_var(a)
    idx = np.asarray(idx)
    rows = np.arange(a.data.shape[0])
    out = Var(a.data[rows, idx], parents=(a,))
    if out.requires_grad:
        def bw(g):
            full = np.zeros_like(a.data)
            full[rows, idx] = g
            a.accumulate(full)
        out.bw = bw
    return out


def vsum(a, axis=None, keepdims=False):
    a = as_var(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def da(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy() if np.ndim(g) == 0 else np.full(a.data.shape, g, dtype=a.data.dtype)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(g2, a.data.shape).copy()

    return _unary(a, out_data, da)


def vmean(a, axis=None, keepdims=False):
    a = as_var(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def vmax_const(a, floor: float):
    """Elementwise max(a, floor) for a constant floor; subgradient 1 at ties."""
    a = as_var(a)
    mask = (a.data >= floor)
    return _unary(a, np.maximum(a.data, floor), lambda g: g * mask)


def exp(a):
    a = as_var(a)
    e = np.exp(a.data)
    return _unary(a, e, lambda g: g * e)


def log(a):
    a = as_var(a)
    return _unary(a, np.log(a.data), lambda g: g / a.data)


def sqrt(a):
    a = as_var(a)
    s = np.sqrt(a.data)
    return _unary(a, s, lambda g: g * 0.5 / s)


def tanh(a):
    a = as_var(a)
    t = np.tanh(a.data)
    return _unary(a, t, lambda g: g * (1.0 - t * t))


def sigmoid(a):
    a = as_var(a)
    # stable both directions
    s = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                 np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    return _unary(a, s, lambda g: g * s * (1.0 - s))


def softplus(a):
    """log(1 + exp(a)), computed stably."""
    a = as_var(a)
    out_data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    sig = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
    grad_factor = np.where(a.data >= 0, sig, 1.0 - sig)
    return _unary(a, out_data, lambda g: g * grad_factor)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """tanh-approximation GELU with its analytic derivative."""
    a = as_var(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def da(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)

    return _unary(a, out_data, da)


def softmax(a, axis=-1):
    a = as_var(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def da(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return s * (g - dot)

    return _unary(a, s, da)


def log_softmax(a, axis=-1):
    a = as_var(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    s = np.exp(out_data)

    def da(g):
        return g - s * g.sum(axis=axis, keepdims=True)

    return _unary(a, out_data, da)


def layernorm(a, gain, bias, eps: float = 1e-5):
    """LayerNorm over the last axis with learned gain/bias."""
    a, gain, bias = as_var(a), as_var(gain), as_var(bias)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Var(xhat * gain.data + bias.data, parents=(a, gain, bias))
    if out.requires_grad:
        n = x.shape[-1]

        def bw(g):
            if gain.requires_grad:
                gain.accumulate(_unbroadcast(g * xhat, gain.data.shape))
            if bias.requires_grad:
                bias.accumulate(_unbroadcast(g, bias.data.shape))
            if a.requires_grad:
                gh = g * gain.data
                term = gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
                a.accumulate(term * inv)
        out.bw = bw
    return out


def backward(root: Var, seed=None):
    """Run reverse-mode accumulation from a root node (usually a scalar)."""
    topo: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    if seed is None:
        seed = np.ones_like(root.data)
    root.grad = np.asarray(seed, dtype=root.data.dtype)
    for node in reversed(topo):
        if node.bw is not None and node.grad is not None:
            node.bw(node.grad)
