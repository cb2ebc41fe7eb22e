"""Minimal tape-free reverse-mode autodiff over numpy arrays.

Each :class:`Var` remembers its parents and a closure mapping the output
gradient to parent gradients. :func:`backward` walks the graph in reverse
topological order. Only the operations the spiking model needs exist here.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .neuron import LifParams, lif_backward, lif_forward, relaxed_trace, soft_step, surrogate_grad


class Var:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.data.shape

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        return f"Var(shape={self.data.shape}, requires_grad={self.requires_grad})"


def const(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def param(x) -> Var:
    return Var(x, requires_grad=True)


def _make(data, parents, fn) -> Var:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Var(data, parents, fn)
    return Var(data)


def backward(out: Var, grad=None) -> None:
    """Accumulate d(out)/d(leaf) into ``.grad`` of every reachable leaf."""
    order, seen = [], set()
    stack = [(out, False)]
    while stack:
        v, done = stack.pop()
        if done:
            order.append(v)
            continue
        if id(v) in seen or not v.requires_grad:
            continue
        seen.add(id(v))
        stack.append((v, True))
        for p in v.parents:
            stack.append((p, False))
    grads = {id(out): np.ones_like(out.data) if grad is None else np.asarray(grad, dtype=np.float64)}
    for v in reversed(order):
        g = grads.pop(id(v), None)
        if g is None:
            continue
        if v.backward_fn is None:
            v.grad = g if v.grad is None else v.grad + g
            continue
        for p, gp in zip(v.parents, v.backward_fn(g)):
            if gp is None or not p.requires_grad:
                continue
            grads[id(p)] = grads[id(p)] + gp if id(p) in grads else gp


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Var:
    a, b = const(a), const(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Var:
    a, b = const(a), const(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Var, c: float) -> Var:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Var) -> Var:
    m = a.data > 0
    return _make(a.data * m, (a,), lambda g: (g * m,))


def reshape(a: Var, shape) -> Var:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Var, axes) -> Var:
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def sum_(a: Var, axis, keepdims=False) -> Var:
    shape = a.shape

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), fn)


def mean(a: Var, axis, keepdims=False) -> Var:
    axes = axis if isinstance(axis, tuple) else (axis,)
    n = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def slice_channels(a: Var, start: int, stop: int, axis: int = 2) -> Var:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape

    def fn(g):
        out = np.zeros(shape)
        out[idx] = g
        return (out,)

    return _make(a.data[idx], (a,), fn)


def concat(vs, axis: int) -> Var:
    vs = [const(v) for v in vs]
    sizes = np.cumsum([v.shape[axis] for v in vs])[:-1]
    return _make(np.concatenate([v.data for v in vs], axis=axis), vs,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def matmul(a, b) -> Var:
    a, b = const(a), const(b)

    def fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), fn)


# -- layers --------------------------------------------------------------------


def conv2d(x: Var, w: Var, stride: int = 1, padding: int = 0, groups: int = 1) -> Var:
    """Convolution over [N, C, H, W]."""
    out = T.conv_forward(x.data, w.data, stride, padding, groups)

    def fn(g):
        gx, gw = T.conv_backward(g, x.data, w.data, stride, padding, groups)
        return gx, gw

    return _make(out, (x, w), fn)


def batch_norm(x: Var, gamma: Var, beta: Var, stats: T.BNStats, training: bool, update: bool = True) -> Var:
    """Per-channel normalization over axis 1 of ``x``."""
    axes = tuple(i for i in range(x.data.ndim) if i != 1)
    shape = [1] * x.data.ndim
    shape[1] = -1
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        if update:
            n = x.data.size // x.data.shape[1]
            unbiased = var.reshape(-1) * n / (n - 1) if n > 1 else var.reshape(-1)
            stats.mean = (1 - stats.momentum) * stats.mean + stats.momentum * mu.reshape(-1)
            stats.var = (1 - stats.momentum) * stats.var + stats.momentum * unbiased
    else:
        mu = stats.mean.reshape(shape)
        var = stats.var.reshape(shape)
    inv = 1.0 / np.sqrt(var + stats.eps)
    xhat = (x.data - mu) * inv
    g_ = gamma.data.reshape(shape)
    out = g_ * xhat + beta.data.reshape(shape)

    def fn(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        if training:
            gm = g.mean(axis=axes, keepdims=True)
            gxm = (g * xhat).mean(axis=axes, keepdims=True)
            dx = g_ * inv * (g - gm - xhat * gxm)
        else:
            dx = g * g_ * inv
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), fn)


def max_pool(x: Var, window: int = 2, stride: int = 2) -> Var:
    """Max pooling over the last two axes; ties route to the first maximum."""
    xp = T._pool_pad(x.data, window, stride)
    lead = xp.shape[:-2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (window, window), axis=(-2, -1))[..., ::stride, ::stride, :, :]
    ho, wo = win.shape[-4], win.shape[-3]
    flat = win.reshape(*lead, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    h, w = x.shape[-2:]

    def fn(g):
        gp = np.zeros(xp.shape)
        di, dj = np.divmod(arg, window)
        rows = np.arange(ho)[:, None] * stride + di
        cols = np.arange(wo)[None, :] * stride + dj
        lead_idx = np.indices(lead + (ho, wo))[:-2] if lead else ()
        np.add.at(gp, (*lead_idx, rows, cols), g)
        return (gp[..., :h, :w],)

    return _make(out, (x,), fn)


def lif(x: Var, params: LifParams, relaxed: bool = False, temperature: float = 1.0,
        exact_reset: bool | None = None) -> Var:
    """Multi-step LIF over axis 0 of ``x``; surrogate gradients in backward."""
    if relaxed:
        s, u = relaxed_trace(x.data, params, temperature)
        temp = temperature
    else:
        s, _, u = lif_forward(x.data, params)
        temp = None
    return _make(s, (x,), lambda g: (lif_backward(g, s, u, params, temp, exact_reset),))


def threshold(x: Var, params: LifParams, relaxed: bool = False, temperature: float = 1.0) -> Var:
    """Stateless single-step spiking neuron (no membrane carried across time)."""
    if relaxed:
        s = soft_step(x.data, params, temperature)
        d = surrogate_grad(x.data, params, temperature)
    else:
        s = (x.data >= params.v_threshold).astype(np.float64)
        d = surrogate_grad(x.data, params)
    return _make(s, (x,), lambda g: (g * d,))


def cross_entropy(logits: Var, labels) -> Var:
    """Mean softmax cross-entropy over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def fn(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _make(np.asarray(loss), (logits,), fn)
