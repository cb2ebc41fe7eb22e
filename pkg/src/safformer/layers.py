"""Layer helpers over ``[T, B, C, H, W]`` variables.

Weights live in flat ``name -> array`` dicts so that checkpoints, optimizers
and the gradient checker can treat every model uniformly. A :class:`Context`
carries the per-call switches (training, relaxed spiking, recorders).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .neuron import LifParams
from .tensor import BNStats


class NonFiniteError(FloatingPointError):
    def __init__(self, layer: str):
        super().__init__(f"non-finite values first produced by layer {layer!r}")
        self.layer = layer


@dataclass
class Context:
    params: dict[str, ag.Var]
    stats: dict[str, BNStats]
    lif: LifParams = field(default_factory=LifParams)
    training: bool = False
    update_stats: bool = True
    relaxed: bool = False
    temperature: float = 1.0
    exact_reset: bool | None = None
    recorder: object = None
    # name -> frozen Top-K mask; reused instead of recomputing when present
    masks: dict | None = None
    capture: dict | None = None
    check_finite: bool = False
    info: dict = field(default_factory=dict)

    @classmethod
    def from_arrays(cls, params: dict[str, np.ndarray], stats: dict[str, BNStats], requires_grad=False, **kw):
        wrap = ag.param if requires_grad else ag.Var
        return cls({k: wrap(v) for k, v in params.items()}, stats, **kw)

    def w(self, name: str) -> ag.Var:
        return self.params[name]

    def keep(self, name: str, v: ag.Var) -> ag.Var:
        if self.check_finite and not np.all(np.isfinite(v.data)):
            raise NonFiniteError(name)
        if self.capture is not None:
            self.capture[name] = v.data
        return v


# -- weight construction -------------------------------------------------------


def init_conv(rng: np.random.Generator, shape) -> np.ndarray:
    """Fan-in scaled uniform init for a conv weight [O, I, k, k]."""
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def add_conv(params, rng, name, c_in, c_out, k, groups=1):
    params[name] = init_conv(rng, (c_out, c_in // groups, k, k))


def add_bn(params, stats, name, c):
    params[name + ".gamma"] = np.ones(c)
    params[name + ".beta"] = np.zeros(c)
    stats[name] = BNStats.fresh(c)


# -- forward helpers -----------------------------------------------------------


def _merge(x: ag.Var) -> ag.Var:
    t, b = x.shape[:2]
    return ag.reshape(x, (t * b,) + x.shape[2:])


def _split(x: ag.Var, t: int) -> ag.Var:
    return ag.reshape(x, (t, x.shape[0] // t) + x.shape[1:])


def conv(ctx: Context, x: ag.Var, name: str, stride=1, padding=0, groups=1, kind="snn") -> ag.Var:
    t = x.shape[0]
    w = ctx.w(name)
    out = _split(ag.conv2d(_merge(x), w, stride, padding, groups), t)
    if ctx.recorder is not None:
        o, cg, k, _ = w.shape
        ctx.recorder.add_layer(name, kind, x.data, out.shape[-2:], cg, o, k)
    return ctx.keep(name, out)


def bn(ctx: Context, x: ag.Var, name: str) -> ag.Var:
    t = x.shape[0]
    y = ag.batch_norm(_merge(x), ctx.w(name + ".gamma"), ctx.w(name + ".beta"), ctx.stats[name],
                      training=ctx.training, update=ctx.training and ctx.update_stats)
    return ctx.keep(name, _split(y, t))


def sn(ctx: Context, x: ag.Var, name: str) -> ag.Var:
    """Multi-step LIF over the time axis."""
    return ctx.keep(name, ag.lif(x, ctx.lif, ctx.relaxed, ctx.temperature, ctx.exact_reset))


def gate_sn(ctx: Context, x: ag.Var, name: str) -> ag.Var:
    """Stateless spiking neuron (each timestep thresholded independently)."""
    return ctx.keep(name, ag.threshold(x, ctx.lif, ctx.relaxed, ctx.temperature))


def pool(ctx: Context, x: ag.Var, name: str) -> ag.Var:
    return ctx.keep(name, ag.max_pool(x, 2, 2))


def hadamard(ctx: Context, a: ag.Var, b: ag.Var, name: str, gate_channels: int, fan_out: int) -> ag.Var:
    """Elementwise gating, counted as accumulate events driven by ``a``."""
    if ctx.recorder is not None:
        ctx.recorder.add_layer(name, "snn", a.data, a.shape[-2:], gate_channels, fan_out, 1)
    return ctx.keep(name, ag.mul(a, b))
