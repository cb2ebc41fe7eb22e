"""Spiking active-filtering attention.

Q and K are generated per token (linear projection, optional depthwise 3x3
over the token grid, BN, LIF). Each token's saliency is the channel sum of
its Q spikes; a guidance module predicts how many tokens to keep, the Top-K
of the saliency vector is masked in, and the gated saliency fires a per-token
spike that gates K. Nothing of size N x N is ever formed.

Public functions take token tensors ``[T, B, N, C]``; the model-facing
:func:`saf_layer` works on ``[T, B, C, H, W]`` with row-major token order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .layers import Context, add_bn, add_conv, bn, conv, gate_sn, hadamard, sn
from .neuron import LifParams, lif_forward
from .tensor import BNStats, ConfigError, as_spikes

MODES = ("dynamic", "fixed", "dense")
DEFAULT_FIXED_RATIO = 0.6
K_MIN = 1


def sgm_hidden(c: int) -> int:
    return max(1, c // 4)


# -- weights -------------------------------------------------------------------


@dataclass
class AttentionWeights:
    """Weights of one SAF layer. Projections use the ``X @ W`` convention."""

    w_q: np.ndarray
    w_k: np.ndarray
    sgm_w1: np.ndarray
    sgm_w2: np.ndarray
    dw_q: np.ndarray | None = None
    dw_k: np.ndarray | None = None
    bn_q: tuple = None
    bn_k: tuple = None

    def __post_init__(self):
        c = self.w_q.shape[0]
        if self.w_q.shape != (c, c) or self.w_k.shape != (c, c):
            raise ConfigError("W_Q and W_K must be square C x C")
        if self.sgm_w1.shape[0] != c or self.sgm_w2.shape != (self.sgm_w1.shape[1], 1):
            raise ConfigError("SGM weights must be [C, H] and [H, 1]")
        if self.bn_q is None:
            self.bn_q = (np.ones(c), np.zeros(c), BNStats.fresh(c))
        if self.bn_k is None:
            self.bn_k = (np.ones(c), np.zeros(c), BNStats.fresh(c))

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def random(cls, c: int, rng: np.random.Generator, use_dwconv: bool = True) -> "AttentionWeights":
        params, stats = {}, {}
        init_saf(params, stats, rng, "attn", c, use_dwconv)
        return cls.from_params(params, stats, "attn")

    @classmethod
    def from_params(cls, params, stats, prefix) -> "AttentionWeights":
        p = prefix
        return cls(
            w_q=params[f"{p}.q_linear"][:, :, 0, 0].T.copy(),
            w_k=params[f"{p}.k_linear"][:, :, 0, 0].T.copy(),
            sgm_w1=params[f"{p}.sgm1"][:, :, 0, 0].T.copy(),
            sgm_w2=params[f"{p}.sgm2"][:, :, 0, 0].T.copy(),
            dw_q=params.get(f"{p}.q_dw"),
            dw_k=params.get(f"{p}.k_dw"),
            bn_q=(params[f"{p}.bn_q.gamma"], params[f"{p}.bn_q.beta"], stats[f"{p}.bn_q"]),
            bn_k=(params[f"{p}.bn_k.gamma"], params[f"{p}.bn_k.beta"], stats[f"{p}.bn_k"]),
        )

    def to_params(self, prefix: str = "attn"):
        p = prefix
        params = {
            f"{p}.q_linear": self.w_q.T[:, :, None, None],
            f"{p}.k_linear": self.w_k.T[:, :, None, None],
            f"{p}.sgm1": self.sgm_w1.T[:, :, None, None],
            f"{p}.sgm2": self.sgm_w2.T[:, :, None, None],
            f"{p}.bn_q.gamma": self.bn_q[0], f"{p}.bn_q.beta": self.bn_q[1],
            f"{p}.bn_k.gamma": self.bn_k[0], f"{p}.bn_k.beta": self.bn_k[1],
        }
        if self.dw_q is not None:
            params[f"{p}.q_dw"] = self.dw_q
            params[f"{p}.k_dw"] = self.dw_k
        stats = {f"{p}.bn_q": self.bn_q[2], f"{p}.bn_k": self.bn_k[2]}
        return params, stats


def init_saf(params, stats, rng, prefix, c, use_dwconv=True):
    p = prefix
    add_conv(params, rng, f"{p}.q_linear", c, c, 1)
    add_conv(params, rng, f"{p}.k_linear", c, c, 1)
    if use_dwconv:
        add_conv(params, rng, f"{p}.q_dw", c, c, 3, groups=c)
        add_conv(params, rng, f"{p}.k_dw", c, c, 3, groups=c)
    add_bn(params, stats, f"{p}.bn_q", c)
    add_bn(params, stats, f"{p}.bn_k", c)
    h = sgm_hidden(c)
    add_conv(params, rng, f"{p}.sgm1", c, h, 1)
    add_conv(params, rng, f"{p}.sgm2", h, 1, 1)


def saf_conv_params(c: int, use_dwconv: bool = True) -> int:
    h = sgm_hidden(c)
    return 2 * c * c + (2 * 9 * c if use_dwconv else 0) + c * h + h


# -- layout helpers --------------------------------------------------------------


def grid_for(n: int, grid=None) -> tuple[int, int]:
    if grid is not None:
        h, w = grid
        if h * w != n:
            raise ConfigError(f"grid {h}x{w} does not hold {n} tokens")
        return int(h), int(w)
    r = math.isqrt(n)
    if r * r != n:
        raise ConfigError(f"{n} tokens do not form a square grid; pass grid=(H, W)")
    return r, r


def tokens_to_maps(x: np.ndarray, grid) -> np.ndarray:
    t, b, n, c = x.shape
    h, w = grid
    return x.transpose(0, 1, 3, 2).reshape(t, b, c, h, w)


def maps_to_tokens(x: np.ndarray) -> np.ndarray:
    t, b, c, h, w = x.shape
    return x.reshape(t, b, c, h * w).transpose(0, 1, 3, 2)


# -- model-facing layer ------------------------------------------------------------


def _gen(ctx: Context, x: ag.Var, p: str, which: str) -> ag.Var:
    y = conv(ctx, x, f"{p}.{which}_linear")
    if f"{p}.{which}_dw" in ctx.params:
        y = conv(ctx, y, f"{p}.{which}_dw", padding=1, groups=y.shape[2])
    return sn(ctx, bn(ctx, y, f"{p}.bn_{which}"), f"{p}.{which}")


def predict_k(ctx: Context, x: ag.Var, p: str) -> tuple[int, float]:
    """Guidance module: global firing ratio of per-token guidance spikes -> k.

    Runs detached from the graph; k is an integer and carries no gradient.
    """
    xd = ag.Var(x.data)
    f = ag.relu(conv(ctx, xd, f"{p}.sgm1"))
    g = conv(ctx, f, f"{p}.sgm2")
    spikes, _, _ = lif_forward(g.data, ctx.lif)
    return k_from_guidance(spikes)


def k_from_guidance(spikes: np.ndarray) -> tuple[int, float]:
    """``k = floor(N * p)`` clamped to ``[K_MIN, N]`` from guidance spikes [T, B, 1, ...]."""
    t, b = spikes.shape[:2]
    n = int(np.prod(spikes.shape[3:]))
    count = int(np.count_nonzero(spikes))
    p_ratio = count / (t * b * n)
    k = count // (t * b)  # equals floor(N * p) without float rounding
    return min(max(k, K_MIN), n), p_ratio


def topk_from_scores(a: np.ndarray, k: int) -> np.ndarray:
    """Mask of the k largest entries along the last axis; ties go to lower index."""
    n = a.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    order = np.argsort(-a, axis=-1, kind="stable")[..., :k]
    m = np.zeros(a.shape)
    np.put_along_axis(m, order, 1.0, axis=-1)
    return m


def choose_k(mode: str, n: int, ratio: float, predicted: int | None) -> int:
    if mode == "dynamic":
        return predicted
    if mode == "fixed":
        if not 0.0 < ratio <= 1.0:
            raise ValueError(f"fixed Top-K ratio must lie in (0, 1], got {ratio}")
        return min(max(int(math.floor(ratio * n + 1e-12)), K_MIN), n)
    if mode == "dense":
        return n
    raise ValueError(f"unknown SAF mode {mode!r}; expected one of {MODES}")


def saf_layer(ctx: Context, x: ag.Var, p: str, mode: str = "dynamic", ratio: float = DEFAULT_FIXED_RATIO) -> ag.Var:
    """SAF attention on ``x`` [T, B, C, H, W]; returns spikes of the same shape."""
    t, b, c, h, w = x.shape
    n = h * w
    q = _gen(ctx, x, p, "q")
    kk = _gen(ctx, x, p, "k")
    a = ctx.keep(f"{p}.saliency", ag.sum_(q, axis=2, keepdims=True))  # [T, B, 1, H, W]
    if ctx.recorder is not None:
        ctx.recorder.add_layer(f"{p}.saliency", "snn", q.data, (h, w), c, 1, 1)

    k_pred, p_ratio = predict_k(ctx, x, p) if mode == "dynamic" else (None, None)
    if ctx.masks is not None and p in ctx.masks:
        mask, k = ctx.masks[p]
    else:
        k = choose_k(mode, n, ratio, k_pred)
        mask = topk_from_scores(a.data.reshape(t, b, n), k).reshape(t, b, 1, h, w)
        if ctx.masks is not None:
            ctx.masks[p] = (mask, k)
    ctx.info[p] = {"k": k, "n": n, "p": p_ratio}
    ctx.keep(f"{p}.mask", ag.Var(mask))

    gate = gate_sn(ctx, ag.mul(a, mask), f"{p}.gate")
    return hadamard(ctx, gate, kk, f"{p}.out", 1, c)


# -- baseline dense attention --------------------------------------------------------


def init_ssa(params, stats, rng, prefix, c):
    for which in ("q", "k", "v"):
        add_conv(params, rng, f"{prefix}.{which}_linear", c, c, 1)
        add_bn(params, stats, f"{prefix}.bn_{which}", c)


def ssa_conv_params(c: int) -> int:
    return 3 * c * c


def ssa_layer(ctx: Context, x: ag.Var, p: str, scale: float = 0.125) -> ag.Var:
    """Quadratic spiking self-attention, the ablation baseline."""
    t, b, c, h, w = x.shape
    n = h * w

    def tok(v):
        return ag.transpose(ag.reshape(v, (t, b, c, n)), (0, 1, 3, 2))

    q, k, v = (tok(sn(ctx, bn(ctx, conv(ctx, x, f"{p}.{s}_linear"), f"{p}.bn_{s}"), f"{p}.{s}"))
               for s in ("q", "k", "v"))
    attn = ag.matmul(q, ag.transpose(k, (0, 1, 3, 2)))  # [T, B, N, N]
    z = ag.scale(ag.matmul(attn, v), scale)
    if ctx.recorder is not None:
        ctx.recorder.add_layer(f"{p}.qk", "snn", q.data, (n, 1), c, n, 1)
        ctx.recorder.add_layer(f"{p}.av", "snn", attn.data, (n, 1), n, c, 1)
    y = sn(ctx, z, f"{p}.attn")
    return ag.reshape(ag.transpose(y, (0, 1, 3, 2)), (t, b, c, h, w))


# -- public token-layout API -------------------------------------------------------


@dataclass
class SafTrace:
    """Intermediate values of one SAF forward pass (token layout)."""

    q: np.ndarray
    k_spikes: np.ndarray
    saliency: np.ndarray
    mask: np.ndarray
    k: int
    p: float | None
    gate: np.ndarray
    output: np.ndarray
    events: int = 0
    extra: dict = field(default_factory=dict)


def _ctx_for(w: AttentionWeights, lif: LifParams, use_dwconv: bool, training: bool, recorder=None):
    params, stats = w.to_params("attn")
    if not use_dwconv:
        params.pop("attn.q_dw", None)
        params.pop("attn.k_dw", None)
    elif "attn.q_dw" not in params:
        raise ConfigError("use_dwconv requested but the weights carry no depthwise kernels")
    stats = {k: BNStats(v.mean.copy(), v.var.copy(), v.momentum, v.eps) for k, v in stats.items()}
    return Context.from_arrays(params, stats, lif=lif, training=training, update_stats=False,
                               recorder=recorder, capture={})


def gen_qk(x, w: AttentionWeights, use_dwconv: bool = True, lif: LifParams = LifParams(), grid=None,
           training: bool = True):
    """Spike Q and K for token input ``x`` [T, B, N, C]."""
    x = as_spikes(x)
    g = grid_for(x.shape[2], grid) if use_dwconv else (grid_for(x.shape[2], grid) if grid else (x.shape[2], 1))
    ctx = _ctx_for(w, lif, use_dwconv, training)
    xv = ag.Var(tokens_to_maps(x, g))
    q = _gen(ctx, xv, "attn", "q")
    k = _gen(ctx, xv, "attn", "k")
    return maps_to_tokens(q.data), maps_to_tokens(k.data)


def saliency(q) -> np.ndarray:
    """Per-token channel sum of binary Q: ``[T, B, N, C] -> [T, B, N]`` integers."""
    return as_spikes(q).sum(axis=-1).astype(np.int64)


def sgm_predict_k(x, w: AttentionWeights, lif: LifParams = LifParams()) -> int:
    """Dynamic k from input spikes laid out ``[T, B, C, N]``."""
    x = as_spikes(x)
    t, b, c, n = x.shape
    ctx = _ctx_for(w, lif, False, False)
    k, _ = predict_k(ctx, ag.Var(x.reshape(t, b, c, n, 1)), "attn")
    return k


def topk_mask(a, k: int) -> np.ndarray:
    """Binary mask of the k highest scores per ``[t, b]`` slice."""
    return topk_from_scores(np.asarray(a, dtype=np.float64), k).astype(np.int64)


def saf_forward(x, w: AttentionWeights, lif: LifParams = LifParams(), mode: str = "dynamic",
                ratio: float = DEFAULT_FIXED_RATIO, use_dwconv: bool = True, grid=None,
                training: bool = True, recorder=None, trace: bool = False):
    """SAF attention on token spikes ``x`` [T, B, N, C].

    Returns the output spikes, or a :class:`SafTrace` when ``trace`` is set.
    """
    x = as_spikes(x)
    n = x.shape[2]
    g = grid_for(n, grid) if use_dwconv else (grid_for(n, grid) if grid else (n, 1))
    ctx = _ctx_for(w, lif, use_dwconv, training, recorder)
    out = saf_layer(ctx, ag.Var(tokens_to_maps(x, g)), "attn", mode, ratio)
    y = maps_to_tokens(out.data)
    if not trace:
        return y
    cap = ctx.capture
    info = ctx.info["attn"]
    return SafTrace(
        q=maps_to_tokens(cap["attn.q"]),
        k_spikes=maps_to_tokens(cap["attn.k"]),
        saliency=maps_to_tokens(cap["attn.saliency"])[..., 0],
        mask=maps_to_tokens(cap["attn.mask"])[..., 0],
        k=info["k"],
        p=info["p"],
        gate=maps_to_tokens(cap["attn.gate"])[..., 0],
        output=y,
        events=recorder.total_events() if recorder is not None else 0,
    )


def ssa_reference(q, k, v, scale: float = 1.0, lif: LifParams = LifParams(), recorder=None) -> np.ndarray:
    """Dense spiking attention ``SN(sum_j <Q_i, K_j> V_j * scale)`` on [T, B, N, C]."""
    q, k, v = as_spikes(q), as_spikes(k), as_spikes(v)
    attn = q @ np.swapaxes(k, -1, -2)
    z = (attn @ v) * scale
    if recorder is not None:
        n, c = q.shape[-2:]
        recorder.add_layer("ssa.qk", "snn", q, (n, 1), c, n, 1)
        recorder.add_layer("ssa.av", "snn", attn, (n, 1), n, c, 1)
    return lif_forward(z, lif)[0]
