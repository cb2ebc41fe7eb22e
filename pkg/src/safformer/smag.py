"""Multi-scale gated spiking feedforward network and its SMLP baseline.

SMAG: partial 3x3 conv on the first C/4 channels, pointwise expansion to 4C
(BN + LIF), split into (C, C, 2C). The two C-wide slices pass through
depthwise convs of different sizes (BN + LIF) and the concatenated spikes
gate the 2C-wide main path. A pointwise 2C -> C projection (BN + LIF) closes
the block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .layers import Context, add_bn, add_conv, bn, conv, hadamard, sn
from .neuron import LifParams
from .tensor import BNStats, ConfigError, as_spikes

KERNEL_PAIRS = {"3+5": (3, 5), "5+7": (5, 7), "3+7": (3, 7)}


@dataclass(frozen=True)
class SmagToggles:
    no_pconv: bool = False
    no_multiscale: bool = False
    kernels: tuple[int, int] = (3, 7)

    @property
    def branch_kernels(self) -> tuple[int, int]:
        return (3, 3) if self.no_multiscale else tuple(self.kernels)

    def __post_init__(self):
        if len(self.kernels) != 2 or any(k < 1 or k % 2 == 0 for k in self.kernels):
            raise ConfigError(f"gate kernels must be two odd sizes, got {self.kernels}")


def _check_channels(c: int) -> None:
    if c <= 0 or c % 4:
        raise ConfigError(f"SMAG needs a positive channel count divisible by 4, got C={c}")


def smag_param_count(c: int, toggles: SmagToggles = SmagToggles()) -> int:
    """Conv weight count of one SMAG block (BN parameters excluded)."""
    _check_channels(c)
    k1, k2 = toggles.branch_kernels
    pconv = 0 if toggles.no_pconv else 9 * (c // 4) ** 2
    return pconv + 4 * c * c + (k1 * k1 + k2 * k2) * c + 2 * c * c


def smag_closed_form(c: int) -> int:
    """``6.5625 C^2 + 58 C`` evaluated exactly (C divisible by 4)."""
    _check_channels(c)
    return 105 * c * c // 16 + 58 * c


def smlp_param_count(c: int) -> int:
    if c <= 0:
        raise ConfigError(f"channel count must be positive, got C={c}")
    return 8 * c * c


def smag_reduction(c: int) -> float:
    """Fractional parameter saving of SMAG over SMLP at width C."""
    return 1.0 - smag_closed_form(c) / smlp_param_count(c)


# -- construction ----------------------------------------------------------------


def init_smag(params, stats, rng, prefix, c, toggles: SmagToggles = SmagToggles()):
    _check_channels(c)
    p = prefix
    k1, k2 = toggles.branch_kernels
    if not toggles.no_pconv:
        add_conv(params, rng, f"{p}.pconv", c // 4, c // 4, 3)
    add_conv(params, rng, f"{p}.expand", c, 4 * c, 1)
    add_bn(params, stats, f"{p}.bn_expand", 4 * c)
    add_conv(params, rng, f"{p}.dw1", c, c, k1, groups=c)
    add_bn(params, stats, f"{p}.bn_dw1", c)
    add_conv(params, rng, f"{p}.dw2", c, c, k2, groups=c)
    add_bn(params, stats, f"{p}.bn_dw2", c)
    add_conv(params, rng, f"{p}.project", 2 * c, c, 1)
    add_bn(params, stats, f"{p}.bn_project", c)


def init_smlp(params, stats, rng, prefix, c):
    add_conv(params, rng, f"{prefix}.fc1", c, 4 * c, 1)
    add_bn(params, stats, f"{prefix}.bn_fc1", 4 * c)
    add_conv(params, rng, f"{prefix}.fc2", 4 * c, c, 1)
    add_bn(params, stats, f"{prefix}.bn_fc2", c)


CONV_SUFFIXES = ("pconv", "expand", "dw1", "dw2", "project", "fc1", "fc2")


def enumerate_conv_weights(params: dict, prefix: str) -> int:
    """Count conv weight elements under ``prefix`` by walking the arrays."""
    total = 0
    for name, arr in params.items():
        head, _, tail = name.rpartition(".")
        if head == prefix and tail in CONV_SUFFIXES:
            total += arr.size
    return total


# -- forward ---------------------------------------------------------------------


def smag_layer(ctx: Context, x: ag.Var, p: str) -> ag.Var:
    """SMAG on ``x`` [T, B, C, H, W]; toggles are implied by which weights exist."""
    c = x.shape[2]
    _check_channels(c)
    if f"{p}.pconv" in ctx.params:
        cp = c // 4
        head = conv(ctx, ag.slice_channels(x, 0, cp), f"{p}.pconv", padding=1)
        x = ag.concat([head, ag.slice_channels(x, cp, c)], axis=2)
    xp = sn(ctx, bn(ctx, conv(ctx, x, f"{p}.expand"), f"{p}.bn_expand"), f"{p}.x_prime")
    x1 = ag.slice_channels(xp, 0, c)
    x2 = ag.slice_channels(xp, c, 2 * c)
    x3 = ag.slice_channels(xp, 2 * c, 4 * c)
    gates = []
    for i, xi in ((1, x1), (2, x2)):
        k = ctx.params[f"{p}.dw{i}"].shape[-1]
        y = conv(ctx, xi, f"{p}.dw{i}", padding=k // 2, groups=c)
        gates.append(sn(ctx, bn(ctx, y, f"{p}.bn_dw{i}"), f"{p}.g{i}"))
    gated = hadamard(ctx, ag.concat(gates, axis=2), x3, f"{p}.gated", 1, 2 * c)
    return sn(ctx, bn(ctx, conv(ctx, gated, f"{p}.project"), f"{p}.bn_project"), f"{p}.out")


def smlp_layer(ctx: Context, x: ag.Var, p: str) -> ag.Var:
    h = sn(ctx, bn(ctx, conv(ctx, x, f"{p}.fc1"), f"{p}.bn_fc1"), f"{p}.hidden")
    return sn(ctx, bn(ctx, conv(ctx, h, f"{p}.fc2"), f"{p}.bn_fc2"), f"{p}.out")


# -- public API ------------------------------------------------------------------


@dataclass
class FFNWeights:
    """Named conv kernels and BN parameters of one SMAG or SMLP block."""

    params: dict[str, np.ndarray]
    stats: dict[str, BNStats] = field(default_factory=dict)
    prefix: str = "ffn"

    def __getattr__(self, item):
        aliases = {"pconv_w": "pconv", "expand_w": "expand", "dw3_w": "dw1", "dw7_w": "dw2",
                   "project_w": "project", "fc1_w": "fc1", "fc2_w": "fc2"}
        if item in aliases:
            try:
                return self.params[f"{self.prefix}.{aliases[item]}"]
            except KeyError:
                return None
        raise AttributeError(item)

    def conv_param_count(self) -> int:
        return enumerate_conv_weights(self.params, self.prefix)

    def context(self, lif: LifParams, training: bool, **kw) -> Context:
        stats = {k: BNStats(v.mean.copy(), v.var.copy(), v.momentum, v.eps) for k, v in self.stats.items()}
        return Context.from_arrays(self.params, stats, lif=lif, training=training, update_stats=False, **kw)


class SmagWeights(FFNWeights):
    @classmethod
    def random(cls, c: int, rng: np.random.Generator, toggles: SmagToggles = SmagToggles()) -> "SmagWeights":
        params, stats = {}, {}
        init_smag(params, stats, rng, "ffn", c, toggles)
        return cls(params, stats)


class SmlpWeights(FFNWeights):
    @classmethod
    def random(cls, c: int, rng: np.random.Generator) -> "SmlpWeights":
        params, stats = {}, {}
        init_smlp(params, stats, rng, "ffn", c)
        return cls(params, stats)


def smag_forward(x, w: SmagWeights, lif: LifParams = LifParams(), training: bool = True,
                 capture: dict | None = None) -> np.ndarray:
    """SMAG on spikes ``x`` [T, B, C, H, W]. Toggles follow from ``w``'s kernels."""
    x = as_spikes(x)
    ctx = w.context(lif, training, capture=capture)
    return smag_layer(ctx, ag.Var(x), w.prefix).data


def smlp_forward(x, w: SmlpWeights, lif: LifParams = LifParams(), training: bool = True) -> np.ndarray:
    x = as_spikes(x)
    ctx = w.context(lif, training)
    return smlp_layer(ctx, ag.Var(x), w.prefix).data
