"""Dense and spike array primitives.

Dense tensors are plain float64 ``numpy`` arrays; spike tensors are arrays
whose every element is exactly 0 or 1. Feature maps use ``[B, C, H, W]``
layout; sequence tensors put time on the outermost axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Input dimensions do not match what the operation requires."""


class ConfigError(ValueError):
    """An operation was configured with incompatible sizes."""


def is_spike(x: np.ndarray) -> bool:
    x = np.asarray(x)
    return bool(np.all((x == 0) | (x == 1)))


def as_spikes(x) -> np.ndarray:
    """Validate ``x`` as a spike tensor and return it as float64."""
    arr = np.asarray(x, dtype=np.float64)
    if not is_spike(arr):
        raise ValueError("spike tensor must contain only 0 and 1")
    return arr


def spike_count(x: np.ndarray) -> int:
    return int(np.count_nonzero(x))


def check_finite(x: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    groups: int = 1
    bias: bool = False

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel, self.stride, self.groups) < 1:
            raise ConfigError(f"invalid conv spec {self}")
        if self.padding < 0:
            raise ConfigError("padding must be non-negative")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(
                f"channels ({self.in_channels}, {self.out_channels}) not divisible by groups={self.groups}"
            )

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel, self.kernel)

    @property
    def param_count(self) -> int:
        n = self.kernel**2 * (self.in_channels // self.groups) * self.out_channels
        return n + (self.out_channels if self.bias else 0)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        return (
            (h + 2 * self.padding - self.kernel) // self.stride + 1,
            (w + 2 * self.padding - self.kernel) // self.stride + 1,
        )


# -- convolution core (shared with the autograd ops) --------------------------


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # [B, C, H', W', k, k] view, no copy
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int, groups: int) -> np.ndarray:
    b, c, h, wd = x.shape
    o, cg, k, _ = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if k == 1 and groups == 1:
        xs = x[:, :, ::stride, ::stride]
        return np.tensordot(w[:, :, 0, 0], xs, axes=([1], [1])).transpose(1, 0, 2, 3)
    win = _windows(x, k, stride)
    if groups == 1:
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
        return out.transpose(0, 3, 1, 2)
    if groups == c and o == c:
        return np.einsum("bchwij,cij->bchw", win, w[:, 0])
    og = o // groups
    outs = []
    for g in range(groups):
        wg = w[g * og:(g + 1) * og]
        wing = win[:, g * cg:(g + 1) * cg]
        outs.append(np.tensordot(wing, wg, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2))
    return np.concatenate(outs, axis=1)


def conv_backward(
    gout: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int, padding: int, groups: int
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of :func:`conv_forward` w.r.t. input and weight."""
    b, c, h, wd = x.shape
    o, cg, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    ho, wo = gout.shape[2], gout.shape[3]
    dxp = np.zeros_like(xp)
    if k == 1 and groups == 1:
        xs = xp[:, :, ::stride, ::stride][:, :, :ho, :wo]
        dw = np.tensordot(gout, xs, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
        dxp[:, :, ::stride, ::stride][:, :, :ho, :wo] += np.tensordot(w[:, :, 0, 0], gout, axes=([0], [1])).transpose(1, 0, 2, 3)
    elif groups == c and o == c:
        win = _windows(xp, k, stride)
        dw = np.einsum("bchw,bchwij->cij", gout, win)[:, None]
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gout * w[None, :, 0, i, j, None, None]
    else:
        win = _windows(xp, k, stride)
        og = o // groups
        dw = np.empty_like(w)
        for g in range(groups):
            go = gout[:, g * og:(g + 1) * og]
            wg = w[g * og:(g + 1) * og]
            dw[g * og:(g + 1) * og] = np.tensordot(go, win[:, g * cg:(g + 1) * cg], axes=([0, 2, 3], [0, 2, 3]))
            dwin = np.tensordot(go, wg, axes=([1], [0]))  # [B, H', W', cg, k, k]
            for i in range(k):
                for j in range(k):
                    dxp[:, g * cg:(g + 1) * cg, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                        dwin[..., i, j].transpose(0, 3, 1, 2)
                    )
    if padding:
        dxp = dxp[:, :, padding:padding + h, padding:padding + wd]
    return dxp, dw


def _check_conv(x: np.ndarray, spec: ConvSpec, weights: np.ndarray) -> None:
    if x.ndim != 4:
        raise ShapeError(f"expected [B, C, H, W] input, got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if tuple(weights.shape) != spec.weight_shape:
        raise ShapeError(f"weight shape {tuple(weights.shape)} != expected {spec.weight_shape}")
    hp, wp = x.shape[2] + 2 * spec.padding, x.shape[3] + 2 * spec.padding
    if hp < spec.kernel or wp < spec.kernel:
        raise ShapeError(f"padded input {hp}x{wp} smaller than kernel {spec.kernel}")


def conv2d(x, spec: ConvSpec, weights, bias=None) -> np.ndarray:
    """Cross-correlation of ``x`` [B, C_in, H, W] with ``weights``."""
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    _check_conv(x, spec, weights)
    out = conv_forward(x, weights, spec.stride, spec.padding, spec.groups)
    if spec.bias:
        if bias is None:
            raise ShapeError("spec declares a bias but none was given")
        out = out + np.asarray(bias, dtype=np.float64)[None, :, None, None]
    return out


def depthwise_conv2d(x, kernel_size: int, weights) -> np.ndarray:
    """Per-channel ``k x k`` convolution, stride 1, size-preserving padding."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"expected [B, C, H, W] input, got shape {x.shape}")
    c = x.shape[1]
    spec = ConvSpec(c, c, kernel_size, stride=1, padding=kernel_size // 2, groups=c)
    return conv2d(x, spec, weights)


def partial_conv(x, weights) -> np.ndarray:
    """3x3 convolution over the first C/4 channels; the rest pass through."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"expected [B, C, H, W] input, got shape {x.shape}")
    c = x.shape[1]
    if c % 4 or c == 0:
        raise ConfigError(f"partial conv needs C divisible by 4, got C={c}")
    cp = c // 4
    spec = ConvSpec(cp, cp, 3, stride=1, padding=1)
    head = conv2d(x[:, :cp], spec, weights)
    return np.concatenate([head, x[:, cp:]], axis=1)


def partial_conv_params(c: int) -> int:
    if c % 4 or c <= 0:
        raise ConfigError(f"partial conv needs C divisible by 4, got C={c}")
    return 9 * (c // 4) ** 2


# -- normalization ------------------------------------------------------------


@dataclass
class BNStats:
    """Running statistics for one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, channels: int) -> "BNStats":
        return cls(np.zeros(channels), np.ones(channels))


def _bn_axes(x: np.ndarray) -> tuple[int, ...]:
    return tuple(i for i in range(x.ndim) if i != 1)


def batch_norm(x, stats: BNStats, gamma, beta, mode: str = "train", update: bool = True) -> np.ndarray:
    """Batch normalization over channel axis 1.

    In ``train`` mode batch statistics are used and, if ``update`` is set, the
    running statistics are moved toward them by exponential averaging.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[1] != len(stats.mean):
        raise ShapeError(f"batch norm over {len(stats.mean)} channels got shape {x.shape}")
    shape = [1] * x.ndim
    shape[1] = -1
    g = np.asarray(gamma, dtype=np.float64).reshape(shape)
    bt = np.asarray(beta, dtype=np.float64).reshape(shape)
    if mode == "train":
        axes = _bn_axes(x)
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update:
            n = x.size // x.shape[1]
            unbiased = var * n / (n - 1) if n > 1 else var
            stats.mean = (1 - stats.momentum) * stats.mean + stats.momentum * mu
            stats.var = (1 - stats.momentum) * stats.var + stats.momentum * unbiased
    elif mode == "infer":
        mu, var = stats.mean, stats.var
    else:
        raise ValueError(f"unknown batch-norm mode {mode!r}")
    xhat = (x - mu.reshape(shape)) / np.sqrt(var.reshape(shape) + stats.eps)
    return g * xhat + bt


# -- pooling -------------------------------------------------------------------


def pool_output_size(n: int, window: int, stride: int) -> int:
    # ceil mode; the tail window is padded with -inf
    return max(1, -(-(n - window) // stride) + 1) if n >= window else 1


def _pool_pad(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    h, w = x.shape[-2:]
    ho, wo = pool_output_size(h, window, stride), pool_output_size(w, window, stride)
    ph = (ho - 1) * stride + window - h
    pw = (wo - 1) * stride + window - w
    if ph or pw:
        pad = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
        x = np.pad(x, pad, constant_values=-np.inf)
    return x


def max_pool(x, window: int = 2, stride: int = 2) -> np.ndarray:
    """Max pooling over the last two axes.

    Sizes that do not tile evenly get ``-inf`` padding on the bottom/right, so
    spike inputs stay in {0, 1}.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise ShapeError("max_pool needs at least 2 dims")
    if window < 1 or stride < 1 or stride > window:
        raise ConfigError(f"need 1 <= stride <= window, got window={window}, stride={stride}")
    h, w = x.shape[-2:]
    if h < 1 or w < 1:
        raise ShapeError(f"cannot pool an empty {h}x{w} map")
    xp = _pool_pad(x, window, stride)
    win = sliding_window_view(xp, (window, window), axis=(-2, -1))[..., ::stride, ::stride, :, :]
    return win.max(axis=(-2, -1))


# -- spectra -------------------------------------------------------------------


def fft2_magnitude(x) -> np.ndarray:
    """Centered magnitude of the 2-D DFT of an ``[H, W]`` array."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or min(x.shape) < 1:
        raise ShapeError(f"expected a non-empty [H, W] array, got shape {x.shape}")
    return np.abs(np.fft.fftshift(np.fft.fft2(x)))
