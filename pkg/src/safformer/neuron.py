"""Leaky integrate-and-fire dynamics and the arctan surrogate."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LifParams:
    v_threshold: float = 1.0
    leak: float = 0.5
    v_reset: float = 0.0
    reset_mode: str = "hard"
    surrogate_width: float = 2.0
    # backward treats the reset term as a constant
    detach_reset: bool = True

    def __post_init__(self):
        if not self.v_threshold > 0:
            raise ValueError(f"v_threshold must be positive, got {self.v_threshold}")
        if not 0.0 <= self.leak <= 1.0:
            raise ValueError(f"leak must lie in [0, 1], got {self.leak}")
        if self.reset_mode not in ("hard", "soft"):
            raise ValueError(f"reset_mode must be 'hard' or 'soft', got {self.reset_mode!r}")
        if not self.surrogate_width > 0:
            raise ValueError("surrogate_width must be positive")


@dataclass
class LifState:
    """Post-fire membrane potential ``h`` for every neuron of a layer."""

    h: np.ndarray

    @classmethod
    def zeros(cls, shape) -> "LifState":
        return cls(np.zeros(shape))


def surrogate_grad(u, params: LifParams, temperature: float = 1.0):
    """dS/dU of the arctan soft step; peaks at ``alpha / 2`` on the threshold."""
    a = params.surrogate_width
    z = math.pi * a * (np.asarray(u, dtype=np.float64) - params.v_threshold) / (2.0 * temperature)
    out = a / (2.0 * temperature * (1.0 + z * z))
    return float(out) if out.ndim == 0 else out


def soft_step(u, params: LifParams, temperature: float = 1.0):
    a = params.surrogate_width
    z = math.pi * a * (np.asarray(u, dtype=np.float64) - params.v_threshold) / (2.0 * temperature)
    return 0.5 + np.arctan(z) / math.pi


def _validate(x_seq) -> np.ndarray:
    x = np.asarray(x_seq, dtype=np.float64)
    if x.ndim < 1 or x.shape[0] < 1:
        raise ValueError("input sequence needs a leading time axis with T >= 1")
    if not np.all(np.isfinite(x)):
        raise ValueError("input sequence contains non-finite values")
    return x


def _reset(u, s, params: LifParams):
    if params.reset_mode == "hard":
        return u * (1.0 - s) + params.v_reset * s
    return u - params.v_threshold * s


def lif_forward(x_seq, params: LifParams = LifParams(), state: LifState | None = None):
    """Integrate ``x_seq`` [T, ...] through LIF neurons.

    Returns ``(spikes, final_state, u_trace)``. Spikes fire where
    ``U >= v_threshold``.
    """
    x = _validate(x_seq)
    h = np.zeros(x.shape[1:]) if state is None else np.array(state.h, dtype=np.float64)
    spikes = np.empty_like(x)
    u_trace = np.empty_like(x)
    for t in range(x.shape[0]):
        u = params.leak * h + x[t]
        s = (u >= params.v_threshold).astype(np.float64)
        h = _reset(u, s, params)
        spikes[t] = s
        u_trace[t] = u
    return spikes, LifState(h), u_trace


def relaxed_forward(x_seq, params: LifParams = LifParams(), temperature: float = 1.0):
    """LIF recurrence with the Heaviside replaced by the smooth arctan step."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    return relaxed_trace(x_seq, params, temperature)[0]


def relaxed_trace(x_seq, params: LifParams, temperature: float = 1.0):
    """Like :func:`relaxed_forward` but also returns the membrane trace."""
    x = _validate(x_seq)
    h = np.zeros(x.shape[1:])
    out = np.empty_like(x)
    u_trace = np.empty_like(x)
    for t in range(x.shape[0]):
        u = params.leak * h + x[t]
        s = soft_step(u, params, temperature)
        h = _reset(u, s, params)
        out[t] = s
        u_trace[t] = u
    return out, u_trace


def lif_backward(g_spikes, spikes, u_trace, params: LifParams, temperature: float | None = None,
                 exact_reset: bool | None = None):
    """Backpropagate through time for a LIF layer.

    ``temperature`` is None for the spiking path (surrogate at width alpha) and
    the relaxation temperature otherwise. With ``exact_reset`` false the reset
    term is held constant, which is the training convention; grad checks on
    the relaxed path need the exact derivative.
    """
    temp = 1.0 if temperature is None else temperature
    if exact_reset is None:
        exact_reset = not params.detach_reset
    ds = surrogate_grad(u_trace, params, temp)
    gx = np.empty_like(u_trace)
    g_h = np.zeros(u_trace.shape[1:])
    for t in range(u_trace.shape[0] - 1, -1, -1):
        s, u = spikes[t], u_trace[t]
        if params.reset_mode == "hard":
            dh_du = 1.0 - s
            if exact_reset:
                dh_du = dh_du + (params.v_reset - u) * ds[t]
        else:
            dh_du = 1.0 - params.v_threshold * ds[t] if exact_reset else 1.0
        g_u = g_spikes[t] * ds[t] + g_h * dh_du
        gx[t] = g_u
        g_h = params.leak * g_u
    return gx
