"""Verification instruments: information-flow oracles, parameter audit, spectra."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig, build_weights
from .neuron import LifParams, lif_forward
from .saf import AttentionWeights, saf_forward, ssa_reference
from .smag import CONV_SUFFIXES, SmagToggles, init_smag, init_smlp, smag_closed_form, smag_param_count, smlp_param_count
from .tensor import ShapeError, as_spikes, fft2_magnitude

# -- information-flow graphs ---------------------------------------------------------


@dataclass
class FlowGraph:
    """Weighted directed token graph; an edge ``(j, i)`` carries information j -> i."""

    vertices: list[int]
    edges: list[tuple[int, int]]
    weights: dict[tuple[int, int], float] = field(default_factory=dict)

    def inbound(self, i: int) -> list[int]:
        return [j for (j, dst) in self.edges if dst == i]

    @property
    def is_complete(self) -> bool:
        n = len(self.vertices)
        return len(set(self.edges)) == n * n

    @property
    def self_loops_only(self) -> bool:
        return all(j == i for j, i in self.edges)


def complete_graph(q: np.ndarray, k: np.ndarray) -> FlowGraph:
    """Dense graph of one timestep with ``w_ij = <Q_i, K_j>`` (q, k: [N, C])."""
    n, c = q.shape
    edges, weights = [], {}
    for i in range(n):
        for j in range(n):
            w = 0.0
            for ch in range(c):
                w += q[i, ch] * k[j, ch]
            edges.append((j, i))
            weights[(j, i)] = w
    return FlowGraph(list(range(n)), edges, weights)


def self_loop_graph(active: list[int], saliency: np.ndarray) -> FlowGraph:
    return FlowGraph(list(range(len(saliency))), [(i, i) for i in active],
                     {(i, i): float(saliency[i]) for i in active})


def _as_tbnc(x: np.ndarray) -> np.ndarray:
    x = as_spikes(x)
    if x.ndim == 2:
        return x[None, None]
    if x.ndim == 3:
        return x[:, None]
    if x.ndim == 4:
        return x
    raise ShapeError(f"expected [N, C], [T, N, C] or [T, B, N, C], got {x.shape}")


@dataclass
class PropResult:
    passed: bool
    witness: dict | None = None
    checks: dict = field(default_factory=dict)


def verify_prop1(q, k, v, scale: float = 1.0, lif: LifParams = LifParams()) -> PropResult:
    """Dense attention equals aggregation over the complete token graph.

    The graph side sums ``w_ij * V_j`` over every inbound edge with explicit
    loops; both sides then pass through the same LIF over time.
    """
    q, k, v = _as_tbnc(q), _as_tbnc(k), _as_tbnc(v)
    t_len, b_len, n, c = q.shape
    z = np.zeros((t_len, b_len, n, c))
    for t in range(t_len):
        for b in range(b_len):
            g = complete_graph(q[t, b], k[t, b])
            if not g.is_complete:
                return PropResult(False, {"reason": "graph not complete", "t": t, "b": b})
            for i in g.vertices:
                for j in g.inbound(i):
                    z[t, b, i] += g.weights[(j, i)] * v[t, b, j]
    y_graph = lif_forward(z * scale, lif)[0]
    y_mod = ssa_reference(q, k, v, scale, lif)
    bad = np.argwhere(y_graph != y_mod)
    if len(bad):
        t, b, i, ch = (int(s) for s in bad[0])
        return PropResult(False, {"t": t, "b": b, "i": i, "channel": ch,
                                  "graph": float(y_graph[t, b, i, ch]), "module": float(y_mod[t, b, i, ch])})
    return PropResult(True)


def topk_oracle(scores, k: int) -> list[int]:
    """Indices of the k largest scores; equal scores prefer the lower index."""
    return sorted(sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:k])


def verify_prop2(x, w: AttentionWeights, lif: LifParams = LifParams(), mode: str = "dynamic",
                 ratio: float = 0.6, grid=None, use_dwconv: bool = True) -> PropResult:
    """SAF output is a self-loop subgraph over exactly k active tokens.

    Checks (a) the mask selects k tokens and they are the Top-K of the
    saliency, (b) every output equals ``Theta(M_i * sum_c Q_ci) * K_i``
    recomputed element by element, and (c) inactive tokens output zero.
    """
    x = _as_tbnc(x)
    tr = saf_forward(x, w, lif, mode, ratio, use_dwconv=use_dwconv, grid=grid, trace=True)
    t_len, b_len, n, c = tr.q.shape
    checks = {"active_count": True, "closed_form": True, "inactive_zero": True}
    for t in range(t_len):
        for b in range(b_len):
            q, kk, y = tr.q[t, b], tr.k_spikes[t, b], tr.output[t, b]
            sal = [sum(q[i, ch] for ch in range(c)) for i in range(n)]
            active = [i for i in range(n) if tr.mask[t, b, i] == 1.0]
            graph = self_loop_graph(active, np.asarray(sal))
            if len(graph.edges) != tr.k or active != topk_oracle(sal, tr.k):
                checks["active_count"] = False
                return PropResult(False, {"check": "active_count", "t": t, "b": b, "k": tr.k,
                                          "active": active, "expected": topk_oracle(sal, tr.k)}, checks)
            for i in range(n):
                m = 1.0 if i in active else 0.0
                fire = 1.0 if m * sal[i] >= lif.v_threshold else 0.0
                for ch in range(c):
                    expect = fire * kk[i, ch]
                    if y[i, ch] != expect:
                        checks["closed_form"] = False
                        return PropResult(False, {"check": "closed_form", "t": t, "b": b, "i": i, "channel": ch,
                                                  "closed_form": expect, "module": float(y[i, ch])}, checks)
                    if m == 0.0 and y[i, ch] != 0.0:
                        checks["inactive_zero"] = False
                        return PropResult(False, {"check": "inactive_zero", "t": t, "b": b, "i": i}, checks)
    return PropResult(True, None, checks)


def random_binary(rng: np.random.Generator, shape, density: float = 0.5) -> np.ndarray:
    return (rng.random(shape) < density).astype(np.float64)


def _grid_for_tokens(n: int) -> tuple[int, int]:
    r = math.isqrt(n)
    while n % r:
        r -= 1
    return r, n // r


def run_prop_suite(seeds: int = 100, n_tokens: int = 8, channels: int = 4, timesteps: int = 1,
                   prop1_tokens: int = 4, prop1_channels: int = 3) -> dict:
    """Random-instance sweeps of both propositions; one instance per seed."""
    out = {}
    fails1, fails2 = [], []
    for s in range(seeds):
        rng = np.random.default_rng(s)
        shape = (timesteps, 1, prop1_tokens, prop1_channels)
        r = verify_prop1(random_binary(rng, shape), random_binary(rng, shape), random_binary(rng, shape))
        if not r.passed:
            fails1.append({"seed": s, **r.witness})
    out["prop1"] = {"prop": 1, "seeds": seeds, "passes": seeds - len(fails1), "failures": fails1}
    grid = _grid_for_tokens(n_tokens)
    for s in range(seeds):
        rng = np.random.default_rng(10_000 + s)
        w = AttentionWeights.random(channels, rng)
        x = random_binary(rng, (timesteps, 1, n_tokens, channels))
        r = verify_prop2(x, w, grid=grid)
        if not r.passed:
            fails2.append({"seed": s, **r.witness})
    out["prop2"] = {"prop": 2, "seeds": seeds, "passes": seeds - len(fails2), "failures": fails2}
    return out


# -- parameter audit ----------------------------------------------------------------------


class AuditError(AssertionError):
    pass


@dataclass
class AuditRow:
    block: str
    channels: int
    kind: str
    closed_form: int
    enumerated: int

    @property
    def match(self) -> bool:
        return self.closed_form == self.enumerated


@dataclass
class AuditResult:
    rows: list[AuditRow]
    stage3_channels: int
    smag: int
    smlp: int

    @property
    def reduction(self) -> float:
        return 1.0 - self.smag / self.smlp

    @property
    def reduction_pct(self) -> str:
        return f"{100 * self.reduction:.2f}%"

    def to_dict(self) -> dict:
        return {
            "rows": [{"block": r.block, "C": r.channels, "kind": r.kind, "closed_form": r.closed_form,
                      "enumerated": r.enumerated, "match": r.match} for r in self.rows],
            "stage3_channels": self.stage3_channels, "smag": self.smag, "smlp": self.smlp,
            "reduction": self.reduction, "reduction_pct": self.reduction_pct,
        }

    def to_text(self) -> str:
        lines = [f"{'block':<14} {'C':>5} {'kind':<5} {'closed form':>12} {'enumerated':>12}  ok"]
        for r in self.rows:
            lines.append(f"{r.block:<14} {r.channels:>5} {r.kind:<5} {r.closed_form:>12,} {r.enumerated:>12,}  "
                         f"{'yes' if r.match else 'NO'}")
        lines.append(f"stage-3 width C={self.stage3_channels}: SMAG {self.smag:,} vs SMLP {self.smlp:,}  "
                     f"reduction {self.reduction_pct}")
        return "\n".join(lines)


def _enumerate(params: dict, prefix: str) -> int:
    return sum(a.size for n, a in params.items()
               if n.rpartition(".")[0] == prefix and n.rpartition(".")[2] in CONV_SUFFIXES)


def enumerate_ffn(c: int, kind: str = "smag", toggles: SmagToggles = SmagToggles()) -> int:
    """Conv weight elements of a freshly built SMAG/SMLP block at width C."""
    params, stats = {}, {}
    rng = np.random.default_rng(0)
    if kind == "smag":
        init_smag(params, stats, rng, "ffn", c, toggles)
    else:
        init_smlp(params, stats, rng, "ffn", c)
    return _enumerate(params, "ffn")


def audit_params(config: ModelConfig) -> AuditResult:
    """Closed-form vs enumerated FFN counts per block, plus the stage-3 reduction.

    Raises :class:`AuditError` naming the first block whose counts disagree.
    """
    config.validate()
    params, _ = build_weights(config)
    rows = []
    for s, (c, nblocks) in enumerate(zip(config.stage_channels, config.stage_blocks), start=1):
        for i in range(nblocks):
            p = f"s{s}.b{i}.ffn"
            closed = smag_param_count(c, config.toggles) if config.ffn == "smag" else smlp_param_count(c)
            row = AuditRow(p, c, config.ffn, closed, _enumerate(params, p))
            rows.append(row)
            if not row.match:
                raise AuditError(f"{p}: closed form {row.closed_form} != enumerated {row.enumerated}")
    c3 = config.stage_channels[2]
    smag, smlp = smag_closed_form(c3), smlp_param_count(c3)
    if enumerate_ffn(c3, "smag") != smag or enumerate_ffn(c3, "smlp") != smlp:
        raise AuditError(f"stage-3 reference blocks at C={c3} disagree with their closed forms")
    return AuditResult(rows, c3, smag, smlp)


# -- spectra ---------------------------------------------------------------------------------


@dataclass
class SpectrumResult:
    magnitude: np.ndarray  # channel-averaged centered |F|, [H, W]
    hf_ratio: float
    spectral_energy: float  # sum over channels and frequencies of |F|^2
    spatial_energy: float  # H * W * sum of x^2, equal to the above by Parseval

    def to_csv(self) -> str:
        h, w = self.magnitude.shape
        rows = ["H,W", f"{h},{w}"]
        rows += [",".join(repr(float(v)) for v in row) for row in self.magnitude]
        return "\n".join(rows) + "\n"


def low_frequency_disk(h: int, w: int) -> np.ndarray:
    """Boolean mask of the centered disk of radius H/4 (fftshift layout)."""
    yy, xx = np.mgrid[:h, :w]
    return (yy - h // 2) ** 2 + (xx - w // 2) ** 2 <= (h / 4) ** 2


def spectrum(feature_map) -> SpectrumResult:
    """Channel-averaged magnitude spectrum and high-frequency energy share of ``[C, H, W]``."""
    x = np.asarray(feature_map, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != x.shape[2]:
        raise ShapeError(f"expected a square [C, H, W] map, got {x.shape}")
    mags = np.stack([fft2_magnitude(ch) for ch in x])
    power = np.sum(mags**2, axis=0)
    total = float(np.sum(power))
    low = float(np.sum(power[low_frequency_disk(*power.shape)]))
    hf = 0.0 if total == 0.0 else (total - low) / total
    spatial = float(x.shape[1] * x.shape[2] * np.sum(x**2))
    return SpectrumResult(mags.mean(axis=0), min(1.0, max(0.0, hf)), total, spatial)
