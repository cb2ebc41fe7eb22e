"""Operation-count energy model for spiking networks.

The first encoder convolution is charged as multiply-accumulates on analog
input; every other synaptic layer is charged as accumulates scaled by the
firing rate of its input and by ``T * D``. Batch norm is free (it folds into
the preceding convolution at deployment).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

E_MAC_PJ = 4.6
E_AC_PJ = 0.9
PJ_PER_MJ = 1e9


@dataclass
class LayerProfile:
    layer_id: str
    kind: str  # "ann-encoder" or "snn"
    O: float
    C_in: int
    C_out: int
    k: int
    T: int = 1
    D: int = 1
    fr: float = 1.0

    def __post_init__(self):
        if self.kind not in ("ann-encoder", "snn"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if not 0.0 <= self.fr <= 1.0:
            raise ValueError(f"{self.layer_id}: firing rate {self.fr} outside [0, 1]")
        if min(self.O, self.C_in, self.C_out, self.k, self.T, self.D) <= 0:
            raise ValueError(f"{self.layer_id}: all sizes must be positive")

    @property
    def synaptic_ops(self) -> float:
        return self.O**2 * self.C_in * self.C_out * self.k**2


def layer_energy(p: LayerProfile) -> float:
    """Energy of one layer in pJ."""
    if p.kind == "ann-encoder":
        return p.synaptic_ops * E_MAC_PJ
    return (p.T * p.D) * p.fr * p.synaptic_ops * E_AC_PJ


@dataclass
class _Geometry:
    kind: str
    area: int
    C_in: int
    C_out: int
    k: int


class FiringRecorder:
    """Accumulates per-layer input spike counts and layer geometry.

    Counts from different shards merge with :meth:`merge`; the reduction is a
    plain sum, so merge order does not matter.
    """

    def __init__(self):
        self.geometry: dict[str, _Geometry] = {}
        self.nonzero: dict[str, int] = {}
        self.elements: dict[str, int] = {}
        # dense per-sample, per-timestep accumulation events of the last call
        self.events: dict[str, int] = {}

    def add_layer(self, layer_id, kind, x_in, out_hw, c_in, c_out, k):
        area = int(out_hw[0]) * int(out_hw[1])
        self.geometry[layer_id] = _Geometry(kind, area, int(c_in), int(c_out), int(k))
        x_in = np.asarray(x_in)
        self.nonzero[layer_id] = self.nonzero.get(layer_id, 0) + int(np.count_nonzero(x_in))
        self.elements[layer_id] = self.elements.get(layer_id, 0) + int(x_in.size)
        self.events[layer_id] = area * int(c_in) * int(c_out) * int(k) ** 2

    def merge(self, other: "FiringRecorder") -> "FiringRecorder":
        out = FiringRecorder()
        out.geometry = {**self.geometry, **other.geometry}
        out.events = {**self.events, **other.events}
        for key in set(self.nonzero) | set(other.nonzero):
            out.nonzero[key] = self.nonzero.get(key, 0) + other.nonzero.get(key, 0)
            out.elements[key] = self.elements.get(key, 0) + other.elements.get(key, 0)
        return out

    def firing_rates(self) -> dict[str, float]:
        return {k: self.nonzero[k] / self.elements[k] for k in self.nonzero if self.elements[k]}

    def total_events(self) -> int:
        return sum(self.events.values())

    def total_spikes(self) -> int:
        return sum(self.nonzero[k] for k in self.nonzero if self.geometry[k].kind == "snn")


@dataclass
class EnergyReport:
    layers: list[LayerProfile]
    layer_pj: list[float]
    total_spikes: int = 0
    mean_fr: float = 0.0
    total_pj: float = field(init=False)

    def __post_init__(self):
        self.total_pj = math.fsum(self.layer_pj)

    @property
    def total_mJ(self) -> float:
        return self.total_pj / PJ_PER_MJ

    def to_dict(self) -> dict:
        rows = []
        for p, e in zip(self.layers, self.layer_pj):
            d = asdict(p)
            rows.append({"id": d.pop("layer_id"), **d, "pJ": e})
        return {"layers": rows, "total_mJ": self.total_mJ, "total_spikes": self.total_spikes,
                "mean_fr": self.mean_fr}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        head = f"{'layer':<28} {'kind':<11} {'O':>6} {'C_in':>5} {'C_out':>5} {'k':>2} {'T':>3} {'D':>2} {'fr':>7} {'pJ':>14}"
        lines = [head, "-" * len(head)]
        for p, e in zip(self.layers, self.layer_pj):
            lines.append(
                f"{p.layer_id:<28} {p.kind:<11} {p.O:>6.2f} {p.C_in:>5d} {p.C_out:>5d} {p.k:>2d} "
                f"{p.T:>3d} {p.D:>2d} {p.fr:>7.4f} {e:>14.2f}"
            )
        lines.append("-" * len(head))
        lines.append(f"total: {self.total_mJ:.6e} mJ   spikes: {self.total_spikes}   mean fr: {self.mean_fr:.4f}")
        return "\n".join(lines)


def build_report(profiles: list[LayerProfile], total_spikes: int = 0) -> EnergyReport:
    energies = [layer_energy(p) for p in profiles]
    snn = [p for p in profiles if p.kind == "snn"]
    mean_fr = float(np.mean([p.fr for p in snn])) if snn else 0.0
    return EnergyReport(profiles, energies, total_spikes, mean_fr)


def record_firing_rates(model, images, batch_size: int = 32) -> FiringRecorder:
    """Run inference over ``images`` and collect input firing rates per layer."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or len(images) == 0:
        raise ValueError("record_firing_rates needs a non-empty [N, C, H, W] sample set")
    total = FiringRecorder()
    for i in range(0, len(images), batch_size):
        rec = FiringRecorder()
        model.forward(images[i:i + batch_size], recorder=rec)
        total = total.merge(rec)
    return total


def energy_report(model, fr_map: dict[str, float], D: int = 1, geometry: FiringRecorder | None = None,
                  total_spikes: int = 0) -> EnergyReport:
    """Energy of ``model`` given measured input firing rates per layer.

    The first encoder conv is charged as MACs; a missing firing rate for any
    other layer is an error naming that layer.
    """
    geo = geometry if geometry is not None else model.layer_geometry()
    T = model.config.timesteps
    profiles = []
    for lid, g in geo.geometry.items():
        if g.kind == "ann-encoder":
            profiles.append(LayerProfile(lid, "ann-encoder", math.sqrt(g.area), g.C_in, g.C_out, g.k, 1, 1, 1.0))
            continue
        if lid not in fr_map:
            raise KeyError(f"no firing rate recorded for layer {lid!r}")
        fr = min(1.0, max(0.0, float(fr_map[lid])))
        profiles.append(LayerProfile(lid, "snn", math.sqrt(g.area), g.C_in, g.C_out, g.k, T, D, fr))
    return build_report(profiles, total_spikes)
