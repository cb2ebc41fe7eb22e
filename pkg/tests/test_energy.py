import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import synaptic_energy

from safformer.energy import (
    FiringRecorder,
    LayerProfile,
    build_report,
    energy_report,
    layer_energy,
    record_firing_rates,
)
from safformer.model import ModelConfig, SAFformer


def tiny(**kw):
    base = dict(base_channels=8, stage_blocks=(1, 1, 1), timesteps=2, image_size=(8, 8), num_classes=2)
    base.update(kw)
    return ModelConfig(**base)


def test_encoder_example():
    p = LayerProfile("enc", "ann-encoder", 8, 3, 16, 3)
    assert layer_energy(p) == pytest.approx(127_180.8, rel=1e-12)
    assert layer_energy(p) == pytest.approx(synaptic_energy("ann-encoder", 8, 3, 16, 3), rel=1e-12)


def test_snn_example():
    p = LayerProfile("l1", "snn", 8, 16, 16, 3, T=4, D=1, fr=0.2)
    assert layer_energy(p) == pytest.approx(106_168.32, rel=1e-12)
    assert layer_energy(p) == pytest.approx(synaptic_energy("snn", 8, 16, 16, 3, 4, 1, 0.2), rel=1e-12)


def test_silent_layer_costs_nothing():
    assert layer_energy(LayerProfile("l", "snn", 8, 16, 16, 3, T=4, fr=0.0)) == 0.0


@pytest.mark.parametrize("kw", [dict(fr=1.5), dict(fr=-0.1), dict(k=0), dict(T=0), dict(kind="dense")])
def test_profile_validation(kw):
    args = dict(layer_id="x", kind="snn", O=4, C_in=2, C_out=2, k=3)
    args.update(kw)
    with pytest.raises(ValueError):
        LayerProfile(**args)


@given(fr=st.floats(0, 0.99), bump=st.floats(1e-3, 0.5), t=st.integers(1, 8), d=st.integers(1, 4))
def test_monotone_and_linear(fr, bump, t, d):
    lo = LayerProfile("l", "snn", 4, 8, 8, 3, T=t, D=d, fr=fr)
    hi = LayerProfile("l", "snn", 4, 8, 8, 3, T=t, D=d, fr=min(1.0, fr + bump))
    assert layer_energy(hi) > layer_energy(lo)
    double_t = LayerProfile("l", "snn", 4, 8, 8, 3, T=2 * t, D=d, fr=fr)
    assert layer_energy(double_t) == pytest.approx(2 * layer_energy(lo), rel=1e-12)
    double_c = LayerProfile("l", "snn", 4, 16, 8, 3, T=t, D=d, fr=fr)
    assert layer_energy(double_c) == pytest.approx(2 * layer_energy(lo), rel=1e-12)


def test_two_layer_hand_sum():
    rep = build_report([LayerProfile("enc", "ann-encoder", 4, 2, 4, 3),
                        LayerProfile("l1", "snn", 4, 4, 4, 1, T=2, D=1, fr=0.25)])
    hand = 16 * 2 * 4 * 9 * 4.6 + 2 * 0.25 * 16 * 4 * 4 * 0.9
    assert rep.total_pj == pytest.approx(hand, rel=1e-12)
    assert rep.total_mJ == pytest.approx(hand / 1e9, rel=1e-12)
    assert rep.mean_fr == 0.25


def test_report_json_schema():
    rep = build_report([LayerProfile("enc", "ann-encoder", 4, 2, 4, 3),
                        LayerProfile("l1", "snn", 4, 4, 4, 1, fr=0.5)], total_spikes=12)
    d = json.loads(rep.to_json())
    assert set(d) >= {"layers", "total_mJ", "total_spikes"}
    assert d["total_spikes"] == 12
    for row in d["layers"]:
        assert set(row) == {"id", "kind", "O", "C_in", "C_out", "k", "T", "D", "fr", "pJ"}
    assert sum(r["pJ"] for r in d["layers"]) / 1e9 == pytest.approx(d["total_mJ"], rel=1e-9)
    text = rep.to_text()
    assert "enc" in text and "total:" in text


def test_recorder_rates():
    rec = FiringRecorder()
    rec.add_layer("ones", "snn", np.ones((2, 3)), (1, 1), 3, 1, 1)
    rec.add_layer("zeros", "snn", np.zeros((2, 3)), (1, 1), 3, 1, 1)
    half = np.zeros((4, 4))
    half[:2] = 1
    rec.add_layer("half", "snn", half, (1, 1), 4, 1, 1)
    assert rec.firing_rates() == {"ones": 1.0, "zeros": 0.0, "half": 0.5}
    assert rec.total_spikes() == 6 + 8


def test_recorder_merge_is_associative_and_commutative():
    rng = np.random.default_rng(0)
    shards = []
    for _ in range(3):
        r = FiringRecorder()
        for name in ("a", "b"):
            r.add_layer(name, "snn", (rng.random((5, 7)) < 0.3).astype(float), (2, 2), 3, 3, 3)
        shards.append(r)
    a, b, c = shards
    left = a.merge(b).merge(c).firing_rates()
    right = a.merge(b.merge(c)).firing_rates()
    swapped = c.merge(a).merge(b).firing_rates()
    assert left == right == swapped


def test_zero_spike_model_costs_encoder_only():
    m = SAFformer(tiny())
    rec = record_firing_rates(m, np.zeros((3, 3, 8, 8)))
    rates = rec.firing_rates()
    geo = m.layer_geometry().geometry
    assert all(rates[k] == 0.0 for k, g in geo.items() if g.kind == "snn")
    rep = energy_report(m, rates)
    enc = [p for p in rep.layers if p.kind == "ann-encoder"]
    assert [p.layer_id for p in enc] == ["s1.embed.conv"]
    assert rep.total_pj == layer_energy(enc[0])
    assert rep.total_pj == pytest.approx(synaptic_energy("ann-encoder", 4, 3, 8, 3), rel=1e-12)


def test_doubling_timesteps_doubles_snn_terms():
    x = np.random.default_rng(1).uniform(0, 1, (4, 3, 8, 8))
    m2 = SAFformer(tiny(timesteps=2))
    m4 = SAFformer(ModelConfig(**{**m2.config.__dict__, "timesteps": 4}), params=m2.params, stats=m2.stats)
    rates = record_firing_rates(m2, x).firing_rates()
    r2, r4 = energy_report(m2, rates), energy_report(m4, rates)
    for a, b, ea, eb in zip(r2.layers, r4.layers, r2.layer_pj, r4.layer_pj):
        assert a.layer_id == b.layer_id
        assert eb == (ea if a.kind == "ann-encoder" else 2 * ea)


def test_virtual_timesteps_scale_snn_terms():
    m = SAFformer(tiny())
    rates = record_firing_rates(m, np.ones((1, 3, 8, 8))).firing_rates()
    r1, r4 = energy_report(m, rates, D=1), energy_report(m, rates, D=4)
    snn1 = sum(e for p, e in zip(r1.layers, r1.layer_pj) if p.kind == "snn")
    snn4 = sum(e for p, e in zip(r4.layers, r4.layer_pj) if p.kind == "snn")
    assert snn4 == pytest.approx(4 * snn1, rel=1e-12)


def test_missing_rate_names_layer():
    m = SAFformer(tiny())
    rates = record_firing_rates(m, np.ones((1, 3, 8, 8))).firing_rates()
    rates.pop("s2.b0.ffn.expand")
    with pytest.raises(KeyError, match="s2.b0.ffn.expand"):
        energy_report(m, rates)


def test_recording_is_deterministic_and_batch_invariant():
    m = SAFformer(tiny())
    x = np.random.default_rng(2).uniform(0, 1, (6, 3, 8, 8))
    a = record_firing_rates(m, x, batch_size=6).firing_rates()
    b = record_firing_rates(m, x, batch_size=6).firing_rates()
    assert a == b
    with pytest.raises(ValueError):
        record_firing_rates(m, np.zeros((0, 3, 8, 8)))


def test_total_equals_sum_of_parts():
    m = SAFformer(tiny())
    rates = record_firing_rates(m, np.random.default_rng(3).uniform(0, 1, (2, 3, 8, 8))).firing_rates()
    rep = energy_report(m, rates)
    assert rep.total_pj == pytest.approx(sum(rep.layer_pj), rel=1e-9)
