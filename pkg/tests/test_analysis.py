import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import dft2_centered

from safformer import analysis
from safformer.analysis import (
    AuditError,
    audit_params,
    complete_graph,
    enumerate_ffn,
    low_frequency_disk,
    run_prop_suite,
    self_loop_graph,
    spectrum,
    verify_prop1,
    verify_prop2,
)
from safformer.model import ModelConfig
from safformer.saf import AttentionWeights, saf_forward
from safformer.smag import smag_closed_form, smlp_param_count
from safformer.tensor import ShapeError


def bits(rng, shape):
    return (rng.random(shape) < 0.5).astype(np.float64)


# -- proposition 1 -------------------------------------------------------------------


def test_complete_graph_weights():
    q = np.array([[1.0, 0.0], [1.0, 1.0]])
    k = np.array([[1.0, 1.0], [0.0, 1.0]])
    g = complete_graph(q, k)
    assert g.is_complete and len(g.edges) == 4
    assert g.weights[(0, 0)] == 1 and g.weights[(1, 0)] == 0
    assert g.weights[(0, 1)] == 2 and g.weights[(1, 1)] == 1
    assert sorted(g.inbound(1)) == [0, 1]


def test_prop1_zero_values():
    rng = np.random.default_rng(0)
    r = verify_prop1(bits(rng, (3, 2)), bits(rng, (3, 2)), np.zeros((3, 2)))
    assert r.passed


def test_prop1_orthogonal_rows_reduce_to_self_term():
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    k = q.copy()
    g = complete_graph(q, k)
    assert g.weights[(1, 0)] == 0 and g.weights[(0, 1)] == 0
    assert verify_prop1(q, k, np.ones((2, 2))).passed


@given(seed=st.integers(0, 100_000), t=st.integers(1, 3), n=st.integers(1, 6))
def test_prop1_random(seed, t, n):
    rng = np.random.default_rng(seed)
    shape = (t, 1, n, 3)
    assert verify_prop1(bits(rng, shape), bits(rng, shape), bits(rng, shape), scale=0.5).passed


def test_prop1_reports_witness_when_module_is_wrong(monkeypatch):
    q = k = v = np.ones((1, 1, 2, 2))
    monkeypatch.setattr(analysis, "ssa_reference", lambda *a, **kw: np.zeros((1, 1, 2, 2)))
    r = verify_prop1(q, k, v)
    assert not r.passed
    assert r.witness == {"t": 0, "b": 0, "i": 0, "channel": 0, "graph": 1.0, "module": 0.0}


def test_prop1_rejects_bad_rank():
    with pytest.raises(ShapeError):
        verify_prop1(np.zeros(3), np.zeros(3), np.zeros(3))


# -- proposition 2 -------------------------------------------------------------------


def test_self_loop_graph():
    g = self_loop_graph([0, 2], np.array([3, 1, 2]))
    assert g.self_loops_only and g.edges == [(0, 0), (2, 2)]


@pytest.mark.parametrize("mode", ["dynamic", "fixed", "dense"])
def test_prop2_holds_per_mode(mode):
    rng = np.random.default_rng(1)
    w = AttentionWeights.random(4, rng)
    r = verify_prop2(bits(rng, (2, 2, 8, 4)), w, mode=mode, grid=(2, 4))
    assert r.passed and all(r.checks.values())


def test_prop2_silent_q():
    rng = np.random.default_rng(2)
    w = AttentionWeights.random(4, rng)
    w.bn_q = (w.bn_q[0], np.full(4, -10.0), w.bn_q[2])
    r = verify_prop2(bits(rng, (1, 1, 4, 4)), w, mode="dense")
    assert r.passed
    assert not saf_forward(bits(rng, (1, 1, 4, 4)), w, mode="dense").any()


def test_prop2_witness_on_tampered_output(monkeypatch):
    real = analysis.saf_forward

    def tampered(*a, **kw):
        tr = real(*a, **kw)
        tr.output = 1.0 - tr.output
        return tr

    monkeypatch.setattr(analysis, "saf_forward", tampered)
    rng = np.random.default_rng(3)
    r = verify_prop2(bits(rng, (1, 1, 4, 4)), AttentionWeights.random(4, rng))
    assert not r.passed
    assert r.witness["check"] == "closed_form"
    assert {"t", "b", "i", "channel", "closed_form", "module"} <= set(r.witness)


def test_prop2_witness_on_wrong_mask(monkeypatch):
    real = analysis.saf_forward

    def tampered(*a, **kw):
        tr = real(*a, **kw)
        tr.mask = np.zeros_like(tr.mask)
        return tr

    monkeypatch.setattr(analysis, "saf_forward", tampered)
    rng = np.random.default_rng(4)
    r = verify_prop2(bits(rng, (1, 1, 4, 4)), AttentionWeights.random(4, rng))
    assert not r.passed and r.witness["check"] == "active_count"


def test_prop_suite_small():
    res = run_prop_suite(seeds=10)
    assert res["prop1"] == {"prop": 1, "seeds": 10, "passes": 10, "failures": []}
    assert res["prop2"]["passes"] == 10


# -- parameter audit -----------------------------------------------------------------


def cfg(c, **kw):
    return ModelConfig(base_channels=c // 4, image_size=(16, 16), **kw)


def test_audit_c384():
    res = audit_params(cfg(384))
    assert res.smag == 989_952 and res.smlp == 1_179_648
    assert res.reduction_pct == "16.08%"
    assert abs(100 * res.reduction - 16.08) <= 0.01
    assert all(r.match for r in res.rows)
    assert "16.08%" in res.to_text()
    d = res.to_dict()
    assert d["reduction_pct"] == "16.08%" and len(d["rows"]) == 3


def test_audit_c64_and_crossover():
    res = audit_params(cfg(64))
    assert (res.smag, res.smlp, res.reduction_pct) == (30_592, 32_768, "6.64%")
    # stage-3 width 40 needs base width 10, which the model rejects; audit the block directly
    assert enumerate_ffn(40, "smag") == smag_closed_form(40) == 12_820
    assert enumerate_ffn(40, "smlp") == smlp_param_count(40) == 12_800


def test_audit_with_smlp_blocks():
    res = audit_params(cfg(64, ffn="smlp"))
    assert all(r.kind == "smlp" and r.match for r in res.rows)


def test_audit_names_mismatching_block(monkeypatch):
    monkeypatch.setattr(analysis, "smag_param_count", lambda c, t=None: 1)
    with pytest.raises(AuditError, match="s1.b0.ffn"):
        audit_params(cfg(64))


def test_closed_form_equals_enumeration_across_widths():
    for c in range(4, 513, 4):
        assert enumerate_ffn(c, "smag") == smag_closed_form(c), c
        assert enumerate_ffn(c, "smlp") == smlp_param_count(c), c


# -- spectrum --------------------------------------------------------------------------


def test_constant_map_has_no_high_frequency():
    assert spectrum(np.full((3, 16, 16), 2.5)).hf_ratio == 0.0
    assert spectrum(np.zeros((16, 16))).hf_ratio == 0.0


def test_checkerboard_is_all_high_frequency():
    board = np.where(np.add.outer(np.arange(16), np.arange(16)) % 2 == 0, 1.0, -1.0)
    res = spectrum(board)
    assert res.hf_ratio > 0.95
    assert np.unravel_index(np.argmax(res.magnitude), res.magnitude.shape) == (0, 0)


def test_magnitude_matches_direct_dft():
    x = np.random.default_rng(0).normal(size=(2, 8, 8))
    want = np.mean([np.abs(dft2_centered(ch)) for ch in x], axis=0)
    np.testing.assert_allclose(spectrum(x).magnitude, want, atol=1e-10)


@given(seed=st.integers(0, 10_000))
def test_parseval_and_range(seed):
    x = np.random.default_rng(seed).normal(size=(2, 32, 32))
    res = spectrum(x)
    assert abs(res.spectral_energy - res.spatial_energy) <= 1e-9 * res.spatial_energy
    assert 0.0 <= res.hf_ratio <= 1.0


def test_low_frequency_disk_radius():
    disk = low_frequency_disk(16, 16)
    assert disk[8, 8] and disk[8, 12] and not disk[8, 13] and not disk[0, 0]


def test_spectrum_csv_layout():
    res = spectrum(np.random.default_rng(1).normal(size=(4, 4)))
    lines = res.to_csv().splitlines()
    assert lines[:2] == ["H,W", "4,4"]
    grid = np.array([[float(v) for v in line.split(",")] for line in lines[2:]])
    np.testing.assert_array_equal(grid, res.magnitude)


def test_spectrum_rejects_non_square():
    with pytest.raises(ShapeError):
        spectrum(np.zeros((2, 4, 8)))
