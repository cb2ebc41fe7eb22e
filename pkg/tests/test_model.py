import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safformer import autograd as ag
from safformer.model import (
    MAGIC,
    CheckpointError,
    ModelConfig,
    SAFformer,
    build_weights,
    count_params,
    load_checkpoint,
    model_forward,
)
from safformer.smag import smag_closed_form
from safformer.tensor import ConfigError, ShapeError


def tiny(**kw):
    base = dict(base_channels=8, stage_blocks=(1, 1, 1), timesteps=2, image_size=(8, 8), num_classes=2)
    base.update(kw)
    return ModelConfig(**base)


def images(n, size=8, seed=0, c=3):
    return np.random.default_rng(seed).uniform(0, 1, size=(n, c, size, size))


def test_pyramid_on_32px():
    cfg = ModelConfig(base_channels=64, image_size=(32, 32))
    assert cfg.token_grids() == [8, 4, 2]
    assert cfg.stage_channels == (64, 128, 256)
    cap = {}
    SAFformer(tiny(image_size=(32, 32))).forward(images(1, 32), capture=cap)
    assert cap["s1.embed.pool"].shape[-2:] == (8, 8)
    assert cap["s2.embed.pool"].shape[-2:] == (4, 4)
    assert cap["s3.embed.pool"].shape[-2:] == (2, 2)


@pytest.mark.parametrize("side", [16, 32, 48, 64])
def test_token_count_ratios(side):
    n1, n2, n3 = (g * g for g in ModelConfig(image_size=(side, side)).token_grids())
    assert n1 == 16 * n3 and n2 == 4 * n3


def test_zero_image_gives_zero_embedding():
    cap = {}
    SAFformer(tiny()).forward(np.zeros((2, 3, 8, 8)), capture=cap)
    assert not cap["s1.embed.pool"].any()


def test_identical_images_identical_logits():
    x = images(1)
    logits = SAFformer(tiny()).forward(np.concatenate([x, x])).data
    np.testing.assert_array_equal(logits[0], logits[1])


def test_zero_head_gives_zero_logits():
    m = SAFformer(tiny())
    m.params["head.w"][:] = 0
    m.params["head.b"][:] = 0
    assert not m.forward(images(3)).data.any()


def test_forward_is_deterministic_and_finite():
    cfg = tiny()
    a = SAFformer(cfg, seed=4).forward(images(4)).data
    b = SAFformer(cfg, seed=4).forward(images(4)).data
    np.testing.assert_array_equal(a, b)
    assert a.shape == (4, 2) and np.all(np.isfinite(a))
    params, stats = build_weights(cfg, 4)
    np.testing.assert_array_equal(model_forward(images(4), cfg, params, stats), a)


def test_logits_are_mean_over_time_of_head():
    m = SAFformer(tiny(timesteps=3))
    cap = {}
    logits = m.forward(images(2), capture=cap).data
    feats = cap["s3.b0.out"].mean(axis=(3, 4))
    np.testing.assert_allclose(logits, (feats @ m.params["head.w"] + m.params["head.b"]).mean(axis=0))


@settings(max_examples=15)
@given(seed=st.integers(0, 1000))
def test_inter_block_tensors_are_spikes(seed):
    cap = {}
    SAFformer(tiny(), seed=seed).forward(images(2, seed=seed), capture=cap)
    for name in ("s1.b0.res1", "s1.b0.out", "s2.b0.out", "s3.b0.out", "s2.embed.pool"):
        assert set(np.unique(cap[name])) <= {0.0, 1.0}, name


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        SAFformer(tiny()).forward(np.zeros((1, 3, 16, 16)))
    with pytest.raises(ValueError):
        SAFformer(tiny()).forward(np.full((1, 3, 8, 8), np.nan))


@pytest.mark.parametrize(
    "kw",
    [dict(image_size=(10, 10)), dict(image_size=(8, 16)), dict(base_channels=6), dict(stage_blocks=(1, 1)),
     dict(attention="linear"), dict(ffn="mlp"), dict(sgm_mode="soft"), dict(topk_ratio=0.0), dict(num_classes=1),
     dict(smag_kernels=(3, 4))],
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        tiny(**kw).validate()


@pytest.mark.parametrize(
    "kw",
    [dict(attention="ssa"), dict(ffn="smlp"), dict(sgm_mode="fixed"), dict(sgm_mode="dense"),
     dict(use_dwconv_qk=False), dict(no_pconv=True), dict(no_multiscale=True), dict(smag_kernels=(5, 7))],
)
def test_toggles_keep_shapes(kw):
    ref, cap = {}, {}
    SAFformer(tiny()).forward(images(2), capture=ref)
    SAFformer(tiny(**kw)).forward(images(2), capture=cap)
    for name in ("s1.b0.out", "s2.b0.out", "s3.b0.out", "logits"):
        assert cap[name].shape == ref[name].shape


def test_zero_block_stage():
    cfg = tiny(stage_blocks=(0, 1, 1), input_channels=2)
    m = SAFformer(cfg)
    assert m.units() == ["s1.embed", "s2.embed", "s2.b0", "s3.embed", "s3.b0"]
    assert not any(k.startswith("s1.b") for k in m.params)
    assert m.forward(images(2, c=2)).shape == (2, 2)


def test_count_params_matches_enumeration():
    cfg = tiny(base_channels=16)
    params, _ = build_weights(cfg)
    res = count_params(cfg, params)
    assert res["total"] == sum(v.size for v in params.values())
    for name, closed in res["closed_form"].items():
        assert res["modules"][name]["conv"] == closed, name
    assert res["closed_form"]["s1.b0.ffn"] == smag_closed_form(16)
    assert res["modules"]["head"]["conv"] == 64 * 2


def test_smag_cheaper_than_smlp_at_wide_channels():
    smag = count_params(tiny(base_channels=44))["total"]
    smlp = count_params(tiny(base_channels=44, ffn="smlp"))["total"]
    assert smlp > smag


# -- checkpoints --------------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    m = SAFformer(tiny(attention="ssa", no_pconv=True), seed=3)
    m.save(tmp_path / "a.ckpt")
    loaded = SAFformer.load(tmp_path / "a.ckpt")
    assert loaded.config == m.config
    for k, v in m.params.items():
        np.testing.assert_array_equal(loaded.params[k], v.astype(np.float32))
    loaded.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    again = SAFformer.load(tmp_path / "b.ckpt")
    for k in loaded.params:
        assert again.params[k].tobytes() == loaded.params[k].tobytes()
    for k in loaded.stats:
        np.testing.assert_array_equal(again.stats[k].var, loaded.stats[k].var)


def test_checkpoint_header(tmp_path):
    SAFformer(tiny()).save(tmp_path / "m.ckpt")
    assert (tmp_path / "m.ckpt").read_bytes()[:8] == MAGIC


@pytest.mark.parametrize("damage", ["magic", "version", "truncate", "trailing", "header"])
def test_corrupt_checkpoints(tmp_path, damage):
    path = tmp_path / "m.ckpt"
    SAFformer(tiny()).save(path)
    raw = bytearray(path.read_bytes())
    if damage == "magic":
        raw[0] = ord("X")
    elif damage == "version":
        raw[8] = 99
    elif damage == "truncate":
        raw = raw[: len(raw) // 2]
    elif damage == "trailing":
        raw += b"\x00\x01"
    else:
        raw[17] = 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path) if damage != "trailing" else SAFformer.load(path)


def test_missing_checkpoint_is_os_error(tmp_path):
    with pytest.raises(OSError):
        SAFformer.load(tmp_path / "nope.ckpt")


def test_copy_is_independent():
    m = SAFformer(tiny())
    c = m.copy()
    c.params["head.w"] += 1
    assert not np.allclose(c.params["head.w"], m.params["head.w"])


def test_gradients_reach_every_parameter_in_relaxed_mode():
    m = SAFformer(tiny())
    pv = {k: ag.param(v) for k, v in m.params.items()}
    logits = m.forward(images(4), training=True, param_vars=pv, relaxed=True, update_stats=False)
    ag.backward(ag.cross_entropy(logits, np.array([0, 1, 0, 1])))
    missing = [k for k, v in pv.items() if v.grad is None and ".sgm" not in k]
    assert missing == []
    assert all(np.all(np.isfinite(v.grad)) for v in pv.values() if v.grad is not None)
