import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octaseg.network import (
    ModelConfig,
    IpnConfig,
    PlanePerceptronConfig,
    ShapeError,
    build_distance_map,
    checkpoint_bytes,
    global_forward,
    init_global_params,
    init_params,
    init_stage1_params,
    ipn_forward,
    ipnv2_forward,
    load_checkpoint,
    save_checkpoint,
    stage1_forward,
    trunk_forward,
)
from octaseg.numerics import softmax
from octaseg.verify import NET_TOL, network_gradient_check, toy_config


@pytest.mark.parametrize("kind", ["ipn", "ipnv2", "global"])
@pytest.mark.parametrize("seed", [1])
def test_end_to_end_gradients(kind, seed):
    assert network_gradient_check(kind, seed) < NET_TOL


def patch(cfg, l=8, w=8, seed=0):
    h = cfg.ipn.patch_height
    return np.random.default_rng(seed).normal(size=(l, w, h, cfg.ipn.input_channels))


def test_output_shapes():
    for variant in ("ipn", "ipnv2", "ipnv2plus"):
        cfg = toy_config(variant)
        p = init_stage1_params(cfg, 0)
        assert stage1_forward(patch(cfg), p, cfg).shape == (8, 8, 2)
    cfg = toy_config("ipnv2")
    logits, penult = ipnv2_forward(patch(cfg), init_stage1_params(cfg, 0), cfg)
    assert penult.shape == (8, 8, 3)


def test_trunk_collapses_height_to_one():
    cfg = toy_config("ipn")
    p = init_stage1_params(cfg, 0)
    feat, first, _ = trunk_forward(patch(cfg), p, cfg.ipn)
    assert feat.shape == (8, 8, 4)
    assert first.shape == (8, 8, cfg.ipn.patch_height // 2, 3)


def test_zero_params_give_uniform_probabilities():
    cfg = toy_config("ipnv2")
    p = init_stage1_params(cfg, 0)
    for q in p.values():
        q.value[...] = 0.0
    prob = softmax(stage1_forward(patch(cfg), p, cfg))
    assert np.all(prob == 0.5)


def test_skip_path_reaches_the_logits():
    cfg = toy_config("ipnv2")
    p = init_stage1_params(cfg, 3)
    x = patch(cfg, seed=1)
    base = stage1_forward(x, p, cfg)
    p["p.skip.w"].value = p["p.skip.w"].value * 0.0
    assert np.abs(stage1_forward(x, p, cfg) - base).max() > 1e-6


def test_batch_axes_match_single_patches():
    for variant in ("ipn", "ipnv2"):
        cfg = toy_config(variant)
        p = init_stage1_params(cfg, 0)
        xs = np.stack([patch(cfg, seed=s) for s in range(3)])
        got = stage1_forward(xs, p, cfg)
        for i in range(3):
            assert np.array_equal(got[i], stage1_forward(xs[i], p, cfg))


def test_wrong_height_is_rejected():
    cfg = toy_config("ipn")
    x = np.zeros((8, 8, cfg.ipn.patch_height + 1, 2))
    with pytest.raises(ShapeError):
        ipn_forward(x, init_stage1_params(cfg, 0), cfg)


def test_plane_not_divisible_for_unet():
    cfg = toy_config("ipnv2")
    with pytest.raises(ShapeError, match="divisible"):
        ipnv2_forward(patch(cfg, 6, 8), init_stage1_params(cfg, 0), cfg)


def test_global_net_pads_and_crops():
    cfg = toy_config("ipnv2plus")
    g = init_global_params(cfg, 0)
    x = np.random.default_rng(0).normal(size=(13, 10, 3))
    out = global_forward(x, g, cfg)
    assert out.shape == (13, 10, 2)
    padded = np.zeros((16, 12, 3))
    padded[:13, :10] = x
    assert np.array_equal(global_forward(padded, g, cfg)[:13, :10], out)
    with pytest.raises(ShapeError):
        global_forward(np.zeros((8, 8, 4)), g, cfg)


def test_init_determinism_and_stage1_prefix():
    cfg = toy_config("ipnv2plus")
    a, b = init_params(cfg, 5), init_params(cfg, 5)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    s1 = init_stage1_params(cfg, 5)
    assert checkpoint_bytes(a.subset("f.") | a.subset("p.")) == checkpoint_bytes(s1)
    assert any(k.startswith("g.") for k in a)
    assert checkpoint_bytes(init_params(cfg, 6)) != checkpoint_bytes(a)


def test_biases_start_at_zero():
    p = init_stage1_params(toy_config("ipnv2"), 0)
    assert all(not v.value.any() for k, v in p.items() if k.endswith(".b"))


def test_checkpoint_round_trip(tmp_path):
    p = init_params(toy_config("ipnv2plus"), 0)
    save_checkpoint(p, tmp_path / "a.ckpt")
    q = load_checkpoint(tmp_path / "a.ckpt")
    assert list(q) == list(p)
    save_checkpoint(q, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_corruption(tmp_path):
    p = init_stage1_params(toy_config("ipn"), 0)
    save_checkpoint(p, tmp_path / "a.ckpt")
    raw = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "x.ckpt").write_bytes(raw + b"\0")
    with pytest.raises(ValueError, match="trailing"):
        load_checkpoint(tmp_path / "x.ckpt")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "none.ckpt")


def test_distance_map():
    d = build_distance_map(5, 5)
    assert d[2, 2] == 0.0
    assert d[0, 0] == d[4, 4] == d[0, 4] == 1.0
    assert np.allclose(d, d.T) and np.allclose(d, d[::-1])
    assert not build_distance_map(1, 1).any()


def test_bad_configs():
    with pytest.raises(ValueError):
        IpnConfig((4, 4), (2,))
    with pytest.raises(ValueError):
        IpnConfig(pool_mode="median")
    with pytest.raises(ValueError):
        ModelConfig("unet")
    with pytest.raises(ValueError):
        PlanePerceptronConfig(0)


@settings(max_examples=15, deadline=None)
@given(st.sampled_from(["ipn", "ipnv2"]), st.integers(0, 2**31), st.sampled_from([4, 8]))
def test_logits_finite_and_deterministic(variant, seed, l):
    cfg = toy_config(variant)
    p = init_stage1_params(cfg, seed % 1000)
    x = patch(cfg, l, l, seed)
    a, b = stage1_forward(x, p, cfg), stage1_forward(x, p, cfg)
    assert np.isfinite(a).all() and np.array_equal(a, b)
