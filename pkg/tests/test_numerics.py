import math
from functools import partial

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octaseg import numerics as nx
from octaseg.numerics import Adam, AdamState, Param, ShapeError, adam_step


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------- conv3d


def test_conv3d_zero_kernel_gives_zero():
    x = rng().normal(size=(4, 5, 3, 2))
    out, _ = nx.conv3d(x, np.zeros((3, 3, 3, 2, 4)), np.zeros(4))
    assert out.shape == (4, 5, 3, 4)
    assert not out.any()


def test_conv3d_identity_kernel():
    x = rng().normal(size=(4, 4, 4, 2))
    w = np.zeros((3, 3, 3, 2, 2))
    w[1, 1, 1] = np.eye(2)
    out, _ = nx.conv3d(x, w, np.zeros(2))
    assert np.array_equal(out, x)


def test_conv3d_matches_direct_sum():
    r = rng(3)
    x = r.normal(size=(3, 4, 2, 2))
    w = r.normal(size=(3, 3, 3, 2, 3))
    b = r.normal(size=3)
    out, _ = nx.conv3d(x, w, b)
    xp = np.pad(x, ((1, 1), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((3, 4, 2, 3))
    for i in range(3):
        for j in range(4):
            for k in range(2):
                ref[i, j, k] = np.einsum("abcd,abcde->e", xp[i:i + 3, j:j + 3, k:k + 3], w) + b
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_conv3d_channel_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 2, 2, 3\).*\(3, 3, 3, 2, 1\)"):
        nx.conv3d(np.zeros((2, 2, 2, 3)), np.zeros((3, 3, 3, 2, 1)), np.zeros(1))


def test_conv3d_gradcheck_4x4x4x2():
    r = rng(1)
    err = nx.check_op(nx.conv3d, nx.conv3d_backward, dict(
        x=r.normal(size=(4, 4, 4, 2)), w=r.normal(size=(3, 3, 3, 2, 2)), b=r.normal(size=2)))
    assert err < 1e-5


def test_conv3d_gradcheck_single_voxel_volume():
    r = rng(2)
    err = nx.check_op(nx.conv3d, nx.conv3d_backward, dict(
        x=r.normal(size=(3, 3, 3, 1)), w=r.normal(size=(3, 3, 3, 1, 2)), b=r.normal(size=2)),
        seed=2)
    assert err < 1e-5


def test_conv_accepts_leading_batch_axes():
    r = rng(4)
    x = r.normal(size=(3, 4, 4, 6, 2))
    w = r.normal(size=(3, 3, 3, 2, 3))
    b = r.normal(size=3)
    batched, cache = nx.conv3d(x, w, b)
    for i in range(3):
        np.testing.assert_array_equal(batched[i], nx.conv3d(x[i], w, b)[0])
    dout = r.normal(size=batched.shape)
    dx, dw, db = nx.conv3d_backward(dout, cache)
    dws = sum(nx.conv3d_backward(dout[i], nx.conv3d(x[i], w, b)[1])[1] for i in range(3))
    np.testing.assert_allclose(dw, dws, atol=1e-10)
    assert dx.shape == x.shape


# ---------------------------------------------------------------- pooling


def test_uni_pool_h_column():
    x = np.array([1.0, 5, 2, 8]).reshape(1, 1, 4, 1)
    out, _ = nx.uni_pool_h(x, 2)
    assert out.ravel().tolist() == [5.0, 8.0]


def test_uni_pool_h_shape():
    out, _ = nx.uni_pool_h(np.zeros((4, 4, 8, 3)), 2)
    assert out.shape == (4, 4, 4, 3)


def test_uni_pool_h_tie_goes_to_first_index():
    x = np.array([7.0, 7.0]).reshape(1, 1, 2, 1)
    _, cache = nx.uni_pool_h(x, 2)
    dx = nx.uni_pool_h_backward(np.ones((1, 1, 1, 1)), cache)
    assert dx.ravel().tolist() == [1.0, 0.0]


def test_uni_pool_h_rejects_nondividing_stride():
    with pytest.raises(ShapeError, match="k=3.*h=8"):
        nx.uni_pool_h(np.zeros((2, 2, 8, 1)), 3)


def test_uni_pool_h_avg_mode():
    x = np.arange(6.0).reshape(1, 1, 6, 1)
    out, _ = nx.uni_pool_h(x, 3, mode="avg")
    assert out.ravel().tolist() == [1.0, 4.0]


def test_uni_pool_h_gradcheck_away_from_ties():
    x = rng(5).permutation(48).reshape(2, 2, 6, 2).astype(float)
    err = nx.check_op(partial(nx.uni_pool_h, k=3), nx.uni_pool_h_backward, dict(x=x))
    assert err < 1e-5


def test_pool2d_constant_map():
    out, _ = nx.pool2d(np.full((6, 4, 2), 3.5))
    assert out.shape == (3, 2, 2)
    assert (out == 3.5).all()


def test_pool2d_requires_even_extents():
    with pytest.raises(ShapeError):
        nx.pool2d(np.zeros((5, 4, 1)))


def test_upsample_then_backward_sums_blocks():
    x = np.arange(4.0).reshape(2, 2, 1)
    up, shape = nx.upsample2d(x)
    assert up.shape == (4, 4, 1)
    assert up[1, 3, 0] == x[0, 1, 0]
    np.testing.assert_array_equal(nx.upsample2d_backward(np.ones_like(up), shape), np.full(x.shape, 4.0))


# ---------------------------------------------------------------- collapse_conv


def test_collapse_conv_mean_oracle():
    x = rng(6).normal(size=(3, 4, 5, 1))
    out, _ = nx.collapse_conv(x, np.full((1, 1, 5, 1, 1), 1 / 5), np.zeros(1))
    np.testing.assert_allclose(out[..., 0], x[..., 0].mean(axis=2), atol=1e-15)


def test_collapse_conv_bias_only():
    out, _ = nx.collapse_conv(np.ones((2, 3, 4, 2)), np.zeros((1, 1, 4, 2, 3)), np.array([1.0, -2, 0.5]))
    assert (out == np.array([1.0, -2, 0.5])).all()


def test_collapse_conv_shape():
    out, _ = nx.collapse_conv(np.zeros((5, 5, 8, 4)), np.zeros((1, 1, 8, 4, 6)), np.zeros(6))
    assert out.shape == (5, 5, 6)


def test_collapse_conv_height_mismatch():
    with pytest.raises(ShapeError, match="kernel height 4 must equal input height 8"):
        nx.collapse_conv(np.zeros((2, 2, 8, 1)), np.zeros((1, 1, 4, 1, 1)), np.zeros(1))


def test_collapse_conv_gradcheck():
    r = rng(7)
    err = nx.check_op(nx.collapse_conv, nx.collapse_conv_backward, dict(
        x=r.normal(size=(3, 3, 4, 2)), w=r.normal(size=(1, 1, 4, 2, 3)), b=r.normal(size=3)))
    assert err < 1e-5


# ---------------------------------------------------------------- small ops


def test_relu_values():
    out, _ = nx.relu(np.array([-1.0, 0.0, 2.0]))
    assert out.tolist() == [0.0, 0.0, 2.0]


def test_relu_subgradient_zero_at_zero():
    _, mask = nx.relu(np.array([0.0]))
    assert nx.relu_backward(np.array([5.0]), mask).tolist() == [0.0]


def test_concat_shapes_and_split():
    out, sizes = nx.concat(np.zeros((8, 8, 3)), np.ones((8, 8, 5)))
    assert out.shape == (8, 8, 8)
    a, b = nx.concat_backward(out, sizes)
    assert a.shape == (8, 8, 3) and b.shape == (8, 8, 5)


def test_concat_mismatch_lists_shapes():
    with pytest.raises(ShapeError, match=r"\(8, 8, 3\), \(4, 8, 5\)"):
        nx.concat(np.zeros((8, 8, 3)), np.zeros((4, 8, 5)))


# ---------------------------------------------------------------- resize


def test_resize_identity():
    x = rng(8).normal(size=(2, 3, 7, 2))
    out, _ = nx.resize_h_linear(x, 7)
    np.testing.assert_array_equal(out, x)


def test_resize_ramp_closed_form():
    h, new_h = 9, 5
    x = np.arange(float(h)).reshape(1, 1, h, 1)
    out, _ = nx.resize_h_linear(x, new_h)
    # ramp samples read back their own source coordinate j * (h - 1) / (new_h - 1)
    assert out.ravel().tolist() == [0.0, 2.0, 4.0, 6.0, 8.0]
    out, _ = nx.resize_h_linear(np.arange(5.0).reshape(1, 1, 5, 1), 3)
    assert out.ravel().tolist() == [0.0, 2.0, 4.0]
    out, _ = nx.resize_h_linear(np.arange(4.0).reshape(1, 1, 4, 1), 3)
    assert out.ravel().tolist() == [0.0, 1.5, 3.0]


def test_resize_single_sample_takes_index_zero():
    x = np.array([4.0, 9.0, 1.0]).reshape(1, 1, 3, 1)
    out, _ = nx.resize_h_linear(x, 1)
    assert out.ravel().tolist() == [4.0]


def test_resize_640_to_160_axis():
    x = rng(9).random((2, 2, 640, 1))
    out, _ = nx.resize_h_linear(x, 160)
    assert out.shape == (2, 2, 160, 1)
    src = np.arange(160) * 639 / 159
    ref = np.stack([np.interp(src, np.arange(640), x[i, j, :, 0]) for i in range(2) for j in range(2)])
    np.testing.assert_allclose(out[..., 0].reshape(4, 160), ref, atol=1e-14)


def test_resize_gradcheck():
    err = nx.check_op(partial(nx.resize_h_linear, new_h=4), nx.resize_h_linear_backward,
                      dict(x=rng(10).normal(size=(2, 2, 9, 2))))
    assert err < 1e-5


# ---------------------------------------------------------------- softmax_ce


def test_softmax_ce_uniform_is_ln2():
    loss, _ = nx.softmax_ce(np.zeros((3, 4, 2)), np.zeros((3, 4), dtype=int))
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_softmax_ce_confident_is_near_zero():
    logits = np.zeros((2, 2, 3))
    logits[..., 1] = 50.0
    loss, _ = nx.softmax_ce(logits, np.ones((2, 2), dtype=int))
    assert 0 <= loss < 1e-20


def test_softmax_ce_gradient_formula():
    r = rng(11)
    logits = r.normal(size=(4, 4, 3))
    labels = r.integers(0, 3, size=(4, 4))
    _, g = nx.softmax_ce(logits, labels)
    onehot = np.eye(3)[labels]
    np.testing.assert_allclose(g, (nx.softmax(logits) - onehot) / 16, atol=1e-16)


def test_softmax_ce_gradcheck_4x4x3():
    r = rng(12)
    labels = r.integers(0, 3, size=(4, 4))
    logits = r.normal(size=(4, 4, 3))
    err = nx.grad_check(lambda a: nx.softmax_ce(a["z"], labels)[0],
                        lambda a: {"z": nx.softmax_ce(a["z"], labels)[1]}, {"z": logits})
    assert err < 1e-5


def test_softmax_ce_label_out_of_range_reports_pixel():
    labels = np.zeros((3, 3), dtype=int)
    labels[2, 1] = 2
    with pytest.raises(ValueError, match=r"\(2, 1\)"):
        nx.softmax_ce(np.zeros((3, 3, 2)), labels)


# ---------------------------------------------------------------- adam


def test_adam_zero_gradient_keeps_param():
    p = Param(np.array([1.5, -2.0]))
    adam_step(p, AdamState.for_param(p))
    assert p.value.tolist() == [1.5, -2.0]


def test_adam_single_step_hand_computed():
    p = Param(np.zeros(1))
    p.grad[:] = 1.0
    st_ = AdamState.for_param(p)
    adam_step(p, st_)
    # m_hat = v_hat = 1 after bias correction, so the step is lr / (1 + eps)
    assert p.value[0] == -1e-4 / (1.0 + 1e-8)
    assert st_.t == 1


def test_adam_two_steps_geometric_sums():
    p = Param(np.zeros(1))
    st_ = AdamState.for_param(p)
    for _ in range(2):
        p.grad[:] = 1.0
        adam_step(p, st_)
    assert st_.t == 2
    assert st_.m[0] == pytest.approx(0.1 * (1 + 0.9), rel=1e-15)
    assert st_.v[0] == pytest.approx(0.001 * (1 + 0.999), rel=1e-15)


def test_adam_optimizer_tracks_each_param():
    params = {"a": Param(np.zeros(2)), "b": Param(np.zeros(3))}
    opt = Adam(lr=0.1)
    for p in params.values():
        p.grad[:] = 1.0
    opt.step(params)
    assert opt.states["a"].t == opt.states["b"].t == 1
    np.testing.assert_allclose(params["b"].value, -0.1 / (1 + 1e-8))


def test_param_zero_grad():
    p = Param(np.ones(3))
    p.grad += 2
    p.zero_grad()
    assert not p.grad.any()


# ---------------------------------------------------------------- gradcheck harness


def test_relative_error_floor():
    assert nx.relative_error(0.0, 0.0) == 0.0
    assert nx.relative_error(1e-9, 0.0) == pytest.approx(1e-2)


def test_grad_check_detects_wrong_gradient():
    x = {"x": np.array([1.0, 2.0])}
    err = nx.grad_check(lambda a: float((a["x"] ** 2).sum()), lambda a: {"x": 3 * a["x"]}, x)
    assert err == pytest.approx(1 / 3, rel=1e-6)


# ---------------------------------------------------------------- properties


dims = st.integers(1, 5)


@settings(max_examples=40, deadline=None)
@given(l=dims, w=dims, h=dims, cin=st.integers(1, 3), cout=st.integers(1, 3), seed=st.integers(0, 2**16))
def test_conv_shape_contract(l, w, h, cin, cout, seed):
    r = rng(seed)
    out, cache = nx.conv3d(r.normal(size=(l, w, h, cin)), r.normal(size=(3, 3, 3, cin, cout)), np.zeros(cout))
    assert out.shape == (l, w, h, cout)
    dx, dw, db = nx.conv3d_backward(np.ones_like(out), cache)
    assert dx.shape == (l, w, h, cin) and dw.shape == (3, 3, 3, cin, cout) and db.shape == (cout,)


@settings(max_examples=40, deadline=None)
@given(l=dims, w=dims, m=st.integers(1, 4), k=st.integers(1, 4), seed=st.integers(0, 2**16))
def test_pool_stays_in_column_envelope(l, w, m, k, seed):
    x = rng(seed).normal(size=(l, w, m * k, 2))
    for mode in ("max", "avg"):
        out, _ = nx.uni_pool_h(x, k, mode)
        assert out.shape == (l, w, m, 2)
        assert (out <= x.max(axis=2, keepdims=True) + 1e-12).all()
        assert (out >= x.min(axis=2, keepdims=True) - 1e-12).all()


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 12), new_h=st.integers(1, 12), seed=st.integers(0, 2**16))
def test_resize_stays_in_column_envelope(h, new_h, seed):
    x = rng(seed).normal(size=(2, 3, h, 2))
    out, _ = nx.resize_h_linear(x, new_h)
    assert out.shape == (2, 3, new_h, 2)
    assert (out <= x.max(axis=2, keepdims=True)).all()
    assert (out >= x.min(axis=2, keepdims=True)).all()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_relu_nonnegative_and_ops_deterministic(seed):
    r = rng(seed)
    x = r.normal(size=(4, 4, 4, 2))
    assert (nx.relu(x)[0] >= 0).all()
    w = r.normal(size=(3, 3, 3, 2, 2))
    a, _ = nx.conv3d(x, w, np.zeros(2))
    b, _ = nx.conv3d(x.copy(), w.copy(), np.zeros(2))
    assert a.tobytes() == b.tobytes()


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_ops_finite_on_finite_input(seed):
    r = rng(seed)
    x = r.normal(size=(4, 4, 4, 2)) * 100
    out, _ = nx.conv3d(x, r.normal(size=(3, 3, 3, 2, 2)), np.zeros(2))
    loss, g = nx.softmax_ce(out[:, :, 0, :] * 1e3, np.zeros((4, 4), dtype=int))
    assert np.isfinite(out).all() and np.isfinite(loss) and np.isfinite(g).all()
