import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from signnet import layers as L
from signnet.errors import DataError, ParameterError, ShapeError, UsageError
from signnet.gradcheck import (check_conv3d, check_linear, check_lstm, check_maxpool, check_relu,
                               check_softmax_ce)
from signnet.tensor import Rng


def naive_conv3d(x, w, b):
    """Direct summation over the zero-padded 3x3x3 window."""
    B, C, T, H, W = x.shape
    O = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    out = np.zeros((B, O, T, H, W))
    for bi in range(B):
        for o in range(O):
            for t in range(T):
                for h in range(H):
                    for ww in range(W):
                        out[bi, o, t, h, ww] = b[o] + np.sum(xp[bi, :, t:t + 3, h:h + 3, ww:ww + 3] * w[o])
    return out


# --- conv3d -----------------------------------------------------------------


def test_conv_zero_weights_give_zero(np_rng):
    x = np_rng.normal(size=(2, 3, 4, 6, 6))
    out, _ = L.conv3d_forward(x, np.zeros((5, 3, 3, 3, 3)), np.zeros(5))
    assert out.shape == (2, 5, 4, 6, 6) and not out.any()


def test_conv_identity_kernel(np_rng):
    x = np_rng.normal(size=(1, 1, 3, 5, 4))
    w = np.zeros((1, 1, 3, 3, 3))
    w[0, 0, 1, 1, 1] = 1.0
    out, _ = L.conv3d_forward(x, w, np.zeros(1))
    np.testing.assert_array_equal(out, x)


def test_conv_ones_window_sum():
    out, _ = L.conv3d_forward(np.ones((1, 1, 2, 2, 2)), np.ones((1, 1, 3, 3, 3)), np.zeros(1))
    np.testing.assert_array_equal(out, np.full((1, 1, 2, 2, 2), 8.0))


def test_conv_matches_direct_summation(np_rng):
    x = np_rng.normal(size=(2, 2, 3, 4, 5))
    w = np_rng.normal(size=(3, 2, 3, 3, 3))
    b = np_rng.normal(size=3)
    out, _ = L.conv3d_forward(x, w, b)
    np.testing.assert_allclose(out, naive_conv3d(x, w, b), rtol=1e-12, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5))
def test_conv_preserves_thw(T, H, W):
    out, _ = L.conv3d_forward(np.ones((1, 2, T, H, W)), np.ones((3, 2, 3, 3, 3)), np.zeros(3))
    assert out.shape == (1, 3, T, H, W)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        L.conv3d_forward(np.ones((1, 2, 2, 2, 2)), np.ones((1, 3, 3, 3, 3)), np.zeros(1))


def test_conv_backward_zero_grad(np_rng):
    x = np_rng.normal(size=(1, 2, 2, 3, 3))
    out, cache = L.conv3d_forward(x, np_rng.normal(size=(2, 2, 3, 3, 3)), np.zeros(2))
    gx, gw, gb = L.conv3d_backward(cache, np.zeros_like(out))
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_backward_scalar_case():
    x = np.array([2.5]).reshape(1, 1, 1, 1, 1)
    w = np.zeros((1, 1, 3, 3, 3))
    _, cache = L.conv3d_forward(x, w, np.zeros(1))
    _, gw, gb = L.conv3d_backward(cache, np.array([4.0]).reshape(1, 1, 1, 1, 1))
    assert gw[0, 0, 1, 1, 1] == 10.0
    assert np.count_nonzero(gw) == 1 and gb[0] == 4.0


def test_conv_backward_shape_mismatch(np_rng):
    _, cache = L.conv3d_forward(np.ones((1, 1, 2, 2, 2)), np.ones((1, 1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ShapeError):
        L.conv3d_backward(cache, np.ones((1, 1, 2, 2, 3)))


def test_conv_finite_differences():
    errs = check_conv3d(Rng(11), 20)
    assert max(errs.values()) <= 1e-4, errs


def test_cache_single_use():
    _, cache = L.conv3d_forward(np.ones((1, 1, 1, 1, 1)), np.ones((1, 1, 3, 3, 3)), np.zeros(1))
    L.conv3d_backward(cache, np.ones((1, 1, 1, 1, 1)))
    with pytest.raises(UsageError):
        L.conv3d_backward(cache, np.ones((1, 1, 1, 1, 1)))


# --- relu -------------------------------------------------------------------


def test_relu_forward_backward():
    out, cache = L.relu(np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out, [0, 0, 2])
    np.testing.assert_array_equal(L.relu_backward(cache, np.ones(3)), [0, 0, 1])


def test_relu_finite_differences():
    assert check_relu(Rng(12), 20)["input"] <= 1e-6


# --- maxpool ----------------------------------------------------------------


def test_pool_constant_input():
    out, _ = L.maxpool3d_forward(np.full((1, 2, 3, 4, 6), 7.0))
    np.testing.assert_array_equal(out, np.full((1, 2, 3, 2, 3), 7.0))


def test_pool_patch_and_routing():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 1, 2, 2)
    out, cache = L.maxpool3d_forward(x)
    assert out.item() == 4.0
    g = L.maxpool3d_backward(cache, np.array([1.0]).reshape(1, 1, 1, 1, 1))
    np.testing.assert_array_equal(g[0, 0, 0], [[0, 0], [0, 1]])


def test_pool_tie_goes_to_first_index():
    x = np.full((1, 1, 1, 2, 2), 5.0)
    _, cache = L.maxpool3d_forward(x)
    g = L.maxpool3d_backward(cache, np.array([3.0]).reshape(1, 1, 1, 1, 1))
    np.testing.assert_array_equal(g[0, 0, 0], [[3, 0], [0, 0]])


def test_pool_zero_grad_and_errors():
    _, cache = L.maxpool3d_forward(np.ones((1, 1, 2, 4, 4)))
    assert not L.maxpool3d_backward(cache, np.zeros((1, 1, 2, 2, 2))).any()
    with pytest.raises(ShapeError):
        L.maxpool3d_forward(np.ones((1, 1, 2, 3, 4)))
    _, cache = L.maxpool3d_forward(np.ones((1, 1, 2, 4, 4)))
    with pytest.raises(ShapeError):
        L.maxpool3d_backward(cache, np.zeros((1, 1, 2, 4, 4)))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 5), st.integers(1, 4), st.integers(1, 4))
def test_pool_preserves_t(T, h2, w2):
    out, _ = L.maxpool3d_forward(np.ones((1, 1, T, 2 * h2, 2 * w2)))
    assert out.shape == (1, 1, T, h2, w2)


def test_pool_finite_differences():
    assert check_maxpool(Rng(13), 20)["input"] <= 1e-4


# --- lstm -------------------------------------------------------------------


def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def naive_lstm(x, layers):
    """Per-sample, per-unit loops over the gate equations."""
    B, T, _ = x.shape
    seq = x
    for p in layers:
        H = p.w_hh.shape[1]
        out = np.zeros((B, T, H))
        for b in range(B):
            h = np.zeros(H)
            c = np.zeros(H)
            for t in range(T):
                pre = p.w_ih @ seq[b, t] + p.b_ih + p.w_hh @ h + p.b_hh
                i = np.array([_sig(v) for v in pre[:H]])
                f = np.array([_sig(v) for v in pre[H:2 * H]])
                g = np.tanh(pre[2 * H:3 * H])
                o = np.array([_sig(v) for v in pre[3 * H:]])
                c = f * c + i * g
                h = o * np.tanh(c)
                out[b, t] = h
        seq = out
    return seq


def _random_layers(rng, D, H, n):
    layers, d = [], D
    for _ in range(n):
        layers.append(L.LstmLayer(rng.normal(size=(4 * H, d)), rng.normal(size=(4 * H, H)),
                                  rng.normal(size=4 * H), rng.normal(size=4 * H)))
        d = H
    return layers


def test_lstm_zero_params_zero_output(np_rng):
    layers = [L.LstmLayer(np.zeros((12, 5)), np.zeros((12, 3)), np.zeros(12), np.zeros(12)),
              L.LstmLayer(np.zeros((12, 3)), np.zeros((12, 3)), np.zeros(12), np.zeros(12))]
    seq, fin, _ = L.lstm_forward(np_rng.normal(size=(2, 4, 5)), layers)
    assert not seq.any() and not fin.any()


def test_lstm_scalar_step():
    p = L.LstmLayer(np.full((4, 1), 0.1), np.full((4, 1), 0.1), np.full(4, 0.1), np.full(4, 0.1))
    seq, fin, _ = L.lstm_forward(np.ones((1, 1, 1)), [p])
    s, g = _sig(0.3), math.tanh(0.3)
    assert fin.item() == pytest.approx(s * math.tanh(s * g), abs=1e-12)
    assert fin.item() == pytest.approx(0.09524, abs=5e-6)


def test_lstm_matches_naive_loops(np_rng):
    layers = _random_layers(np_rng, 3, 4, 2)
    x = np_rng.normal(size=(2, 5, 3))
    seq, fin, _ = L.lstm_forward(x, layers)
    ref = naive_lstm(x, layers)
    np.testing.assert_allclose(seq, ref, rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(fin, seq[:, -1])


def test_lstm_full_hidden_shape():
    H = 512
    layers = [L.LstmLayer(np.zeros((4 * H, 6)), np.zeros((4 * H, H)), np.zeros(4 * H), np.zeros(4 * H)),
              L.LstmLayer(np.zeros((4 * H, H)), np.zeros((4 * H, H)), np.zeros(4 * H), np.zeros(4 * H))]
    seq, fin, _ = L.lstm_forward(np.zeros((1, 30, 6)), layers)
    assert seq.shape == (1, 30, 512) and fin.shape == (1, 512)


def test_lstm_input_mismatch(np_rng):
    with pytest.raises(ShapeError):
        L.lstm_forward(np.zeros((1, 2, 4)), _random_layers(np_rng, 3, 2, 1))


def test_lstm_zero_output_grads(np_rng):
    layers = _random_layers(np_rng, 2, 3, 2)
    seq, fin, cache = L.lstm_forward(np_rng.normal(size=(1, 3, 2)), layers)
    gx, grads = L.lstm_backward(cache, np.zeros_like(seq), np.zeros_like(fin))
    assert not gx.any()
    for g in grads:
        assert not (g.w_ih.any() or g.w_hh.any() or g.b_ih.any() or g.b_hh.any())


def test_lstm_scalar_backward_by_hand():
    w, x = 0.1, 1.0
    p = L.LstmLayer(np.full((4, 1), w), np.full((4, 1), w), np.full(4, w), np.full(4, w))
    _, _, cache = L.lstm_forward(np.full((1, 1, 1), x), [p])
    gx, (g,) = L.lstm_backward(cache, None, np.ones((1, 1)))
    # hand chain rule for h = o * tanh(i * g), all pre-activations 0.3, c0 = h0 = 0
    s, gg = _sig(0.3), math.tanh(0.3)
    c = s * gg
    tc = math.tanh(c)
    dc = s * (1 - tc ** 2)
    d_i = dc * gg * s * (1 - s)
    d_f = 0.0
    d_g = dc * s * (1 - gg ** 2)
    d_o = tc * s * (1 - s)
    expected = np.array([d_i, d_f, d_g, d_o])
    np.testing.assert_allclose(g.b_ih, expected, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(g.b_hh, expected, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(g.w_ih[:, 0], expected * x, rtol=1e-12, atol=1e-15)
    np.testing.assert_array_equal(g.w_hh, np.zeros((4, 1)))
    assert gx.item() == pytest.approx(w * expected.sum(), rel=1e-12)


def test_lstm_finite_differences():
    errs = check_lstm(Rng(14), 20, B=1, T=3, D=2, H=2)
    assert max(errs.values()) <= 1e-4, errs


# --- linear -----------------------------------------------------------------


def test_linear_examples():
    out, _ = L.linear(np.ones((3, 2)), np.zeros((4, 2)), np.array([1.0, 2, 3, 4]))
    np.testing.assert_array_equal(out, np.tile([1, 2, 3, 4], (3, 1)))
    out, _ = L.linear(np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]]), np.array([5.0]))
    np.testing.assert_array_equal(out, [[16]])
    with pytest.raises(ShapeError):
        L.linear(np.ones((1, 3)), np.ones((2, 2)), np.zeros(2))


def test_linear_finite_differences():
    assert max(check_linear(Rng(15), 20).values()) <= 1e-6


# --- dropout ----------------------------------------------------------------


def test_dropout_eval_identity(np_rng):
    x = np_rng.normal(size=(3, 4))
    out, _ = L.dropout(x, 0.5, "eval")
    assert out is x or np.array_equal(out, x)


def test_dropout_p0_identity(np_rng):
    x = np_rng.normal(size=(3, 4))
    out, _ = L.dropout(x, 0.0, "train", Rng(1))
    np.testing.assert_array_equal(out, x)


def test_dropout_statistics():
    x = np.ones(10_000)
    out, cache = L.dropout(x, 0.5, "train", Rng(11))
    survivors = np.count_nonzero(out) / x.size
    assert abs(survivors - 0.5) <= 0.02
    assert abs(out.mean() - 1.0) <= 0.03
    np.testing.assert_array_equal(np.unique(out), [0.0, 2.0])
    g = L.dropout_backward(cache, np.ones(10_000))
    np.testing.assert_array_equal(g, out)


def test_dropout_expectation_three_sigma():
    x = np.linspace(0.5, 1.5, 20_000)
    out, _ = L.dropout(x, 0.5, "train", Rng(3))
    # per-element variance of x*mask*2 is x^2, so the mean's sigma is sqrt(sum x^2)/n
    sigma = math.sqrt(np.sum(x ** 2)) / x.size
    assert abs(out.mean() - x.mean()) <= 3 * sigma


@pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
def test_dropout_bad_p(p):
    with pytest.raises(ParameterError):
        L.dropout(np.ones(3), p, "train", Rng(0))


# --- softmax cross-entropy --------------------------------------------------


def test_ce_uniform_logits():
    loss, _ = L.softmax_cross_entropy(np.zeros((3, 7)), [0, 3, 6])
    assert loss == pytest.approx(math.log(7), abs=1e-12)


def test_ce_closed_form():
    loss, grad = L.softmax_cross_entropy(np.array([[2.0, 0.0]]), [0])
    assert loss == pytest.approx(math.log(1 + math.exp(-2)), abs=1e-12)
    assert loss == pytest.approx(0.126928, abs=1e-6)
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-15)


def test_ce_bad_label():
    with pytest.raises(DataError):
        L.softmax_cross_entropy(np.zeros((1, 3)), [3])


@settings(max_examples=50)
@given(st.integers(0, 2**32), st.floats(-50, 50))
def test_ce_shift_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(4, 5)) * 3
    labels = rng.integers(0, 5, size=4)
    a, ga = L.softmax_cross_entropy(logits, labels)
    b, gb = L.softmax_cross_entropy(logits + shift, labels)
    assert a == pytest.approx(b, abs=1e-6)
    np.testing.assert_allclose(ga.sum(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(ga, gb, atol=1e-6)


def test_ce_finite_differences():
    assert check_softmax_ce(Rng(16), 20)["logits"] <= 1e-4
