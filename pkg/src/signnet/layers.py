"""Forward/backward pairs for every layer of the network, plus the loss.

Each ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
consumes that cache exactly once. Shapes follow the (B, C, T, H, W) video
layout. All functions work in float32 and float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, ParameterError, ShapeError, UsageError
from .tensor import Rng, check_finite, matmul


def _expect_shape(x: np.ndarray, shape: tuple, what: str) -> None:
    if tuple(x.shape) != tuple(shape):
        raise ShapeError(f"{what}: expected shape {tuple(shape)}, got {tuple(x.shape)}")


# ---------------------------------------------------------------------------
# 3D convolution (stride 1, zero padding), im2col formulation


@dataclass
class Conv3dCache:
    input_shape: tuple
    cols: np.ndarray
    weight: np.ndarray
    padding: tuple
    out_shape: tuple
    used: bool = False


def conv3d_forward(x, weight, bias, padding=(1, 1, 1), stride=1):
    if stride != 1:
        raise ShapeError("only stride 1 is supported")
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input and weight, got {x.shape}, {weight.shape}")
    B, C, T, H, W = x.shape
    O, Cw, kt, kh, kw = weight.shape
    if Cw != C:
        raise ShapeError(f"input has {C} channels but weight expects {Cw}")
    _expect_shape(bias, (O,), "conv3d bias")
    pt, ph, pw = padding
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    To, Ho, Wo = T + 2 * pt - kt + 1, H + 2 * ph - kh + 1, W + 2 * pw - kw + 1
    if min(To, Ho, Wo) < 1:
        raise ShapeError("kernel larger than padded input")

    win = sliding_window_view(xp, (kt, kh, kw), axis=(2, 3, 4))
    # (B, To, Ho, Wo, C, kt, kh, kw) -> rows are output positions
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(B * To * Ho * Wo, C * kt * kh * kw)
    out = matmul(cols, weight.reshape(O, -1).T) + bias
    out = np.ascontiguousarray(out.reshape(B, To, Ho, Wo, O).transpose(0, 4, 1, 2, 3))
    return out, Conv3dCache(x.shape, cols, weight, tuple(padding), out.shape)


def conv3d_backward(cache: Conv3dCache, grad_out):
    _consume(cache)
    _expect_shape(grad_out, cache.out_shape, "conv3d grad_out")
    B, C, T, H, W = cache.input_shape
    O, _, kt, kh, kw = cache.weight.shape
    _, _, To, Ho, Wo = cache.out_shape
    pt, ph, pw = cache.padding

    g = grad_out.transpose(0, 2, 3, 4, 1).reshape(-1, O)
    grad_w = matmul(g.T.copy(), cache.cols).reshape(cache.weight.shape)
    grad_b = g.sum(axis=0)
    dcols = matmul(g, cache.weight.reshape(O, -1)).reshape(B, To, Ho, Wo, C, kt, kh, kw)

    dxp = np.zeros((B, C, T + 2 * pt, H + 2 * ph, W + 2 * pw), dtype=grad_out.dtype)
    for i in range(kt):
        for j in range(kh):
            for k in range(kw):
                dxp[:, :, i:i + To, j:j + Ho, k:k + Wo] += dcols[..., i, j, k].transpose(0, 4, 1, 2, 3)
    grad_x = dxp[:, :, pt:pt + T, ph:ph + H, pw:pw + W]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


# ---------------------------------------------------------------------------
# ReLU


@dataclass
class ReluCache:
    mask: np.ndarray
    used: bool = False


def relu(x):
    mask = x > 0
    return np.where(mask, x, x.dtype.type(0)), ReluCache(mask)


def relu_backward(cache: ReluCache, grad_out):
    _consume(cache)
    _expect_shape(grad_out, cache.mask.shape, "relu grad_out")
    # subgradient at exactly 0 is 0
    return np.where(cache.mask, grad_out, grad_out.dtype.type(0))


# ---------------------------------------------------------------------------
# Spatial-only max pooling, kernel (1, 2, 2), stride (1, 2, 2)


@dataclass
class MaxPoolCache:
    input_shape: tuple
    argmax: np.ndarray
    used: bool = False


def maxpool3d_forward(x, kernel=(1, 2, 2), stride=(1, 2, 2)):
    if tuple(kernel) != (1, 2, 2) or tuple(stride) != (1, 2, 2):
        raise ShapeError("only kernel/stride (1, 2, 2) is supported")
    if x.ndim != 5:
        raise ShapeError(f"maxpool3d expects 5-D input, got {x.shape}")
    B, C, T, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"spatial dims must be even, got H={H}, W={W}")
    H2, W2 = H // 2, W // 2
    # window elements in row-major (dh, dw) order so argmax picks the first tie
    win = x.reshape(B, C, T, H2, 2, W2, 2).transpose(0, 1, 2, 3, 5, 4, 6).reshape(B, C, T, H2, W2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, MaxPoolCache(x.shape, idx)


def maxpool3d_backward(cache: MaxPoolCache, grad_out):
    _consume(cache)
    B, C, T, H, W = cache.input_shape
    _expect_shape(grad_out, (B, C, T, H // 2, W // 2), "maxpool3d grad_out")
    g = np.zeros(grad_out.shape + (4,), dtype=grad_out.dtype)
    np.put_along_axis(g, cache.argmax[..., None], grad_out[..., None], axis=-1)
    g = g.reshape(B, C, T, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 3, 5, 4, 6)
    return np.ascontiguousarray(g.reshape(cache.input_shape))


# ---------------------------------------------------------------------------
# LSTM, gate order [input, forget, cell candidate, output]


@dataclass
class LstmLayer:
    w_ih: np.ndarray  # (4H, D)
    w_hh: np.ndarray  # (4H, H)
    b_ih: np.ndarray  # (4H,)
    b_hh: np.ndarray  # (4H,)

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_ih.shape[1]


LstmParams = list  # list[LstmLayer], bottom layer first


def sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


@dataclass
class _LstmLayerCache:
    x: np.ndarray       # (B, T, D) layer input
    h_prev: np.ndarray  # (B, T, H) hidden state entering each step
    c_prev: np.ndarray  # (B, T, H)
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    tanh_c: np.ndarray


@dataclass
class LstmCache:
    layers: list
    params: list
    out_shape: tuple
    used: bool = False


def _lstm_layer_forward(x, p: LstmLayer, h, c):
    B, T, _ = x.shape
    H = p.hidden
    xw = (matmul(x.reshape(B * T, -1), p.w_ih.T.copy()) + (p.b_ih + p.b_hh)).reshape(B, T, 4 * H)
    w_hh_t = p.w_hh.T.copy()
    shape = (B, T, H)
    hs, cs_prev, hs_prev = np.empty(shape, x.dtype), np.empty(shape, x.dtype), np.empty(shape, x.dtype)
    gi, gf, gg, go, tc = (np.empty(shape, x.dtype) for _ in range(5))
    for t in range(T):
        a = xw[:, t] + matmul(h, w_hh_t)
        i = sigmoid(a[:, :H])
        f = sigmoid(a[:, H:2 * H])
        g = np.tanh(a[:, 2 * H:3 * H])
        o = sigmoid(a[:, 3 * H:])
        hs_prev[:, t], cs_prev[:, t] = h, c
        c = f * c + i * g
        tanh_c = np.tanh(c)
        h = o * tanh_c
        gi[:, t], gf[:, t], gg[:, t], go[:, t], tc[:, t] = i, f, g, o, tanh_c
        hs[:, t] = h
    return hs, _LstmLayerCache(x, hs_prev, cs_prev, gi, gf, gg, go, tc)


def lstm_forward(x, params: LstmParams, h0=None, c0=None):
    """Stacked LSTM. Returns (hidden_seq of the top layer, final_h, cache)."""
    if x.ndim != 3:
        raise ShapeError(f"lstm expects (B, T, D) input, got {x.shape}")
    B, T, D = x.shape
    if not params:
        raise ShapeError("lstm needs at least one layer")
    if D != params[0].input_size:
        raise ShapeError(f"input size {D} != layer-1 input size {params[0].input_size}")
    L = len(params)
    H = params[-1].hidden
    caches = []
    seq = x
    for l, p in enumerate(params):
        Hl = p.hidden
        _expect_shape(p.w_hh, (4 * Hl, Hl), f"lstm layer {l} w_hh")
        _expect_shape(p.b_ih, (4 * Hl,), f"lstm layer {l} b_ih")
        _expect_shape(p.b_hh, (4 * Hl,), f"lstm layer {l} b_hh")
        if p.w_ih.shape != (4 * Hl, seq.shape[2]):
            raise ShapeError(f"lstm layer {l} w_ih: expected {(4 * Hl, seq.shape[2])}, got {p.w_ih.shape}")
        h = np.zeros((B, Hl), x.dtype) if h0 is None else h0[l]
        c = np.zeros((B, Hl), x.dtype) if c0 is None else c0[l]
        seq, cache = _lstm_layer_forward(seq, p, h, c)
        caches.append(cache)
    final_h = seq[:, -1].copy()
    return seq, final_h, LstmCache(caches, list(params), (B, T, H))


def _lstm_layer_backward(cache: _LstmLayerCache, p: LstmLayer, dh_seq):
    B, T, H = dh_seq.shape
    i, f, g, o, tc = cache.i, cache.f, cache.g, cache.o, cache.tanh_c
    da = np.empty((B, T, 4 * H), dh_seq.dtype)
    dh_next = np.zeros((B, H), dh_seq.dtype)
    dc_next = np.zeros((B, H), dh_seq.dtype)
    for t in range(T - 1, -1, -1):
        dh = dh_seq[:, t] + dh_next
        dc = dh * o[:, t] * (1.0 - tc[:, t] ** 2) + dc_next
        da[:, t, :H] = dc * g[:, t] * i[:, t] * (1.0 - i[:, t])
        da[:, t, H:2 * H] = dc * cache.c_prev[:, t] * f[:, t] * (1.0 - f[:, t])
        da[:, t, 2 * H:3 * H] = dc * i[:, t] * (1.0 - g[:, t] ** 2)
        da[:, t, 3 * H:] = dh * tc[:, t] * o[:, t] * (1.0 - o[:, t])
        dc_next = dc * f[:, t]
        dh_next = matmul(da[:, t].copy(), p.w_hh)
    da2 = da.reshape(B * T, 4 * H)
    grads = LstmLayer(
        w_ih=matmul(da2.T.copy(), cache.x.reshape(B * T, -1)),
        w_hh=matmul(da2.T.copy(), cache.h_prev.reshape(B * T, H)),
        b_ih=da2.sum(axis=0),
        b_hh=da2.sum(axis=0),
    )
    dx = matmul(da2, p.w_ih).reshape(B, T, -1)
    return dx, grads


def lstm_backward(cache: LstmCache, grad_hidden_seq=None, grad_final_h=None):
    """Backpropagation through time. Returns (grad_x, list of per-layer LstmLayer grads)."""
    _consume(cache)
    B, T, H = cache.out_shape
    dtype = cache.layers[0].x.dtype
    dh_seq = np.zeros((B, T, H), dtype) if grad_hidden_seq is None else grad_hidden_seq.copy()
    _expect_shape(dh_seq, (B, T, H), "lstm grad_hidden_seq")
    if grad_final_h is not None:
        _expect_shape(grad_final_h, (B, H), "lstm grad_final_h")
        dh_seq[:, -1] += grad_final_h
    grads = [None] * len(cache.layers)
    for l in range(len(cache.layers) - 1, -1, -1):
        dh_seq, grads[l] = _lstm_layer_backward(cache.layers[l], cache.params[l], dh_seq)
    return dh_seq, grads


# ---------------------------------------------------------------------------
# Fully connected


@dataclass
class LinearCache:
    x: np.ndarray
    weight: np.ndarray
    used: bool = False


def linear(x, weight, bias):
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    _expect_shape(bias, (weight.shape[0],), "linear bias")
    return matmul(x, weight.T.copy()) + bias, LinearCache(x, weight)


def linear_backward(cache: LinearCache, grad_out):
    _consume(cache)
    _expect_shape(grad_out, (cache.x.shape[0], cache.weight.shape[0]), "linear grad_out")
    grad_in = matmul(grad_out, cache.weight)
    grad_w = matmul(grad_out.T.copy(), cache.x)
    return grad_in, grad_w, grad_out.sum(axis=0)


# ---------------------------------------------------------------------------
# Inverted dropout


@dataclass
class DropoutCache:
    scale_mask: np.ndarray | None  # None in eval mode
    used: bool = False


def dropout(x, p: float = 0.5, mode: str = "train", rng: Rng | None = None):
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or p == 0.0:
        return x, DropoutCache(None)
    if rng is None:
        raise UsageError("train-mode dropout needs an Rng")
    keep = rng.uniform(x.size).reshape(x.shape) >= p
    scale_mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return x * scale_mask, DropoutCache(scale_mask)


def dropout_backward(cache: DropoutCache, grad_out):
    _consume(cache)
    if cache.scale_mask is None:
        return grad_out
    _expect_shape(grad_out, cache.scale_mask.shape, "dropout grad_out")
    return grad_out * cache.scale_mask


# ---------------------------------------------------------------------------
# Loss


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (B, K), got {logits.shape}")
    B, K = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (B,):
        raise ShapeError(f"labels must have shape ({B},), got {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= K):
        raise DataError(f"labels must lie in [0, {K})")
    check_finite(logits, "logits")
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(B)
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return loss, (grad / B).astype(logits.dtype)


def _consume(cache) -> None:
    if cache.used:
        raise UsageError(f"{type(cache).__name__} was already consumed by a backward pass")
    cache.used = True
