"""Central finite-difference checks for every backward pass (float64)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers as L
from . import model as M
from .tensor import Rng

H_STEP = 1e-5
# Denominator floor for the relative error, so coordinates whose true
# gradient is ~0 are judged by absolute error instead.
REL_FLOOR = 1e-8


def rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic) + abs(numeric), REL_FLOOR)


def sample_coords(shape: tuple, n: int, rng: Rng) -> list[tuple]:
    size = int(np.prod(shape))
    flat = rng.sample_sorted(size, min(n, size))
    return [np.unravel_index(i, shape) for i in flat]


def check_tensor(loss_fn: Callable[[], float], x: np.ndarray, analytic: np.ndarray,
                 n_coords: int, rng: Rng, h: float = H_STEP) -> float:
    """Max relative error between ``analytic`` and central differences of ``loss_fn``
    w.r.t. ``x`` (mutated in place and restored) over sampled coordinates."""
    worst = 0.0
    for idx in sample_coords(x.shape, n_coords, rng):
        orig = x[idx]
        x[idx] = orig + h
        plus = loss_fn()
        x[idx] = orig - h
        minus = loss_fn()
        x[idx] = orig
        worst = max(worst, rel_error(float(analytic[idx]), (plus - minus) / (2 * h)))
    return worst


@dataclass
class GradResult:
    name: str
    max_rel_error: float
    tolerance: float
    coords: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _randn(rng: Rng, *shape) -> np.ndarray:
    return rng.normal(int(np.prod(shape))).reshape(shape)


def _away_from_zero(rng: Rng, *shape) -> np.ndarray:
    x = _randn(rng, *shape)
    return np.sign(x) * (0.05 + np.abs(x))


def check_conv3d(rng: Rng, n: int) -> dict[str, float]:
    x, w, b = _randn(rng, 1, 2, 3, 4, 4), _randn(rng, 3, 2, 3, 3, 3), _randn(rng, 3)
    r = _randn(rng, 1, 3, 3, 4, 4)
    loss = lambda: float(np.sum(L.conv3d_forward(x, w, b)[0] * r))  # noqa: E731
    _, cache = L.conv3d_forward(x, w, b)
    gx, gw, gb = L.conv3d_backward(cache, r)
    return {"input": check_tensor(loss, x, gx, n, rng), "weight": check_tensor(loss, w, gw, n, rng),
            "bias": check_tensor(loss, b, gb, n, rng)}


def check_relu(rng: Rng, n: int) -> dict[str, float]:
    x = _away_from_zero(rng, 4, 6)
    r = _randn(rng, 4, 6)
    loss = lambda: float(np.sum(L.relu(x)[0] * r))  # noqa: E731
    _, cache = L.relu(x)
    return {"input": check_tensor(loss, x, L.relu_backward(cache, r), n, rng)}


def check_maxpool(rng: Rng, n: int) -> dict[str, float]:
    # distinct values spaced far wider than the step, so no ties arise
    vals = rng.permutation(2 * 2 * 2 * 4 * 4)
    x = (np.array(vals, dtype=np.float64) * 0.01).reshape(2, 2, 2, 4, 4)
    r = _randn(rng, 2, 2, 2, 2, 2)
    loss = lambda: float(np.sum(L.maxpool3d_forward(x)[0] * r))  # noqa: E731
    _, cache = L.maxpool3d_forward(x)
    return {"input": check_tensor(loss, x, L.maxpool3d_backward(cache, r), n, rng)}


def check_lstm(rng: Rng, n: int, B: int = 1, T: int = 3, D: int = 2, H: int = 2,
               layers: int = 2) -> dict[str, float]:
    x = _randn(rng, B, T, D)
    params = []
    d = D
    for _ in range(layers):
        params.append(L.LstmLayer(0.5 * _randn(rng, 4 * H, d), 0.5 * _randn(rng, 4 * H, H),
                                  0.5 * _randn(rng, 4 * H), 0.5 * _randn(rng, 4 * H)))
        d = H
    r_seq, r_fin = _randn(rng, B, T, H), _randn(rng, B, H)

    def loss():
        seq, fin, _ = L.lstm_forward(x, params)
        return float(np.sum(seq * r_seq) + np.sum(fin * r_fin))

    _, _, cache = L.lstm_forward(x, params)
    gx, grads = L.lstm_backward(cache, r_seq, r_fin)
    out = {"input": check_tensor(loss, x, gx, n, rng)}
    for l, (p, g) in enumerate(zip(params, grads)):
        for field in ("w_ih", "w_hh", "b_ih", "b_hh"):
            out[f"{l}.{field}"] = check_tensor(loss, getattr(p, field), getattr(g, field), n, rng)
    return out


def check_linear(rng: Rng, n: int) -> dict[str, float]:
    x, w, b = _randn(rng, 3, 5), _randn(rng, 4, 5), _randn(rng, 4)
    r = _randn(rng, 3, 4)
    loss = lambda: float(np.sum(L.linear(x, w, b)[0] * r))  # noqa: E731
    _, cache = L.linear(x, w, b)
    gx, gw, gb = L.linear_backward(cache, r)
    return {"input": check_tensor(loss, x, gx, n, rng), "weight": check_tensor(loss, w, gw, n, rng),
            "bias": check_tensor(loss, b, gb, n, rng)}


def check_softmax_ce(rng: Rng, n: int) -> dict[str, float]:
    logits = _randn(rng, 4, 5)
    labels = np.array([0, 3, 1, 4])
    loss = lambda: L.softmax_cross_entropy(logits, labels)[0]  # noqa: E731
    _, grad = L.softmax_cross_entropy(logits, labels)
    return {"logits": check_tensor(loss, logits, grad, n, rng)}


def check_model(rng: Rng, n: int, config: M.ModelConfig | None = None, batch: int = 2
                ) -> dict[str, float]:
    """Whole-network check; dropout uses the same mask for every evaluation."""
    config = config or M.ModelConfig()
    model = M.build(config, rng.derive("init"), dtype=np.float64)
    x = rng.uniform(batch * 3 * config.frames * config.height * config.width).reshape(
        batch, 3, config.frames, config.height, config.width)
    labels = np.arange(batch) % config.num_classes
    drop_seed = rng.derive("dropout").seed

    def loss():
        logits, _ = M.forward(model, x, "train", Rng(drop_seed))
        return L.softmax_cross_entropy(logits, labels)[0]

    logits, cache = M.forward(model, x, "train", Rng(drop_seed))
    _, g = L.softmax_cross_entropy(logits, labels)
    grads = M.backward(model, cache, g)
    return {name: check_tensor(loss, model.params[name], grads[name], n, rng)
            for name in model.params}


LAYER_CHECKS = {
    "conv3d": check_conv3d,
    "relu": check_relu,
    "maxpool3d": check_maxpool,
    "lstm": check_lstm,
    "linear": check_linear,
    "softmax_cross_entropy": check_softmax_ce,
}


def run_gradient_suite(seed: int = 0, coords: int = 20, include_model: bool = True,
                       layer_tol: float = 1e-4, model_tol: float = 1e-3) -> list[GradResult]:
    rng = Rng(seed).derive("gradcheck")
    results = []
    for name, fn in LAYER_CHECKS.items():
        errs = fn(rng.derive(name), coords)
        results.append(GradResult(name, max(errs.values()), layer_tol, coords))
    if include_model:
        errs = check_model(rng.derive("model"), coords)
        results.append(GradResult("model", max(errs.values()), model_tol, coords))
    return results
