"""The 3D CNN-LSTM sign classifier: configuration, parameters, forward/backward.

Pipeline per clip batch (B, 3, T, H, W):

    3 x [conv3d 3x3x3 -> relu -> maxpool (1, 2, 2)]
    -> per-frame flatten (B, T, c3 * H/8 * W/8)
    -> stacked LSTM, final hidden state (B, hidden)
    -> fc1 -> relu -> dropout -> fc2 -> logits (B, num_classes)
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import layers as L
from .errors import ConfigError, ShapeError, UsageError
from .tensor import Rng, check_finite

NUM_POOLS = 3


@dataclass
class ModelConfig:
    in_channels: int = 3
    conv_channels: list = field(default_factory=lambda: [8, 16, 32])
    lstm_hidden: int = 32
    lstm_layers: int = 2
    fc_hidden: int = 256
    num_classes: int = 5
    frames: int = 8
    height: int = 32
    width: int = 32
    dropout_p: float = 0.5

    @classmethod
    def full(cls, num_classes: int = 100) -> "ModelConfig":
        """Full-size architecture. Used for analytic shape/parameter accounting only."""
        return cls(conv_channels=[64, 128, 256], lstm_hidden=512, num_classes=num_classes,
                   frames=30, height=224, width=224)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.conv_channels = list(cfg.conv_channels)
        return cfg

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["conv_channels"] = list(d["conv_channels"])
        return d

    def validate(self) -> "ModelConfig":
        ints = dict(in_channels=self.in_channels, lstm_hidden=self.lstm_hidden,
                    lstm_layers=self.lstm_layers, fc_hidden=self.fc_hidden,
                    frames=self.frames, height=self.height, width=self.width)
        for name, v in ints.items():
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if len(self.conv_channels) != NUM_POOLS or any(
                not isinstance(c, int) or c < 1 for c in self.conv_channels):
            raise ConfigError(f"conv_channels must be {NUM_POOLS} positive integers")
        if not isinstance(self.num_classes, int) or self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes!r}")
        div = 2 ** NUM_POOLS
        if self.height % div or self.width % div:
            raise ConfigError(f"height and width must be divisible by {div}, "
                              f"got {self.height}x{self.width}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        return self

    @property
    def feature_size(self) -> int:
        """Per-frame flattened CNN feature length fed to the LSTM."""
        s = 2 ** NUM_POOLS
        return self.conv_channels[-1] * (self.height // s) * (self.width // s)


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Name -> shape for every parameter, in canonical order."""
    config.validate()
    shapes: dict[str, tuple] = {}
    c_in = config.in_channels
    for n, c_out in enumerate(config.conv_channels, start=1):
        shapes[f"conv{n}.weight"] = (c_out, c_in, 3, 3, 3)
        shapes[f"conv{n}.bias"] = (c_out,)
        c_in = c_out
    H = config.lstm_hidden
    d_in = config.feature_size
    for l in range(config.lstm_layers):
        shapes[f"lstm.{l}.w_ih"] = (4 * H, d_in)
        shapes[f"lstm.{l}.w_hh"] = (4 * H, H)
        shapes[f"lstm.{l}.b_ih"] = (4 * H,)
        shapes[f"lstm.{l}.b_hh"] = (4 * H,)
        d_in = H
    shapes["fc1.weight"] = (config.fc_hidden, H)
    shapes["fc1.bias"] = (config.fc_hidden,)
    shapes["fc2.weight"] = (config.num_classes, config.fc_hidden)
    shapes["fc2.bias"] = (config.num_classes,)
    return shapes


def param_count(config: ModelConfig) -> dict[str, int]:
    """Per-layer and total parameter counts, from closed-form expressions."""
    config.validate()
    counts: dict[str, int] = {}
    c_in = config.in_channels
    for n, c_out in enumerate(config.conv_channels, start=1):
        counts[f"conv{n}"] = c_out * c_in * 27 + c_out
        c_in = c_out
    H = config.lstm_hidden
    d_in = config.feature_size
    lstm_total = 0
    for l in range(config.lstm_layers):
        n = 4 * H * (d_in + H) + 8 * H
        counts[f"lstm.{l}"] = n
        lstm_total += n
        d_in = H
    counts["lstm"] = lstm_total
    counts["fc1"] = config.fc_hidden * H + config.fc_hidden
    counts["fc2"] = config.num_classes * config.fc_hidden + config.num_classes
    counts["total"] = (sum(counts[f"conv{n}"] for n in range(1, NUM_POOLS + 1))
                       + lstm_total + counts["fc1"] + counts["fc2"])
    return counts


def infer_shapes(config: ModelConfig, batch: Any = "B") -> list[tuple[str, tuple]]:
    """Output shape after each stage, including the input."""
    config.validate()
    T, Hs, Ws = config.frames, config.height, config.width
    rows = [("input", (batch, config.in_channels, T, Hs, Ws))]
    for n, c in enumerate(config.conv_channels, start=1):
        Hs, Ws = Hs // 2, Ws // 2
        rows.append((f"conv{n}", (batch, c, T, Hs, Ws)))
    rows.append(("lstm", (batch, T, config.lstm_hidden)))
    rows.append(("classifier", (batch, config.num_classes)))
    return rows


@dataclass
class SignNet:
    config: ModelConfig
    params: dict[str, np.ndarray]

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def lstm_params(self) -> list[L.LstmLayer]:
        p = self.params
        return [L.LstmLayer(p[f"lstm.{l}.w_ih"], p[f"lstm.{l}.w_hh"],
                            p[f"lstm.{l}.b_ih"], p[f"lstm.{l}.b_hh"])
                for l in range(self.config.lstm_layers)]

    def astype(self, dtype) -> "SignNet":
        return SignNet(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "SignNet":
        return SignNet(self.config, {k: v.copy() for k, v in self.params.items()})


def build(config: ModelConfig, rng: Rng, dtype=np.float32) -> SignNet:
    """Initialise a network: He-uniform conv/linear weights, zero biases,
    uniform(+-1/sqrt(H)) for all LSTM weights and biases."""
    shapes = param_shapes(config)
    lstm_bound = 1.0 / math.sqrt(config.lstm_hidden)
    params = {}
    for name, shape in shapes.items():
        n = math.prod(shape)
        if name.startswith("lstm."):
            values = rng.uniform(n, -lstm_bound, lstm_bound)
        elif name.endswith(".bias"):
            values = np.zeros(n)
        else:
            fan_in = math.prod(shape[1:])
            bound = math.sqrt(6.0 / fan_in)
            values = rng.uniform(n, -bound, bound)
        params[name] = values.reshape(shape).astype(dtype)
    return SignNet(config, params)


@dataclass
class ForwardCache:
    mode: str
    stages: dict = field(default_factory=dict)
    used: bool = False


def forward(model: SignNet, clips: np.ndarray, mode: str = "eval", rng: Rng | None = None):
    """Run the network. ``mode='train'`` keeps the intermediates for backward."""
    cfg = model.config
    expected = (cfg.in_channels, cfg.frames, cfg.height, cfg.width)
    if clips.ndim != 5 or tuple(clips.shape[1:]) != expected:
        raise ShapeError(f"input must be (B, {', '.join(map(str, expected))}), got {clips.shape}")
    if mode not in ("train", "eval"):
        raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
    p = model.params
    x = clips.astype(model.dtype, copy=False)
    st = {}
    for n in range(1, NUM_POOLS + 1):
        x, st[f"conv{n}"] = L.conv3d_forward(x, p[f"conv{n}.weight"], p[f"conv{n}.bias"])
        x, st[f"relu{n}"] = L.relu(x)
        x, st[f"pool{n}"] = L.maxpool3d_forward(x)
    B, C, T, Hh, Ww = x.shape
    st["feature_shape"] = x.shape
    seq = np.ascontiguousarray(x.transpose(0, 2, 1, 3, 4)).reshape(B, T, C * Hh * Ww)
    _, h_final, st["lstm"] = L.lstm_forward(seq, model.lstm_params())
    z, st["fc1"] = L.linear(h_final, p["fc1.weight"], p["fc1.bias"])
    z, st["relu_fc"] = L.relu(z)
    z, st["dropout"] = L.dropout(z, cfg.dropout_p, mode, rng)
    logits, st["fc2"] = L.linear(z, p["fc2.weight"], p["fc2.bias"])
    check_finite(logits, "logits")
    return logits, ForwardCache(mode, st if mode == "train" else {})


def backward(model: SignNet, cache: ForwardCache, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradient of the loss w.r.t. every parameter, keyed like ``model.params``."""
    if cache.mode != "train":
        raise UsageError("backward needs the cache of a train-mode forward pass")
    if cache.used:
        raise UsageError("forward cache was already consumed")
    cache.used = True
    st = cache.stages
    g: dict[str, np.ndarray] = {}
    d, g["fc2.weight"], g["fc2.bias"] = L.linear_backward(st["fc2"], grad_logits)
    d = L.dropout_backward(st["dropout"], d)
    d = L.relu_backward(st["relu_fc"], d)
    d, g["fc1.weight"], g["fc1.bias"] = L.linear_backward(st["fc1"], d)
    d_seq, lstm_grads = L.lstm_backward(st["lstm"], None, d)
    for l, lg in enumerate(lstm_grads):
        g[f"lstm.{l}.w_ih"], g[f"lstm.{l}.w_hh"] = lg.w_ih, lg.w_hh
        g[f"lstm.{l}.b_ih"], g[f"lstm.{l}.b_hh"] = lg.b_ih, lg.b_hh
    B, C, T, Hh, Ww = st["feature_shape"]
    d = np.ascontiguousarray(d_seq.reshape(B, T, C, Hh, Ww).transpose(0, 2, 1, 3, 4))
    for n in range(NUM_POOLS, 0, -1):
        d = L.maxpool3d_backward(st[f"pool{n}"], d)
        d = L.relu_backward(st[f"relu{n}"], d)
        d, g[f"conv{n}.weight"], g[f"conv{n}.bias"] = L.conv3d_backward(st[f"conv{n}"], d)
    return {name: g[name] for name in model.params}


def predict_proba(model: SignNet, clips: np.ndarray) -> np.ndarray:
    """Eval-mode softmax probabilities, float64."""
    logits, _ = forward(model, clips, "eval")
    return L.softmax(logits.astype(np.float64))
