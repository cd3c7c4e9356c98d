"""SLCK binary checkpoint format.

Little-endian throughout::

    magic      b"SLCK"
    version    u16 (= 1)
    cfg_len    u32, then cfg_len bytes of UTF-8 JSON {"model": {...}, "glosses": [...]}
    count      u32
    count x:   name_len u16, name (UTF-8), ndim u8, ndim x u32 dims,
               dtype u8 (0 = float32, 1 = float64), raw element bytes
    epoch      u32
    best_loss  f32
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError
from .model import ModelConfig, SignNet, param_shapes

MAGIC = b"SLCK"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class CheckpointMeta:
    epoch: int = 0
    best_val_loss: float = math.inf
    glosses: list = field(default_factory=list)


def _config_blob(model: SignNet, meta: CheckpointMeta) -> bytes:
    doc = {"model": model.config.to_dict(), "glosses": list(meta.glosses)}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode(model: SignNet, meta: CheckpointMeta) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION)]
    blob = _config_blob(model, meta)
    parts += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(model.params))]
    for name, arr in model.params.items():
        raw_name = name.encode("utf-8")
        code = _DTYPE_CODES[arr.dtype]
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", code))
        parts.append(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())
    parts.append(struct.pack("<If", meta.epoch, meta.best_val_loss))
    return b"".join(parts)


def save_checkpoint(model: SignNet, meta: CheckpointMeta, path) -> None:
    data = encode(model, meta)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes, path: str | None):
        self.data = data
        self.pos = 0
        self.path = path

    def fail(self, message: str, offset: int | None = None):
        raise FormatError(message, self.pos if offset is None else offset, self.path)

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            self.fail(f"truncated {what}: need {n} bytes, {len(self.data) - self.pos} left")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        values = struct.unpack(fmt, self.take(struct.calcsize(fmt), what))
        return values[0] if len(values) == 1 else values


def decode(data: bytes, path: str | None = None) -> tuple[SignNet, CheckpointMeta]:
    r = _Reader(data, path)
    if r.take(4, "magic") != MAGIC:
        r.fail("bad magic, expected b'SLCK'", 0)
    version = r.unpack("<H", "version")
    if version != VERSION:
        r.fail(f"unsupported version {version}", 4)
    blob_len = r.unpack("<I", "config length")
    blob_at = r.pos
    try:
        doc = json.loads(r.take(blob_len, "config blob").decode("utf-8"))
        config = ModelConfig.from_dict(doc["model"]).validate()
        glosses = list(doc.get("glosses", []))
    except (ValueError, KeyError, TypeError) as exc:
        r.fail(f"invalid config blob: {exc}", blob_at)
    expected = param_shapes(config)

    count_at = r.pos
    count = r.unpack("<I", "tensor count")
    if count != len(expected):
        r.fail(f"config implies {len(expected)} tensors, file has {count}", count_at)
    params = {}
    for _ in range(count):
        name_at = r.pos
        name_len = r.unpack("<H", "tensor name length")
        try:
            name = r.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            r.fail("tensor name is not UTF-8", name_at)
        if name not in expected or name in params:
            r.fail(f"unexpected tensor {name!r}", name_at)
        dims_at = r.pos
        ndim = r.unpack("<B", "ndim")
        dims = tuple(struct.unpack(f"<{ndim}I", r.take(4 * ndim, "dims")))
        if dims != expected[name]:
            r.fail(f"tensor {name!r} has shape {dims}, config requires {expected[name]}", dims_at)
        code_at = r.pos
        code = r.unpack("<B", "dtype")
        if code not in _CODE_DTYPES:
            r.fail(f"unknown dtype code {code}", code_at)
        dt = _CODE_DTYPES[code]
        raw = r.take(math.prod(dims) * dt.itemsize, f"data of tensor {name!r}")
        params[name] = np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    epoch, best = r.unpack("<If", "trailing metadata")
    if r.pos != len(data):
        r.fail(f"{len(data) - r.pos} trailing bytes after metadata")
    ordered = {name: params[name] for name in expected}
    return SignNet(config, ordered), CheckpointMeta(epoch, float(best), glosses)


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> tuple[SignNet, CheckpointMeta]:
    """Read a checkpoint. A differing ``expected_config`` raises ConfigError."""
    with open(path, "rb") as fh:
        data = fh.read()
    model, meta = decode(data, str(path))
    if expected_config is not None and expected_config.to_dict() != model.config.to_dict():
        raise ConfigError(f"{path}: checkpoint config {model.config.to_dict()} "
                          f"does not match requested config {expected_config.to_dict()}")
    return model, meta
