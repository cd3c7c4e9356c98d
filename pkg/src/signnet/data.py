"""Clip I/O, preprocessing, augmentation, dataset splitting and batching.

Clips are stored in the SLRC container (little-endian)::

    magic b"SLRC" | version u16 = 1 | channels u16 = 3 |
    num_frames u32 | height u32 | width u32 | u8 pixels (T, H, W, 3)

Pixels are frame-major, row-major within a frame, RGB interleaved, so the
file size is always ``20 + T * H * W * 3`` bytes.

A manifest is JSON lines, one ``{"path", "label", "gloss"}`` object per clip.
Relative paths are resolved against the manifest's directory.
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError, ParameterError
from .model import ModelConfig
from .tensor import Rng

SLRC_MAGIC = b"SLRC"
SLRC_VERSION = 1
HEADER_SIZE = 20
_HEADER = struct.Struct("<4sHHIII")
# Refuse headers that would claim more than 4 GiB of pixels.
MAX_PIXEL_BYTES = 1 << 32


@dataclass
class Clip:
    frames: np.ndarray  # uint8 (T, H, W, 3)
    fps: float = 30.0

    def __post_init__(self):
        f = self.frames
        if f.dtype != np.uint8 or f.ndim != 4 or f.shape[3] != 3 or min(f.shape) < 1:
            raise DataError(f"clip frames must be uint8 (T, H, W, 3) with all dims >= 1, "
                            f"got {f.dtype} {f.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class ClipRecord:
    path: str
    label: int
    gloss: str = ""


# ---------------------------------------------------------------------------
# SLRC files and manifests


def encode_clip(clip: Clip) -> bytes:
    T, H, W, C = clip.frames.shape
    header = _HEADER.pack(SLRC_MAGIC, SLRC_VERSION, C, T, H, W)
    return header + np.ascontiguousarray(clip.frames).tobytes()


def save_clip(clip: Clip, path) -> None:
    Path(path).write_bytes(encode_clip(clip))


def decode_clip(data: bytes, path: str | None = None) -> Clip:
    if len(data) < 4 or data[:4] != SLRC_MAGIC:
        raise FormatError("bad magic, expected b'SLRC'", 0, path)
    if len(data) < HEADER_SIZE:
        raise FormatError(f"truncated header: {len(data)} of {HEADER_SIZE} bytes", len(data), path)
    _, version, channels, T, H, W = _HEADER.unpack_from(data)
    if version != SLRC_VERSION:
        raise FormatError(f"unsupported version {version}", 4, path)
    if channels != 3:
        raise FormatError(f"expected 3 channels, got {channels}", 6, path)
    for offset, name, value in ((8, "num_frames", T), (12, "height", H), (16, "width", W)):
        if value < 1:
            raise FormatError(f"{name} must be >= 1", offset, path)
    expected = T * H * W * channels
    if expected > MAX_PIXEL_BYTES:
        raise FormatError(f"declared payload of {expected} bytes overflows the limit", 8, path)
    payload = len(data) - HEADER_SIZE
    if payload < expected:
        raise FormatError(f"truncated pixel data: {payload} of {expected} bytes", len(data), path)
    if payload > expected:
        raise FormatError(f"{payload - expected} trailing bytes", HEADER_SIZE + expected, path)
    frames = np.frombuffer(data, dtype=np.uint8, offset=HEADER_SIZE).reshape(T, H, W, channels)
    return Clip(frames.copy())


def load_clip(path) -> Clip:
    return decode_clip(Path(path).read_bytes(), str(path))


def read_manifest(path) -> list[ClipRecord]:
    path = Path(path)
    base = path.parent
    records = []
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            clip_path = Path(obj["path"])
            label = obj["label"]
            gloss = str(obj.get("gloss", ""))
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: malformed manifest line ({exc})") from exc
        if not isinstance(label, int) or isinstance(label, bool) or label < 0:
            raise DataError(f"{path}:{lineno}: label must be a non-negative integer")
        if not clip_path.is_absolute():
            clip_path = base / clip_path
        records.append(ClipRecord(str(clip_path), label, gloss))
    return records


def write_manifest(records: Sequence[ClipRecord], path, relative_to=None) -> None:
    lines = []
    for r in records:
        p = r.path
        if relative_to is not None:
            p = Path(p).relative_to(relative_to).as_posix()
        lines.append(json.dumps({"path": str(p), "label": r.label, "gloss": r.gloss}))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def glosses_from_records(records: Sequence[ClipRecord], num_classes: int) -> list[str]:
    glosses = [f"class_{k}" for k in range(num_classes)]
    for r in records:
        if r.gloss and r.label < num_classes:
            glosses[r.label] = r.gloss
    return glosses


# ---------------------------------------------------------------------------
# Preprocessing


def _round_u8(x: np.ndarray) -> np.ndarray:
    """Round half up and clamp to [0, 255]."""
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def _axis_weights(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(clip: Clip, out_h: int, out_w: int) -> Clip:
    """Bilinear resize of every frame (half-pixel centres, edge clamped)."""
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"output size must be >= 1, got {out_h}x{out_w}")
    T, H, W, _ = clip.frames.shape
    if (H, W) == (out_h, out_w):
        return Clip(clip.frames.copy(), clip.fps)
    y0, y1, wy = _axis_weights(H, out_h)
    x0, x1, wx = _axis_weights(W, out_w)
    f = clip.frames.astype(np.float64)
    rows = f[:, y0] * (1 - wy)[None, :, None, None] + f[:, y1] * wy[None, :, None, None]
    out = rows[:, :, x0] * (1 - wx)[None, None, :, None] + rows[:, :, x1] * wx[None, None, :, None]
    return Clip(_round_u8(out), clip.fps)


def normalize(clip: Clip) -> np.ndarray:
    """uint8 (T, H, W, 3) -> float32 (3, T, H, W) in [0, 1]."""
    return np.ascontiguousarray(clip.frames.transpose(3, 0, 1, 2)).astype(np.float32) / np.float32(255.0)


def denormalize(x: np.ndarray) -> Clip:
    return Clip(_round_u8(np.asarray(x, dtype=np.float64).transpose(1, 2, 3, 0) * 255.0))


def standardize_indices(num_frames: int, target: int, mode: str = "deterministic",
                        rng: Rng | None = None) -> list[int]:
    """Source frame index for each of the ``target`` output frames."""
    if target < 1:
        raise ParameterError(f"target frame count must be >= 1, got {target}")
    if mode not in ("deterministic", "random"):
        raise ParameterError(f"unknown temporal mode {mode!r}")
    if mode == "random" and num_frames > target:
        if rng is None:
            raise ParameterError("random temporal sampling needs an Rng")
        return rng.sample_sorted(num_frames, target)
    return [i * num_frames // target for i in range(target)]


def temporal_standardize(clip: Clip, target: int, mode: str = "deterministic",
                         rng: Rng | None = None) -> Clip:
    idx = standardize_indices(clip.num_frames, target, mode, rng)
    return Clip(clip.frames[idx], clip.fps)


# ---------------------------------------------------------------------------
# Augmentation


@dataclass
class AugmentSpec:
    flip_prob: float = 0.5
    rotation_max_deg: float = 15.0
    brightness_range: float = 0.2
    contrast_range: float = 0.2
    translate_max_frac: float = 0.1

    def validate(self) -> "AugmentSpec":
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if not 0.0 <= self.rotation_max_deg <= 15.0:
            raise ConfigError(f"rotation_max_deg must be in [0, 15], got {self.rotation_max_deg}")
        for name in ("brightness_range", "contrast_range"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in [0, 1)")
        if not 0.0 <= self.translate_max_frac < 0.5:
            raise ConfigError("translate_max_frac must be in [0, 0.5)")
        return self

    @classmethod
    def identity(cls) -> "AugmentSpec":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class AugmentDraw:
    flip: bool
    angle_deg: float
    brightness: float
    contrast: float
    shift_x: float  # pixels
    shift_y: float


def draw_augment(spec: AugmentSpec, rng: Rng, height: int, width: int) -> AugmentDraw:
    """One parameter set per clip. All six values are always drawn, in order."""
    u = rng.uniform(6)
    sym = lambda v, r: (2.0 * v - 1.0) * r  # noqa: E731
    return AugmentDraw(
        flip=bool(u[0] < spec.flip_prob),
        angle_deg=sym(u[1], spec.rotation_max_deg),
        brightness=sym(u[2], spec.brightness_range),
        contrast=sym(u[3], spec.contrast_range),
        shift_x=sym(u[4], spec.translate_max_frac) * width,
        shift_y=sym(u[5], spec.translate_max_frac) * height,
    )


def hflip(clip: Clip) -> Clip:
    return Clip(np.ascontiguousarray(clip.frames[:, :, ::-1]), clip.fps)


def _affine(frames: np.ndarray, angle_deg: float, shift_x: float, shift_y: float) -> np.ndarray:
    """Rotate about the frame centre, then translate; bilinear, zero fill."""
    T, H, W, C = frames.shape
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    th = math.radians(angle_deg)
    cos, sin = math.cos(th), math.sin(th)
    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    dx = xx - cx - shift_x
    dy = yy - cy - shift_y
    # inverse rotation maps each output pixel back to its source
    sx = cos * dx + sin * dy + cx
    sy = -sin * dx + cos * dy + cy
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    wx = sx - x0
    wy = sy - y0
    src = frames.astype(np.float64)
    out = np.zeros((T, H, W, C))
    for oy, ox, w in ((0, 0, (1 - wy) * (1 - wx)), (0, 1, (1 - wy) * wx),
                      (1, 0, wy * (1 - wx)), (1, 1, wy * wx)):
        yi, xi = y0 + oy, x0 + ox
        valid = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W) & (w > 0)
        if not valid.any():
            continue
        vals = src[:, np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1)]
        out += np.where(valid[None, :, :, None], vals * w[None, :, :, None], 0.0)
    return out


def apply_augment(clip: Clip, d: AugmentDraw) -> Clip:
    frames = clip.frames[:, :, ::-1] if d.flip else clip.frames
    x = _affine(frames, d.angle_deg, d.shift_x, d.shift_y)
    x = np.clip((x - 128.0) * (1.0 + d.contrast) + 128.0, 0.0, 255.0) * (1.0 + d.brightness)
    return Clip(_round_u8(x), clip.fps)


def augment(clip: Clip, spec: AugmentSpec, rng: Rng) -> Clip:
    """Draw one transform and apply it identically to every frame."""
    _, H, W, _ = clip.frames.shape
    return apply_augment(clip, draw_augment(spec, rng, H, W))


# ---------------------------------------------------------------------------
# Splitting and batching


def split_dataset(records: Sequence[ClipRecord], ratio: float = 0.8, seed: int = 0):
    """Stratified split: per class, floor(ratio * n) records go to train."""
    if len(records) < 2:
        raise DataError(f"need at least 2 records to split, got {len(records)}")
    if not 0.0 < ratio < 1.0:
        raise ParameterError(f"split ratio must be in (0, 1), got {ratio}")
    rng = Rng(seed).derive("split")
    by_label: dict[int, list[ClipRecord]] = {}
    for r in records:
        by_label.setdefault(r.label, []).append(r)
    train, val = [], []
    for label in sorted(by_label):
        group = rng.derive(label).shuffle(by_label[label])
        n = len(group)
        k = math.floor(ratio * n)
        if n >= 2:
            k = min(max(k, 1), n - 1)
        else:
            k = n
        train.extend(group[:k])
        val.extend(group[k:])
    return train, val


class Pipeline:
    """load -> resize -> temporal standardize -> (augment) -> normalize."""

    def __init__(self, config: ModelConfig, augment_spec: AugmentSpec | None = None,
                 train: bool = False):
        self.config = config
        self.augment_spec = augment_spec
        self.train = train

    def transform(self, clip: Clip, rng: Rng | None = None) -> np.ndarray:
        cfg = self.config
        clip = resize_bilinear(clip, cfg.height, cfg.width)
        if self.train:
            clip = temporal_standardize(clip, cfg.frames, "random", rng.derive("temporal"))
            if self.augment_spec is not None:
                clip = augment(clip, self.augment_spec, rng.derive("augment"))
        else:
            clip = temporal_standardize(clip, cfg.frames, "deterministic")
        return normalize(clip)

    def load(self, record: ClipRecord, rng: Rng | None = None) -> np.ndarray:
        try:
            clip = load_clip(record.path)
        except (OSError, FormatError) as exc:
            raise DataError(f"cannot read record {record.path}: {exc}") from exc
        return self.transform(clip, rng)


def eval_transform(clip: Clip, config: ModelConfig) -> np.ndarray:
    """The deterministic inference preprocessing shared by eval and streaming."""
    return Pipeline(config).transform(clip)


def batch_iter(records: Sequence[ClipRecord], batch_size: int, shuffle: bool,
               rng: Rng | None, pipeline: Pipeline, workers: int = 0
               ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (clips (B, 3, T, H, W), labels (B,)); the last batch may be short.

    Record ``i`` (by position in ``records``) gets the stream ``rng.derive("record", i)``,
    so results do not depend on ``workers``.
    """
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    if (shuffle or pipeline.train) and rng is None:
        raise ParameterError("shuffling or training pipelines need an Rng")
    order = rng.derive("order").permutation(len(records)) if shuffle else list(range(len(records)))

    def work(i: int) -> np.ndarray:
        sub = rng.derive("record", i) if rng is not None else None
        return pipeline.load(records[i], sub)

    pool = ThreadPoolExecutor(workers) if workers > 0 else None
    try:
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            tensors = list(pool.map(work, chunk)) if pool else [work(i) for i in chunk]
            labels = np.array([records[i].label for i in chunk], dtype=np.int64)
            yield np.stack(tensors), labels
    finally:
        if pool:
            pool.shutdown()


# ---------------------------------------------------------------------------
# Synthetic motion dataset

_BASE_ARCHETYPES = [
    ("DOWN", "translate", 0, 1),
    ("UP", "translate", 0, -1),
    ("WAVE_H", "oscillate", 1, 1),
    ("WAVE_V", "oscillate", 0, 1),
    ("HOLD", "hold", 0, 0),
]


def archetype(k: int) -> tuple[str, str, int, int]:
    """(gloss, kind, axis, param) for class ``k``.

    Axis 0 is vertical, 1 horizontal. Every archetype keeps its identity under
    horizontal flipping, so flip augmentation never changes a label.
    """
    if k < len(_BASE_ARCHETYPES):
        return _BASE_ARCHETYPES[k]
    j = k - len(_BASE_ARCHETYPES)
    axis = 1 - j % 2
    cycles = 2 + j // 2
    return (f"WAVE_{'H' if axis else 'V'}{cycles}", "oscillate", axis, cycles)


def _trajectory(k: int, T: int, H: int, W: int, u: np.ndarray):
    _, kind, axis, param = archetype(k)
    t = np.arange(T) / max(T - 1, 1)
    if kind == "translate":
        x = np.full(T, (0.3 + 0.4 * u[0]) * W)
        start = (0.15 + 0.15 * u[1]) * H
        travel = (0.4 + 0.15 * u[2]) * H
        y = start + travel * t
        if param < 0:
            y = y[::-1]
        return y, x
    if kind == "oscillate":
        phase = 2 * math.pi * u[0]
        amp = 0.2 + 0.1 * u[1]
        ang = 2 * math.pi * param * np.arange(T) / T + phase
        cy = (0.4 + 0.2 * u[2]) * H
        cx = (0.4 + 0.2 * u[3]) * W
        if axis == 1:
            return np.full(T, cy), cx + amp * W * np.sin(ang)
        return cy + amp * H * np.sin(ang), np.full(T, cx)
    # hold: fixed position with sub-pixel jitter
    y = (0.3 + 0.4 * u[0]) * H + (u[4] - 0.5) * np.sin(np.arange(T) * 2.1)
    x = (0.3 + 0.4 * u[1]) * W + (u[5] - 0.5) * np.cos(np.arange(T) * 1.7)
    return y, x


def render_clip(k: int, T: int, H: int, W: int, rng: Rng) -> Clip:
    """A bright soft-edged blob moving over a dark, noisy background."""
    u = rng.uniform(6)
    radius = (0.08 + 0.06 * rng.random()) * min(H, W)
    colour = 200.0 + 55.0 * rng.uniform(3)
    background = 10.0 + 30.0 * rng.random()
    ys, xs = _trajectory(k, T, H, W, u)
    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    d = np.sqrt((yy[None] - ys[:, None, None]) ** 2 + (xx[None] - xs[:, None, None]) ** 2)
    alpha = np.clip(radius + 0.5 - d, 0.0, 1.0)[..., None]
    noise = rng.uniform(T * H * W * 3, -12.0, 12.0).reshape(T, H, W, 3)
    frames = background * (1 - alpha) + colour[None, None, None, :] * alpha + noise
    return Clip(_round_u8(frames))


def synth_generate(num_classes: int, clips_per_class: int, T: int, H: int, W: int,
                   seed: int, out_dir) -> list[ClipRecord]:
    """Write ``num_classes * clips_per_class`` SLRC clips plus ``manifest.jsonl``."""
    if num_classes < 2:
        raise ParameterError(f"need at least 2 classes, got {num_classes}")
    if clips_per_class < 1 or min(T, H, W) < 1:
        raise ParameterError("clips_per_class, T, H and W must be >= 1")
    out = Path(out_dir)
    clip_dir = out / "clips"
    clip_dir.mkdir(parents=True, exist_ok=True)
    root = Rng(seed).derive("synth")
    records = []
    for k in range(num_classes):
        gloss = archetype(k)[0]
        for i in range(clips_per_class):
            clip = render_clip(k, T, H, W, root.derive(k, i))
            path = clip_dir / f"c{k:02d}_{i:04d}.slrc"
            save_clip(clip, path)
            records.append(ClipRecord(str(path), k, gloss))
    write_manifest(records, out / "manifest.jsonl", relative_to=out)
    return records
