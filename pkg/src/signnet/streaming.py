"""Sliding-window inference over a live frame stream.

Frames enter a bounded ring buffer. Once ``window`` frames have been seen, a
prediction is made every ``stride`` frames: the window is resized, resampled
to the model's frame count with the deterministic floor map, normalised and
classified. For N frames this gives ``1 + (N - window) // stride`` predictions
when N >= window, else none.
"""

from __future__ import annotations

import json
import queue
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from . import model as M
from .data import Clip, eval_transform, load_clip
from .errors import ConfigError, StreamError

DEFAULT_WINDOW = 16
DEFAULT_STRIDE = 8


class FrameRing:
    """Fixed-capacity frame buffer; evicts oldest first."""

    def __init__(self, capacity: int, window: int = DEFAULT_WINDOW):
        if window < 1 or capacity < window:
            raise ConfigError(f"need 1 <= window <= capacity, got window={window}, capacity={capacity}")
        self.capacity = capacity
        self.window = window
        self.frames: deque = deque(maxlen=capacity)
        self.total_seen = 0
        self.frame_shape: tuple | None = None

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def ready(self) -> bool:
        return self.total_seen >= self.window

    def latest(self, n: int) -> np.ndarray:
        if n > len(self.frames):
            raise StreamError(f"only {len(self.frames)} frames buffered, {n} requested")
        return np.stack(list(self.frames)[-n:])


def push_frame(ring: FrameRing, frame: np.ndarray) -> str:
    """Append a (H, W, 3) uint8 frame. Returns ``"filling"`` or ``"ready"``."""
    frame = np.asarray(frame)
    if frame.dtype != np.uint8 or frame.ndim != 3 or frame.shape[2] != 3:
        raise StreamError(f"frames must be uint8 (H, W, 3), got {frame.dtype} {frame.shape}")
    if ring.frame_shape is None:
        ring.frame_shape = frame.shape
    elif frame.shape != ring.frame_shape:
        raise StreamError(f"frame shape {frame.shape} differs from stream shape {ring.frame_shape}")
    ring.frames.append(frame)
    ring.total_seen += 1
    return "ready" if ring.ready else "filling"


@dataclass
class StreamPrediction:
    start: int  # 1-based index of the first frame in the window
    end: int
    cls: int
    gloss: str
    confidence: float
    latency_ms: float
    logits: np.ndarray | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("logits")
        d["class"] = d.pop("cls")
        return {k: d[k] for k in ("start", "end", "class", "gloss", "confidence", "latency_ms")}


def window_logits(frames: np.ndarray, model: M.SignNet) -> np.ndarray:
    x = eval_transform(Clip(frames), model.config)[None]
    logits, _ = M.forward(model, x, "eval")
    return logits[0]


def infer_window(ring: FrameRing, model: M.SignNet, stride: int = DEFAULT_STRIDE,
                 glosses: list | None = None) -> StreamPrediction | None:
    """Classify the newest window if a prediction is due, else return None."""
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if not ring.ready or (ring.total_seen - ring.window) % stride:
        return None
    started = time.perf_counter()
    frames = ring.latest(ring.window)
    logits = window_logits(frames, model)
    elapsed = (time.perf_counter() - started) * 1000.0
    z = logits.astype(np.float64)
    probs = np.exp(z - z.max())
    probs /= probs.sum()
    cls = int(np.argmax(probs))
    gloss = glosses[cls] if glosses else f"class_{cls}"
    return StreamPrediction(ring.total_seen - ring.window + 1, ring.total_seen, cls, gloss,
                            float(probs[cls]), elapsed, logits)


def iter_source_frames(source) -> Iterator[np.ndarray]:
    """Frames of an SLRC clip, or of every ``*.slrc`` in a directory (sorted by name)."""
    source = Path(source)
    paths = sorted(source.glob("*.slrc")) if source.is_dir() else [source]
    for path in paths:
        yield from load_clip(path).frames


def stream_frames(frames: Iterable[np.ndarray], model: M.SignNet, stride: int = DEFAULT_STRIDE,
                  window: int = DEFAULT_WINDOW, glosses: list | None = None,
                  queue_size: int | None = None) -> list[StreamPrediction]:
    """Producer thread feeds a bounded queue; this thread runs inference in order."""
    ring = FrameRing(window, window)
    q: queue.Queue = queue.Queue(maxsize=queue_size or window)
    done = object()
    failure: list = []

    def produce():
        try:
            for f in frames:
                q.put(f)
        except BaseException as exc:  # surfaced in the consumer
            failure.append(exc)
        finally:
            q.put(done)

    producer = threading.Thread(target=produce, daemon=True)
    producer.start()
    predictions = []
    while True:
        item = q.get()
        if item is done:
            break
        push_frame(ring, item)
        pred = infer_window(ring, model, stride, glosses)
        if pred is not None:
            predictions.append(pred)
    producer.join()
    if failure:
        raise failure[0]
    return predictions


def latency_summary(predictions: list[StreamPrediction]) -> dict:
    lat = np.array([p.latency_ms for p in predictions], dtype=np.float64)
    return {
        "windows": len(predictions),
        "mean_latency_ms": float(lat.mean()) if lat.size else 0.0,
        "p95_latency_ms": float(np.percentile(lat, 95)) if lat.size else 0.0,
    }


def run_stream(source, model: M.SignNet, stride: int = DEFAULT_STRIDE, out=None,
               window: int = DEFAULT_WINDOW, glosses: list | None = None):
    """Replay ``source`` through the streamer; optionally write predictions.jsonl."""
    predictions = stream_frames(iter_source_frames(source), model, stride, window, glosses)
    summary = latency_summary(predictions)
    if out is not None:
        lines = [json.dumps(p.to_dict()) for p in predictions] + [json.dumps(summary)]
        Path(out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return predictions, summary


def read_prediction_log(path) -> tuple[list[dict], dict]:
    rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    return rows[:-1], rows[-1]
