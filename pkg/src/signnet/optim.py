"""Adam, plateau learning-rate scheduling, early stopping and the training loop."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from .checkpoint import CheckpointMeta, load_checkpoint, save_checkpoint
from .config import MAX_EPOCHS, RunConfig
from .data import Pipeline, batch_iter, glosses_from_records, read_manifest, split_dataset
from .errors import DataError, NumericError, ShapeError
from .layers import softmax_cross_entropy
from .tensor import Rng

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    m: dict
    v: dict
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    @classmethod
    def create(cls, params: dict, lr: float = 1e-3, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()},
                   lr, beta1, beta2, eps)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One Adam update, in place on ``params`` and ``state``.

    Every gradient is checked before anything is mutated, so a non-finite
    gradient aborts the whole step.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None or g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} missing or misshaped")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}; step aborted")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p -= step.astype(p.dtype, copy=False)


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


@dataclass
class PlateauScheduler:
    lr: float = 1e-3
    factor: float = 0.1
    patience: int = 3
    threshold: float = 1e-4
    min_lr: float = 1e-6
    best_loss: float = math.inf
    bad_epochs: int = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best_loss - self.threshold:
            self.best_loss = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs > self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


def scheduler_step(s: PlateauScheduler, val_loss: float) -> float:
    return s.step(val_loss)


@dataclass
class EarlyStopper:
    patience: int = 10
    best_val_loss: float = math.inf
    epochs_since_best: int = 0

    def step(self, val_loss: float) -> str:
        if val_loss < self.best_val_loss:
            self.best_val_loss = val_loss
            self.epochs_since_best = 0
            return "continue"
        self.epochs_since_best += 1
        return "stop" if self.epochs_since_best >= self.patience else "continue"


def early_stop_step(e: EarlyStopper, val_loss: float) -> str:
    return e.step(val_loss)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    lr: float
    seconds: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps([asdict(r) for r in self.records], indent=1) + "\n"

    def __len__(self) -> int:
        return len(self.records)


def param_digest(params: dict) -> str:
    h = hashlib.sha256()
    for name, p in params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p).tobytes())
    return h.hexdigest()


def validate(model: M.SignNet, records, config: RunConfig) -> tuple[float, float]:
    """Mean loss and accuracy over ``records`` with the deterministic pipeline."""
    pipeline = Pipeline(config.model)
    total_loss = 0.0
    correct = 0
    n = 0
    for x, y in batch_iter(records, config.batch_size, False, None, pipeline, config.workers):
        logits, _ = M.forward(model, x, "eval")
        loss, _ = softmax_cross_entropy(logits, y)
        total_loss += loss * len(y)
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
        n += len(y)
    return total_loss / n, correct / n


def train_step(model: M.SignNet, x, y, adam: AdamState, rng: Rng | None,
               grad_clip: float | None = None) -> float:
    logits, cache = M.forward(model, x, "train", rng)
    loss, grad = softmax_cross_entropy(logits, y)
    grads = M.backward(model, cache, grad)
    if grad_clip is not None:
        clip_grad_norm(grads, grad_clip)
    adam_step(model.params, grads, adam)
    return loss


def overfit_batch(model: M.SignNet, x, y, steps: int = 200, lr: float = 1e-3,
                  seed: int = 0) -> list[float]:
    """Repeated Adam steps on one fixed batch; returns the loss before each step."""
    adam = AdamState.create(model.params, lr)
    root = Rng(seed)
    return [train_step(model, x, y, adam, root.derive("dropout", s)) for s in range(steps)]


def train(config: RunConfig, manifest_path, seed: int, out_dir):
    """Full training run. Writes ``best.slck`` and ``history.json`` into ``out_dir``.

    Returns the best (lowest validation loss) model and the history.
    """
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = read_manifest(manifest_path)
    if len(records) < 2:
        raise DataError(f"{manifest_path}: need at least 2 records, got {len(records)}")
    n_cls = config.model.num_classes
    bad = sorted({r.label for r in records if r.label >= n_cls})
    if bad:
        raise DataError(f"labels {bad} out of range for {n_cls} classes")
    train_recs, val_recs = split_dataset(records, config.split_ratio, seed)
    missing = sorted(set(range(n_cls)) - {r.label for r in train_recs})
    if missing:
        raise DataError(f"classes {missing} have no training records")
    if not val_recs:
        raise DataError("validation split is empty")
    glosses = glosses_from_records(records, n_cls)

    root = Rng(seed)
    model = M.build(config.model, root.derive("init"))
    adam = AdamState.create(model.params, config.lr, config.beta1, config.beta2, config.eps)
    sched = PlateauScheduler(config.lr, config.scheduler_factor, config.scheduler_patience,
                             config.scheduler_threshold, config.min_lr)
    stopper = EarlyStopper(config.early_stop_patience)
    history = TrainHistory()
    train_pipe = Pipeline(config.model, config.augment, train=True)
    ckpt_path = out / "best.slck"
    best = math.inf
    log.info("training on %d clips, validating on %d", len(train_recs), len(val_recs))

    for epoch in range(1, min(config.max_epochs, MAX_EPOCHS) + 1):
        started = time.perf_counter()
        epoch_rng = root.derive("epoch", epoch)
        lr_used = adam.lr
        total, n = 0.0, 0
        batches = batch_iter(train_recs, config.batch_size, True, epoch_rng.derive("data"),
                             train_pipe, config.workers)
        for step, (x, y) in enumerate(batches):
            loss = train_step(model, x, y, adam, epoch_rng.derive("dropout", step), config.grad_clip)
            total += loss * len(y)
            n += len(y)
        train_loss = total / n
        val_loss, val_acc = validate(model, val_recs, config)
        if not math.isfinite(val_loss):
            raise NumericError(f"validation loss is not finite at epoch {epoch}")
        adam.lr = sched.step(val_loss)
        if val_loss < best:
            best = val_loss
            save_checkpoint(model, CheckpointMeta(epoch, val_loss, glosses), ckpt_path)
        seconds = time.perf_counter() - started
        history.records.append(EpochRecord(epoch, train_loss, val_loss, val_acc, lr_used,
                                           seconds if config.record_timing else 0.0))
        log.info("epoch %d train %.4f val %.4f acc %.3f lr %.2g (%.1fs)",
                 epoch, train_loss, val_loss, val_acc, lr_used, seconds)
        if stopper.step(val_loss) == "stop":
            log.info("early stop at epoch %d", epoch)
            break

    (out / "history.json").write_text(history.to_json())
    best_model, _ = load_checkpoint(ckpt_path)
    return best_model, history
