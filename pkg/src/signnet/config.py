"""Run configuration: one JSON document holding every training knob."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import AugmentSpec
from .errors import ConfigError
from .model import ModelConfig

MAX_EPOCHS = 100


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    scheduler_factor: float = 0.1
    scheduler_patience: int = 3
    scheduler_threshold: float = 1e-4
    min_lr: float = 1e-6
    early_stop_patience: int = 10
    batch_size: int = 2
    max_epochs: int = MAX_EPOCHS
    split_ratio: float = 0.8
    grad_clip: float | None = None
    seed: int = 0
    workers: int = 0
    # Wall-clock seconds make history.json differ between identical runs;
    # they are only written when this is on.
    record_timing: bool = False
    manifest: str | None = None
    out_dir: str | None = None

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.augment.validate()
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("betas must be in [0, 1) and eps > 0")
        if not 0 < self.scheduler_factor < 1:
            raise ConfigError("scheduler_factor must be in (0, 1)")
        if self.scheduler_patience < 0 or self.early_stop_patience < 0:
            raise ConfigError("patience values must be >= 0")
        if not 0 < self.min_lr <= self.lr:
            raise ConfigError("min_lr must be in (0, lr]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 1 <= self.max_epochs <= MAX_EPOCHS:
            raise ConfigError(f"max_epochs must be in [1, {MAX_EPOCHS}], got {self.max_epochs}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive or null")
        if self.workers < 0:
            raise ConfigError("workers must be >= 0")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("run config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        model = ModelConfig.from_dict(data.pop("model", {}))
        aug_data = data.pop("augment", {})
        aug_known = {f.name for f in dataclasses.fields(AugmentSpec)}
        if set(aug_data) - aug_known:
            raise ConfigError(f"unknown augment keys: {sorted(set(aug_data) - aug_known)}")
        try:
            return cls(model=model, augment=AugmentSpec(**aug_data), **data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data).validate()

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
