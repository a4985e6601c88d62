"""Run configuration: a JSON document with one object per section.

Missing keys take the defaults below; unknown keys are rejected. See
``docs/config.md`` for the full schema.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .encoder import EncoderConfig
from .errors import ConfigError
from .fusion import FusionKind, FusionSpec


@dataclass
class DataConfig:
    corpus_seed: int = 1234
    corpus_size: int = 2000
    train_path: str | None = None
    dev_path: str | None = None
    test_path: str | None = None


@dataclass
class PretrainConfig:
    epochs: int = 12
    batch_size: int = 8
    max_lr: float = 1e-3
    weight_decay: float = 0.01
    mask_rate: float = 0.15


@dataclass
class TrainConfig:
    mode: str = "FE"
    task: str = "NER"
    n_shot: int | None = 8          # None trains on the full training set
    n_classes: int = 4
    epochs: int = 50
    batch_size: int = 16
    max_lr: float = 5e-5
    weight_decay: float = 0.01
    trials: int = 5
    eval_batch_size: int = 64
    mask_rate: float = 0.15


@dataclass
class GridConfig:
    n_shots: list[int] = field(default_factory=lambda: [8, 16, 32, 64, 128])
    epochs: list[int] = field(default_factory=lambda: [25, 50, 75, 100])
    fusions: list[str] = field(default_factory=lambda: ["extra", "concat", "dwatt"])
    trials: int = 5


@dataclass
class ExperimentConfig:
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionSpec = field(default_factory=FusionSpec)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    encoder_checkpoint: str | None = None

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["fusion"] = self.fusion.to_dict()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with top-level fields or ``section__field`` entries overridden."""
        raw = self.to_dict()
        for key, value in sections.items():
            if "__" in key:
                sec, name = key.split("__", 1)
                raw[sec][name] = value
            else:
                raw[key] = value
        return from_dict(raw)

    def validate(self) -> "ExperimentConfig":
        self.encoder.validate()
        t = self.train
        if t.mode.upper() not in ("FE", "FT"):
            raise ConfigError(f"must be FE or FT, got {t.mode!r}", "train.mode")
        if t.task.upper() not in ("NER", "MLM"):
            raise ConfigError(f"must be NER or MLM, got {t.task!r}", "train.task")
        _positive(t.epochs, "train.epochs")
        _positive(t.batch_size, "train.batch_size")
        _positive(t.trials, "train.trials")
        _positive(t.n_classes, "train.n_classes")
        _positive(t.eval_batch_size, "train.eval_batch_size")
        if t.n_shot is not None:
            _positive(t.n_shot, "train.n_shot")
        if t.max_lr < 0:
            raise ConfigError(f"must be >= 0, got {t.max_lr}", "train.max_lr")
        _positive(self.pretrain.batch_size, "pretrain.batch_size")
        if self.pretrain.epochs < 0:
            raise ConfigError(f"must be >= 0, got {self.pretrain.epochs}", "pretrain.epochs")
        for name in ("n_shots", "epochs", "fusions"):
            if not getattr(self.grid, name):
                raise ConfigError("must be a non-empty list", f"grid.{name}")
        for n in self.grid.n_shots:
            _positive(n, "grid.n_shots")
        for e in self.grid.epochs:
            _positive(e, "grid.epochs")
        for k in self.grid.fusions:
            FusionKind.parse(k)
        _positive(self.grid.trials, "grid.trials")
        if self.data.train_path is None and self.data.corpus_size < 100:
            raise ConfigError("must be >= 100", "data.corpus_size")
        return self


def _positive(value, name: str) -> None:
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise ConfigError(f"must be a positive integer, got {value!r}", name)


_SECTIONS = {
    "encoder": EncoderConfig,
    "data": DataConfig,
    "pretrain": PretrainConfig,
    "train": TrainConfig,
    "grid": GridConfig,
}


def _build(cls, raw, section: str):
    if not isinstance(raw, dict):
        raise ConfigError("must be an object", section)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown}", section)
    try:
        return cls(**copy.deepcopy(raw))
    except TypeError as exc:
        raise ConfigError(str(exc), section) from None


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _build(cls, raw[name], name)
    if "fusion" in raw:
        fraw = raw["fusion"]
        if not isinstance(fraw, dict):
            raise ConfigError("must be an object", "fusion")
        kwargs["fusion"] = _build(FusionSpec, fraw, "fusion")
    for name in ("seed", "encoder_checkpoint"):
        if name in raw:
            kwargs[name] = raw[name]
    if not isinstance(kwargs.get("seed", 0), int):
        raise ConfigError(f"must be an integer, got {kwargs['seed']!r}", "seed")
    return ExperimentConfig(**kwargs).validate()


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", str(path)) from None
    except OSError as exc:
        raise ConfigError(f"cannot read: {exc.strerror}", str(path)) from None
    return from_dict(raw)
