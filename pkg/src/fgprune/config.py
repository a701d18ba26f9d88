"""Flat ``key = value`` experiment configuration."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .select import STRATEGIES
from .train import TrainConfig

ARCHS = ("vgg-lite", "resnet-lite", "seg-lite", "vgg16")
DATASETS = ("idx", "cifar10", "synth-shapes", "file")


def _ints(s: str) -> tuple:
    return tuple(int(v) for v in s.replace(",", " ").split())


def _floats(s: str) -> tuple:
    return tuple(float(v) for v in s.replace(",", " ").split())


def _strs(s: str) -> tuple:
    return tuple(v for v in s.replace(",", " ").split())


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_int(s: str):
    return None if s.strip().lower() in ("", "none") else int(s)


@dataclass
class ExperimentConfig:
    task: str = "classification"
    arch: str = "vgg-lite"
    channels: tuple = (8, 16)
    blocks_per_stage: int = 1
    # data
    dataset: str = "idx"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    cifar_train: tuple = ()
    cifar_test: tuple = ()
    train_file: str = ""
    test_file: str = ""
    classes: tuple = ()
    num_classes: int = 10
    train_cap: int | None = None
    test_cap: int | None = None
    synth_train: int = 512
    synth_test: int = 128
    synth_size: int = 32
    data_seed: int = 0
    # optimisation
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple = (10, 15)
    gamma: float = 0.1
    precision: str = "float32"
    flip: bool = False
    crop: int = 0
    finetune_epochs: int = 10
    finetune_schedule: str = "truncated"
    # pruning
    k: float = 0.4
    strategy: str = "fgp"
    mode: str = "per-layer"
    score_cap: int | None = 64
    # seeds and sweeps
    seed: int = 0
    seeds: tuple = (0,)
    ablate_ks: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    ablate_strategies: tuple = ("peak-k", "random-30", "bot-30-of-bottom-50-random")
    ablate_class_counts: tuple = ()
    out_dir: str = "runs/default"

    _PARSERS = {
        "channels": _ints, "milestones": _ints, "classes": _ints, "seeds": _ints,
        "ablate_class_counts": _ints, "ablate_ks": _floats,
        "cifar_train": _strs, "cifar_test": _strs, "ablate_strategies": _strs,
        "train_cap": _opt_int, "test_cap": _opt_int, "score_cap": _opt_int,
    }

    @classmethod
    def keys(cls) -> list:
        return [f.name for f in fields(cls)]

    @classmethod
    def parse_value(cls, key: str, raw: str):
        types = {f.name: f.type for f in fields(cls)}
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        raw = raw.strip()
        try:
            if key in cls._PARSERS:
                return cls._PARSERS[key](raw)
            t = types[key]
            if t == "bool":
                return _bool(raw)
            if t == "int":
                return int(raw)
            if t == "float":
                return float(raw)
            return raw
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {e}") from e

    @classmethod
    def from_text(cls, text: str, overrides=(), base_dir=None) -> "ExperimentConfig":
        vals = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key in vals:
                raise ConfigError(f"line {n}: duplicate key {key!r}")
            vals[key] = cls.parse_value(key, raw)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            vals[key.strip()] = cls.parse_value(key.strip(), raw)
        cfg = cls(**vals)
        if base_dir is not None:
            cfg = cfg.resolve_paths(Path(base_dir))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides=()) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_text(text, overrides, Path(path).parent)

    def resolve_paths(self, base: Path) -> "ExperimentConfig":
        def fix(p):
            return str(base / p) if p and not Path(p).is_absolute() else p

        return dataclasses.replace(
            self,
            **{k: fix(getattr(self, k)) for k in ("train_images", "train_labels", "test_images", "test_labels",
                                                 "train_file", "test_file")},
            cifar_train=tuple(fix(p) for p in self.cifar_train),
            cifar_test=tuple(fix(p) for p in self.cifar_test),
        )

    def input_paths(self) -> list:
        if self.dataset == "idx":
            return [self.train_images, self.train_labels, self.test_images, self.test_labels]
        if self.dataset == "cifar10":
            return list(self.cifar_train) + list(self.cifar_test)
        if self.dataset == "file":
            return [self.train_file, self.test_file]
        return []

    def validate(self, check_paths: bool = True) -> None:
        if self.task not in ("classification", "segmentation"):
            raise ConfigError(f"task must be classification or segmentation, got {self.task!r}")
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if (self.arch == "seg-lite") != (self.task == "segmentation"):
            raise ConfigError("seg-lite is the segmentation architecture and only it")
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.dataset == "synth-shapes" and self.task != "segmentation":
            raise ConfigError("synth-shapes is a segmentation dataset")
        if not self.channels or min(self.channels) < 1:
            raise ConfigError("channels must be positive integers")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")
        bad = [s for s in self.ablate_strategies if s not in STRATEGIES]
        if bad:
            raise ConfigError(f"unknown ablation strategies {bad}")
        if self.mode not in ("per-layer", "global"):
            raise ConfigError("mode must be per-layer or global")
        if not 0 < self.k <= 1 or any(not 0 < k <= 1 for k in self.ablate_ks):
            raise ConfigError("retain fractions must lie in (0, 1]")
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")
        if self.finetune_epochs < 0:
            raise ConfigError("finetune_epochs must be >= 0")
        if self.finetune_schedule not in ("scaled", "truncated"):
            raise ConfigError("finetune_schedule must be scaled or truncated")
        try:
            self.train_config()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if check_paths:
            paths = self.input_paths()
            if any(not p for p in paths) or (self.dataset == "cifar10" and not (self.cifar_train and self.cifar_test)):
                raise ConfigError(f"dataset {self.dataset!r} needs its input paths set")
            missing = [p for p in paths if not Path(p).is_file()]
            if missing:
                raise ConfigError(f"input files not found: {missing}")

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(self.epochs, self.batch_size, self.lr, self.momentum, self.weight_decay,
                           self.milestones, self.gamma, self.seed if seed is None else seed,
                           self.precision, self.flip, self.crop)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            elif v is None:
                v = "none"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

