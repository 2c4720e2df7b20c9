"""Run configuration: one JSON document mirroring TrainConfig plus model/budget/data keys."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .arch import ModelSpec, load_zoo
from .arch.zoo import ZOO
from .data import Dataset, concat, read_cifar10_binary, stratified_split, synth_generate
from .engine import ConfigError, substream
from .trainer import PRESETS, TrainConfig

SEED_ENV = "SENET_SEED"

SYNTH_KEYS = {"kind", "classes", "per_class", "resolution", "difficulty", "seed", "test_per_class"}
CIFAR_KEYS = {"kind", "train", "test", "mean", "std"}


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synth"
    classes: int | None = None        # defaults to the model's class count
    per_class: int = 300
    resolution: int | None = None     # defaults to the model's input size
    difficulty: float = 0.8
    seed: int | None = None           # defaults to the run seed
    test_per_class: int = 250
    train: tuple[str, ...] = ()
    test: str | None = None
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        kind = d.get("kind", "synth")
        allowed = SYNTH_KEYS if kind == "synth" else CIFAR_KEYS if kind == "cifar10" else None
        if allowed is None:
            raise ConfigError(f"dataset.kind must be 'synth' or 'cifar10', got {kind!r}")
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown dataset keys for {kind}: {sorted(unknown)}")
        d = dict(d)
        for k in ("train", "mean", "std"):
            if k in d and d[k] is not None:
                d[k] = tuple(d[k]) if not isinstance(d[k], str) else (d[k],)
        return cls(**d)

    def to_dict(self) -> dict:
        keys = SYNTH_KEYS if self.kind == "synth" else CIFAR_KEYS
        out = {}
        for k in sorted(keys):
            v = getattr(self, k)
            out[k] = list(v) if isinstance(v, tuple) else v
        return out


@dataclass(frozen=True)
class RunConfig:
    model: str = "toy-cnn-8"             # zoo name or path to a spec JSON
    budget: int | None = None            # absolute ReLU budget
    budget_fraction: float | None = 0.25  # used when budget is not given
    cost_table: str | None = None        # path to a cost table JSON
    dataset: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    RUN_KEYS = ("model", "budget", "budget_fraction", "cost_table", "dataset", "preset")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        train_keys = TrainConfig.field_names()
        unknown = set(d) - set(cls.RUN_KEYS) - train_keys
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        preset = d.get("preset", "desk")
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        try:
            train = replace(PRESETS[preset], **{k: v for k, v in d.items() if k in train_keys})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        run = {k: d[k] for k in ("model", "budget", "budget_fraction", "cost_table") if k in d}
        return cls(dataset=DataConfig.from_dict(d.get("dataset", {})), train=train, **run)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        out = {"model": self.model, "budget": self.budget, "budget_fraction": self.budget_fraction,
               "cost_table": self.cost_table, "dataset": self.dataset.to_dict()}
        out.update(self.train.to_dict())
        return out

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, train=replace(self.train, seed=int(seed)))

    @property
    def seed(self) -> int:
        return self.train.seed


def resolve_seed(config: RunConfig, flag: int | None) -> RunConfig:
    """Seed precedence: --seed flag, then SENET_SEED, then the config value."""
    if flag is not None:
        return config.with_seed(flag)
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return config.with_seed(int(env))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return config


def load_spec(ref: str) -> ModelSpec:
    """A zoo name or a path to a spec JSON file."""
    if ref in ZOO:
        spec = load_zoo(ref)
    else:
        p = Path(ref)
        if not p.exists():
            raise ConfigError(f"model {ref!r} is neither a zoo name ({', '.join(ZOO)}) nor an existing file")
        spec = ModelSpec.load(p)
    return spec


def build_datasets(config: RunConfig, spec: ModelSpec) -> tuple[Dataset, Dataset, Dataset]:
    """(train, val, test) for the run; the validation split is seeded and stratified."""
    dc = config.dataset
    seed = config.seed
    if dc.kind == "synth":
        classes = dc.classes or spec.classes
        res = dc.resolution or spec.input_shape[1]
        dseed = seed if dc.seed is None else dc.seed
        full = synth_generate(classes, dc.per_class, res, dc.difficulty, dseed)
        test = synth_generate(classes, dc.test_per_class, res, dc.difficulty, dseed + 100_003, "test")
    else:
        if not dc.train or not dc.test:
            raise ConfigError("cifar10 dataset needs 'train' (list of batch files) and 'test'")
        full = concat([read_cifar10_binary(p, dc.mean, dc.std) for p in dc.train])
        test = read_cifar10_binary(dc.test, dc.mean, dc.std, "test")
    if full.classes != spec.classes:
        raise ConfigError(f"dataset has {full.classes} classes but model {spec.name!r} expects {spec.classes}")
    train, val = stratified_split(full, config.train.val_fraction, substream(seed, "split"))
    return train, val, test


def config_field_docs() -> dict[str, str]:
    """Short description of every config key, for --help output."""
    docs = {
        "model": "zoo name or spec JSON path",
        "budget": "absolute ReLU budget",
        "budget_fraction": "budget as a fraction of the model's ReLU count (when budget is unset)",
        "cost_table": "cost table JSON (default: shipped Delphi numbers)",
        "dataset": "synth: classes, per_class, resolution, difficulty, seed, test_per_class; "
                   "cifar10: train, test, mean, std",
        "preset": "base hyperparameters: " + ", ".join(sorted(PRESETS)),
    }
    docs.update({f.name: "TrainConfig field" for f in fields(TrainConfig)})
    return docs
