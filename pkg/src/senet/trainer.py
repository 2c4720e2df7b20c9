"""All-ReLU training, partial-ReLU fine-tuning and evaluation.

Each minibatch visits every width in the dropout set in ascending order,
accumulates gradients from each sub-model's loss, then takes one SGD step.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .arch import Model, ModelSpec, build_model
from .data import Dataset, batches
from .engine import SGD, SgdConfig, Tensor, ce_loss, kl_loss, no_grad, pram_loss, substream
from .engine.losses import activation_cosine

log = logging.getLogger(__name__)

DECAY_POINTS = (5, 6, 7)  # eighths of the schedule: 62.5%, 75%, 87.5%


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: tuple[int, int, int] = (40, 20, 30)
    batch_size: int = 64
    lr: tuple[float, float, float] = (0.05, 0.05, 0.001)
    lam: float = 0.9
    beta: float = 1000.0
    rho: float = 4.0
    eps: float = 0.05
    proxy_density: float = 0.1
    dropout_rates: tuple[float, ...] = (1.0,)
    granularity: str = "pixel"
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    sensitivity_samples: int = 256
    val_fraction: float = 0.1
    flip_prob: float = 0.5
    crop_pad: int = 2

    def __post_init__(self):
        object.__setattr__(self, "epochs", tuple(int(e) for e in self.epochs))
        object.__setattr__(self, "lr", tuple(float(v) for v in self.lr))
        object.__setattr__(self, "dropout_rates", tuple(sorted(float(r) for r in self.dropout_rates)))
        if len(self.epochs) != 3 or any(e < 1 for e in self.epochs):
            raise ValueError(f"epochs must be three positive ints, got {self.epochs}")
        if len(self.lr) != 3 or any(v <= 0 for v in self.lr):
            raise ValueError(f"lr must be three positive values, got {self.lr}")
        if not 0 <= self.lam <= 1:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if self.rho <= 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if not 0 < self.proxy_density < 1:
            raise ValueError(f"proxy_density must lie in (0, 1), got {self.proxy_density}")
        if self.granularity not in ("pixel", "channel"):
            raise ValueError(f"granularity must be 'pixel' or 'channel', got {self.granularity!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    def sgd(self, stage: int) -> SgdConfig:
        return SgdConfig(self.lr[stage], self.momentum, self.weight_decay)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# Full schedule used for the CIFAR experiments (GPU-scale).
CIFAR_FULL = TrainConfig(epochs=(240, 150, 180), lr=(0.05, 0.05, 0.01), batch_size=128, sensitivity_samples=1000, crop_pad=4)
PRESETS = {"desk": TrainConfig(), "cifar-full": CIFAR_FULL}


def lr_at(epoch: int, total_epochs: int, initial_lr: float) -> float:
    """Step schedule: x0.1 at 62.5%, 75% and 87.5% of training."""
    k = sum(1 for e in DECAY_POINTS if 8 * epoch >= e * total_epochs)
    return initial_lr * 0.1 ** k


@dataclass
class EpochMetrics:
    epoch: int
    stage: str
    d_r: float
    ce: float = 0.0
    kl: float = 0.0
    pram: float = 0.0
    train_acc: float = 0.0
    val_acc: float = 0.0
    lr: float = 0.0


CSV_FIELDS = ["epoch", "stage", "d_r", "ce", "kl", "pram", "train_acc", "val_acc", "lr"]


@dataclass
class MetricsLog:
    """In-memory epoch metrics, optionally appended to a CSV file."""

    path: Path | None = None
    rows: list[EpochMetrics] = field(default_factory=list)

    def append(self, m: EpochMetrics) -> None:
        self.rows.append(m)
        if self.path is None:
            return
        self.path = Path(self.path)
        new = not self.path.exists()
        with open(self.path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(CSV_FIELDS)
            w.writerow([m.epoch, m.stage, f"{m.d_r:g}", f"{m.ce:.6f}", f"{m.kl:.6f}",
                        f"{m.pram:.6f}", f"{m.train_acc:.6f}", f"{m.val_acc:.6f}", f"{m.lr:.6g}"])

    def stage(self, name: str) -> list[EpochMetrics]:
        return [r for r in self.rows if r.stage == name]


def _check(value: float, what: str) -> float:
    if not np.isfinite(value):
        raise DivergenceError(f"{what} became non-finite ({value}); lower the learning rate")
    return value


# -- evaluation ------------------------------------------------------------------

def evaluate(model: Model, ds: Dataset, d_r: float = 1.0, batch_size: int = 256) -> tuple[float, np.ndarray]:
    """Top-1 accuracy and per-class accuracy, eval-mode BN of the ``d_r`` sub-model."""
    model.check_rate(d_r)
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = []
    with no_grad():
        for x, _ in batches(ds, batch_size):
            logits, _ = model(x, d_r, training=False)
            preds.append(logits.data.argmax(axis=1))
    pred = np.concatenate(preds)
    hit = pred == ds.labels
    per_class = np.array([hit[ds.labels == k].mean() if np.any(ds.labels == k) else np.nan
                          for k in range(ds.classes)])
    return float(hit.mean()), per_class


def activation_similarity(pr: Model, ar: Model, ds: Dataset, d_r: float = 1.0,
                          batch_size: int = 256) -> float:
    """Mean cosine similarity between PR and AR post-ReLU maps on ``ds``."""
    sims, weights = [], []
    with no_grad():
        for x, _ in batches(ds, batch_size):
            _, pm = pr(x, d_r, training=False)
            _, am = ar(x, d_r, training=False)
            sims.append(activation_cosine(pm, am))
            weights.append(len(x))
    return float(np.average(sims, weights=weights))


# -- stage 1 ---------------------------------------------------------------------------

def train_ar(spec_or_model: ModelSpec | Model, train: Dataset, val: Dataset | None,
             config: TrainConfig, rng: np.random.Generator | None = None,
             metrics: MetricsLog | None = None) -> Model:
    """Train the all-ReLU model with CE on every sub-model of the dropout set."""
    rates = config.dropout_rates
    if isinstance(spec_or_model, Model):
        model = spec_or_model
    else:
        spec = spec_or_model if tuple(spec_or_model.dropout_rates) == rates else spec_or_model.with_rates(rates)
        model = build_model(spec, substream(config.seed, "init"))
    rng = rng or substream(config.seed, "stage1")
    opt = SGD(model.parameters(), config.sgd(0))
    total = config.epochs[0]
    for epoch in range(total):
        lr = lr_at(epoch, total, config.lr[0])
        sums = {r: [0.0, 0, 0] for r in rates}  # ce*n, correct, n
        for x, y in batches(train, config.batch_size, rng, config.flip_prob, config.crop_pad):
            opt.zero_grad()
            for r in rates:
                logits, _ = model(x, r, training=True)
                loss = ce_loss(logits, y)
                loss.backward()
                s = sums[r]
                s[0] += _check(loss.item(), "stage-1 loss") * len(y)
                s[1] += int((logits.data.argmax(1) == y).sum())
                s[2] += len(y)
            opt.step(lr)
        _log_epoch(metrics, model, val, "ar", epoch, lr, sums)
    return model


def _log_epoch(metrics, model, val, stage, epoch, lr, sums, kl=None, pram=None):
    if metrics is None:
        return
    for r, s in sums.items():
        va = evaluate(model, val, r)[0] if val is not None and len(val) else float("nan")
        metrics.append(EpochMetrics(epoch, stage, r, ce=s[0] / max(s[2], 1),
                                    kl=(kl or {}).get(r, 0.0), pram=(pram or {}).get(r, 0.0),
                                    train_acc=s[1] / max(s[2], 1), val_acc=va, lr=lr))


# -- stage 3 -----------------------------------------------------------------------------

def stage3_loss(pr_out: tuple[Tensor, Sequence[Tensor]], ar_out: tuple[Tensor, Sequence[Tensor]],
                labels: np.ndarray, d_r: float, config: TrainConfig) -> tuple[Tensor, dict[str, float]]:
    """(1-lam)*CE + lam*KL, plus beta/2 * PRAM on the full-width model only."""
    pr_logits, pr_maps = pr_out
    ar_logits, ar_maps = ar_out
    ce = ce_loss(pr_logits, labels)
    kl = kl_loss(ar_logits, pr_logits, config.rho)
    total = ce * (1 - config.lam) + kl * config.lam
    parts = {"ce": ce.item(), "kl": kl.item(), "pram": 0.0}
    if d_r == 1.0:
        pram = pram_loss(pr_maps, ar_maps)
        parts["pram"] = pram.item()
        if config.beta:
            total = total + pram * (config.beta / 2)
    return total, parts


def distill_epoch(student: Model, teacher: Model, train: Dataset, config: TrainConfig,
                  opt: SGD, lr: float, rng: np.random.Generator, rates: Sequence[float],
                  with_pram: bool, on_maps=None):
    """One epoch of teacher-student training; returns per-rate running sums."""
    sums = {r: [0.0, 0, 0] for r in rates}
    kls = {r: 0.0 for r in rates}
    prams = {r: 0.0 for r in rates}
    for x, y in batches(train, config.batch_size, rng, config.flip_prob, config.crop_pad):
        opt.zero_grad()
        for r in rates:
            with no_grad():
                ar_out = teacher(x, r, training=False)
            pr_out = student(x, r, training=True)
            if with_pram:
                loss, parts = stage3_loss(pr_out, ar_out, y, r, config)
            else:
                ce = ce_loss(pr_out[0], y)
                kl = kl_loss(ar_out[0], pr_out[0], config.rho)
                loss = ce * (1 - config.lam) + kl * config.lam
                parts = {"ce": ce.item(), "kl": kl.item(), "pram": 0.0}
            _check(loss.item(), "distillation loss")
            loss.backward()
            if on_maps is not None and r == 1.0:
                on_maps(pr_out[1], ar_out[1])
            s = sums[r]
            s[0] += parts["ce"] * len(y)
            s[1] += int((pr_out[0].data.argmax(1) == y).sum())
            s[2] += len(y)
            kls[r] += parts["kl"] * len(y)
            prams[r] += parts["pram"] * len(y)
        opt.step(lr)
    n = max(len(train), 1)
    return sums, {r: v / n for r, v in kls.items()}, {r: v / n for r, v in prams.items()}


def finetune_pr(ar_model: Model, mask, stage2_snapshot: Model | None, train: Dataset,
                val: Dataset | None, config: TrainConfig, rng: np.random.Generator | None = None,
                metrics: MetricsLog | None = None) -> Model:
    """Fine-tune the partial-ReLU model against the frozen all-ReLU teacher; mask stays fixed."""
    if stage2_snapshot is None:
        warnings.warn("no stage-2 snapshot given; initializing the PR model from the AR weights",
                      RuntimeWarning)
        pr = ar_model.clone()
    else:
        pr = stage2_snapshot.clone()
    pr.mask = mask
    rates = tuple(sorted(ar_model.spec.dropout_rates))
    rng = rng or substream(config.seed, "stage3")
    opt = SGD(pr.parameters(), config.sgd(2))
    total = config.epochs[2]
    for epoch in range(total):
        lr = lr_at(epoch, total, config.lr[2])
        sums, kl, pram = distill_epoch(pr, ar_model, train, config, opt, lr, rng, rates, with_pram=True)
        _log_epoch(metrics, pr, val, "finetune", epoch, lr, sums, kl, pram)
    return pr


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)
