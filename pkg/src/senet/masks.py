"""ReLU mask search: distil the PR model, re-rank ReLU positions by AR/PR discrepancy.

Masks are stored per layer as h×w×c boolean arrays (channels fastest), the
same layout as the on-disk format.  Fully connected ReLU layers use h = w = 1.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .allocator import BudgetAllocation, InfeasibleBudget, validate
from .arch import Model, relu_shapes
from .data import Dataset
from .engine import SGD, Tensor, substream
from .engine.checkpoint import FormatError, atomic_write_bytes
from .trainer import EpochMetrics, MetricsLog, TrainConfig, distill_epoch, evaluate, lr_at

MAGIC = b"SENETMSK"
VERSION = 1
GRANULARITIES = ("pixel", "channel")

Shape = tuple[str, int, int, int]  # name, h, w, c


@dataclass
class ReluMask:
    layers: dict[str, np.ndarray]
    granularity: str = "pixel"

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        self.layers = {k: np.asarray(v, dtype=bool) for k, v in self.layers.items()}
        for k, v in self.layers.items():
            if v.ndim != 3:
                raise ValueError(f"mask {k!r} must be h×w×c, got shape {v.shape}")

    def get(self, name: str, default=None):
        return self.layers.get(name, default)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.layers[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def ones_counts(self) -> dict[str, int]:
        return {k: int(v.sum()) for k, v in self.layers.items()}

    @property
    def total_ones(self) -> int:
        return sum(self.ones_counts.values())

    def ones_in_prefix(self, rate_widths: Mapping[str, int]) -> int:
        """ReLUs that remain when each layer keeps only its first ``rate_widths[l]`` channels."""
        return sum(int(v[:, :, :rate_widths[k]].sum()) for k, v in self.layers.items())

    def digest(self) -> str:
        return hashlib.sha256(encode_mask(self)).hexdigest()

    def copy(self) -> "ReluMask":
        return ReluMask({k: v.copy() for k, v in self.layers.items()}, self.granularity)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ReluMask):
            return NotImplemented
        return (self.granularity == other.granularity and list(self.layers) == list(other.layers)
                and all(np.array_equal(self.layers[k], other.layers[k]) for k in self.layers))


def _shapes(shapes) -> list[Shape]:
    if hasattr(shapes, "relu_layers"):  # a ModelSpec
        return relu_shapes(shapes)
    return [tuple(s) for s in shapes]


def _check_alloc(alloc: BudgetAllocation, shapes: list[Shape]) -> None:
    report = validate(alloc, shapes)
    if not report:
        raise InfeasibleBudget(f"allocation does not fit the model: {report}")


def _channel_count(count: int, h: int, w: int, c: int, name: str) -> int:
    rc = math.ceil(count / (h * w))
    if rc > c:
        raise InfeasibleBudget(f"layer {name}: {rc} channels needed but only {c} exist")
    return rc


def init_mask(alloc: BudgetAllocation, shapes, granularity: str = "pixel",
              seed: int | np.random.Generator = 0) -> ReluMask:
    """Random initial mask with exactly the allocated number of ReLUs per layer."""
    shapes = _shapes(shapes)
    _check_alloc(alloc, shapes)
    rng = seed if isinstance(seed, np.random.Generator) else substream(int(seed), "mask-init")
    out = {}
    for (name, h, w, c), count in zip(shapes, alloc.counts):
        m = np.zeros((h, w, c), bool)
        if granularity == "pixel":
            m.reshape(-1)[rng.choice(h * w * c, size=count, replace=False)] = True
        elif granularity == "channel":
            rc = _channel_count(count, h, w, c, name)
            m[:, :, rng.choice(c, size=rc, replace=False)] = True
        else:
            raise ValueError(f"unknown granularity {granularity!r}")
        out[name] = m
    return ReluMask(out, granularity)


def full_mask(shapes) -> ReluMask:
    return ReluMask({n: np.ones((h, w, c), bool) for n, h, w, c in _shapes(shapes)})


# -- discrepancy statistics --------------------------------------------------------

@dataclass
class DiffAccumulator:
    sums: dict[str, np.ndarray]
    batches: int = 0

    @classmethod
    def zeros(cls, shapes) -> "DiffAccumulator":
        return cls({n: np.zeros((h, w, c), np.float64) for n, h, w, c in _shapes(shapes)})

    def mean(self) -> dict[str, np.ndarray]:
        if self.batches == 0:
            raise ValueError("no minibatches accumulated")
        return {k: v / self.batches for k, v in self.sums.items()}


def _hwc(a: np.ndarray) -> np.ndarray:
    return a.transpose(1, 2, 0) if a.ndim == 3 else a.reshape(1, 1, -1)


def accumulate_diff(acc: DiffAccumulator, pr_maps: Sequence, ar_maps: Sequence) -> DiffAccumulator:
    """Add the batch-mean |pr - ar| of each ReLU layer's output."""
    names = list(acc.sums)
    if not len(pr_maps) == len(ar_maps) == len(names):
        raise ValueError(f"expected {len(names)} paired maps, got {len(pr_maps)} and {len(ar_maps)}")
    for name, p, a in zip(names, pr_maps, ar_maps):
        p = p.data if isinstance(p, Tensor) else np.asarray(p)
        a = a.data if isinstance(a, Tensor) else np.asarray(a)
        if p.shape != a.shape:
            raise ValueError(f"layer {name}: PR map {p.shape} vs AR map {a.shape}")
        d = _hwc(np.abs(p.astype(np.float64) - a).mean(axis=0))
        if d.shape != acc.sums[name].shape:
            raise ValueError(f"layer {name}: map {d.shape} does not match accumulator {acc.sums[name].shape}")
        acc.sums[name] += d
    acc.batches += 1
    return acc


def _top(values: np.ndarray, k: int) -> np.ndarray:
    # stable sort on the negated values: equal scores keep ascending index order
    return np.argsort(-values, kind="stable")[:k]


def rerank_mask(acc: DiffAccumulator | Mapping[str, np.ndarray], alloc: BudgetAllocation,
                granularity: str = "pixel") -> ReluMask:
    """Keep ReLUs where the mean AR/PR discrepancy is largest."""
    means = acc.mean() if isinstance(acc, DiffAccumulator) else {k: np.asarray(v, np.float64) for k, v in acc.items()}
    counts = dict(zip(alloc.names, alloc.counts))
    out = {}
    for name, d in means.items():
        if d.ndim == 1:
            d = d.reshape(1, 1, -1)
        h, w, c = d.shape
        count = counts[name]
        m = np.zeros((h, w, c), bool)
        if granularity == "pixel":
            m.reshape(-1)[_top(d.reshape(-1), count)] = True
        elif granularity == "channel":
            rc = _channel_count(count, h, w, c, name)
            m[:, :, _top(d.mean(axis=(0, 1)), rc)] = True
        else:
            raise ValueError(f"unknown granularity {granularity!r}")
        out[name] = m
    return ReluMask(out, granularity)


def hamming_distance(prev: ReluMask, cur: ReluMask) -> float:
    """Fraction of the ReLU budget whose positions moved between two masks."""
    if list(prev.layers) != list(cur.layers):
        raise ValueError("masks cover different layers")
    moved = 0
    for k in prev.layers:
        a, b = prev.layers[k], cur.layers[k]
        if a.shape != b.shape:
            raise ValueError(f"layer {k}: mask shapes {a.shape} and {b.shape} differ")
        if a.sum() != b.sum():
            raise ValueError(f"mismatched budgets in layer {k}: {int(a.sum())} vs {int(b.sum())} ones")
        moved += int((a & ~b).sum())
    r = prev.total_ones
    return 0.0 if r == 0 else moved / r


def hamming_converged(prev: ReluMask, cur: ReluMask, eps: float = 0.05) -> bool:
    return hamming_distance(prev, cur) < eps


# -- file format -------------------------------------------------------------------------

def encode_mask(mask: ReluMask) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(mask.layers))]
    gran = GRANULARITIES.index(mask.granularity)
    for name, m in mask.layers.items():
        raw = name.encode("utf-8")
        h, w, c = m.shape
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<IIIB", h, w, c, gran))
        parts.append(np.packbits(m.reshape(-1), bitorder="little").tobytes())
    return b"".join(parts)


def decode_mask(buf: bytes) -> ReluMask:
    if buf[:8] != MAGIC:
        raise FormatError("not a mask file (bad magic)")
    off = 8

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(buf):
            raise FormatError(f"truncated mask file at byte offset {off}")
        chunk = buf[off:off + n]
        off += n
        return chunk

    version, count = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise FormatError(f"unsupported mask file version {version}")
    layers, gran = {}, set()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        h, w, c, g = struct.unpack("<IIIB", take(13))
        if g >= len(GRANULARITIES):
            raise FormatError(f"layer {name}: unknown granularity code {g} at byte offset {off - 1}")
        gran.add(g)
        n = h * w * c
        bits = np.unpackbits(np.frombuffer(take((n + 7) // 8), np.uint8), count=n, bitorder="little")
        layers[name] = bits.astype(bool).reshape(h, w, c)
    if len(gran) > 1:
        raise FormatError("mixed granularities in one mask file")
    return ReluMask(layers, GRANULARITIES[gran.pop()] if gran else "pixel")


def sidecar(mask: ReluMask) -> dict:
    return {"granularity": mask.granularity,
            "layers": [{"name": k, "shape": list(v.shape), "ones": int(v.sum())}
                       for k, v in mask.layers.items()],
            "total_ones": mask.total_ones}


def save_mask(path, mask: ReluMask) -> None:
    """Write the binary mask plus a ``.json`` sidecar with per-layer ones counts."""
    path = Path(path)
    atomic_write_bytes(path, encode_mask(mask))
    atomic_write_bytes(path.with_suffix(path.suffix + ".json"),
                       (json.dumps(sidecar(mask), indent=1) + "\n").encode())


def load_mask(path) -> ReluMask:
    return decode_mask(Path(path).read_bytes())


# -- the search loop -----------------------------------------------------------------------

@dataclass
class SearchEpoch:
    epoch: int
    hamming: float
    val_acc: float
    train_acc: float
    lr: float


@dataclass
class MaskSearchResult:
    mask: ReluMask            # mask of the best-validation snapshot
    model: Model              # best-validation PR snapshot (carries ``mask``)
    history: list[SearchEpoch] = field(default_factory=list)
    final_mask: ReluMask | None = None  # last rerank, possibly newer than ``mask``
    best_epoch: int = 0
    eps: float = 0.05

    @property
    def converged(self) -> bool:
        return bool(self.history) and self.history[-1].hamming < self.eps


def run_mask_search(ar_model: Model, alloc: BudgetAllocation, train: Dataset, val: Dataset | None,
                    config: TrainConfig, rng: np.random.Generator | None = None,
                    metrics: MetricsLog | None = None, init: ReluMask | None = None) -> MaskSearchResult:
    """Stage 2.  Each epoch trains the PR model with CE + KL against the frozen
    AR model, then re-ranks the mask from that epoch's discrepancy statistics
    and stops once the Hamming distance to the previous mask is below ``eps``.
    """
    if len(train) == 0:
        raise ValueError("mask search needs a non-empty training set")
    shapes = relu_shapes(ar_model.spec)
    _check_alloc(alloc, shapes)
    rng = rng or substream(config.seed, "stage2")
    mask = init if init is not None else init_mask(alloc, shapes, config.granularity,
                                                   substream(config.seed, "mask-init"))
    pr = ar_model.clone()
    pr.mask = mask
    rates = tuple(sorted(ar_model.spec.dropout_rates))
    opt = SGD(pr.parameters(), config.sgd(1))
    total = config.epochs[1]
    eval_set = val if val is not None and len(val) else train
    best_acc, best_model, best_epoch = -1.0, None, 0
    history: list[SearchEpoch] = []
    for epoch in range(total):
        lr = lr_at(epoch, total, config.lr[1])
        acc = DiffAccumulator.zeros(shapes)
        sums, kl, _ = distill_epoch(pr, ar_model, train, config, opt, lr, rng, rates, with_pram=False,
                                    on_maps=lambda p, a: accumulate_diff(acc, p, a))
        val_acc = evaluate(pr, eval_set, 1.0)[0]
        if val_acc > best_acc:
            best_acc, best_model, best_epoch = val_acc, pr.clone(), epoch
        new_mask = rerank_mask(acc, alloc, config.granularity)
        dist = hamming_distance(pr.mask, new_mask)
        s = sums[1.0]
        history.append(SearchEpoch(epoch, dist, val_acc, s[1] / max(s[2], 1), lr))
        if metrics is not None:
            metrics.append(EpochMetrics(epoch, "mask", 1.0, ce=s[0] / max(s[2], 1), kl=kl[1.0],
                                        train_acc=s[1] / max(s[2], 1), val_acc=val_acc, lr=lr))
        pr.mask = new_mask
        if dist < config.eps:
            break
    return MaskSearchResult(best_model.mask, best_model, history, pr.mask, best_epoch, config.eps)
