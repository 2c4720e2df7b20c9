"""Layer-wise ReLU budget allocation proportional to normalized ReLU sensitivity."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class InfeasibleBudget(ValueError):
    pass


@dataclass
class BudgetAllocation:
    budget: int
    counts: list[int]
    capacities: list[int]
    names: list[str]
    active: list[int] = field(default_factory=list)
    r_remain: int = 0
    r_total: int = 0
    r_remove: int = 0

    def __len__(self) -> int:
        return len(self.counts)

    def as_dict(self) -> dict[str, int]:
        return dict(zip(self.names, self.counts))

    def to_dict(self) -> dict:
        return {
            "budget": self.budget,
            "layers": [{"name": n, "count": c, "capacity": k}
                       for n, c, k in zip(self.names, self.counts, self.capacities)],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "BudgetAllocation":
        ls = d["layers"]
        counts = [int(l["count"]) for l in ls]
        return cls(int(d["budget"]), counts, [int(l["capacity"]) for l in ls],
                   [l["name"] for l in ls], r_total=sum(counts))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "BudgetAllocation":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _floor(x: float) -> int:
    # guard against 0.1*300 style representation error before flooring
    return math.floor(x + 1e-9)


def _renormalize(eta: np.ndarray, active: np.ndarray) -> np.ndarray:
    tot = eta[active].sum()
    if tot <= 0:
        return np.where(active, 1.0 / max(int(active.sum()), 1), 0.0)
    return np.where(active, eta / tot, 0.0)


def allocate(budget: int, eta_hat: Sequence[float], capacities: Sequence[int],
             names: Sequence[str] | None = None) -> BudgetAllocation:
    """Split ``budget`` ReLUs across layers in proportion to ``eta_hat``.

    Assignment passes grant every active layer ``max(1, floor(remaining *
    share))`` capped at its free capacity.  Layers that fill up are
    deactivated and the shares of the survivors renormalized before the
    next pass.  The minimum grant can overshoot by fewer than L units; the
    removal pass takes them back one at a time from the least sensitive
    layers (ties: higher layer index first).
    """
    caps = np.asarray(capacities, dtype=np.int64)
    eta = np.asarray(eta_hat, dtype=np.float64)
    L = caps.size
    names = list(names) if names is not None else [f"relu{i}" for i in range(L)]
    if eta.shape != (L,) or len(names) != L:
        raise ValueError(f"eta_hat ({eta.size}), capacities ({L}) and names ({len(names)}) must align")
    if np.any(caps < 0):
        raise ValueError("capacities must be non-negative")
    if np.any(~np.isfinite(eta)) or np.any(eta < 0):
        raise ValueError("eta_hat must be finite and non-negative")
    if L and abs(eta.sum() - 1.0) > 1e-6:
        raise ValueError(f"eta_hat must sum to 1, got {eta.sum():.9f}")
    budget = int(budget)
    if budget < 0:
        raise InfeasibleBudget(f"negative budget {budget}")
    if budget > caps.sum():
        raise InfeasibleBudget(f"budget {budget} exceeds total ReLU capacity {int(caps.sum())}")

    counts = np.zeros(L, dtype=np.int64)
    active = caps > 0
    share = _renormalize(eta, active)
    r_total = 0
    while r_total < budget:
        r_remain = budget - r_total
        for l in range(L):
            if not active[l]:
                continue
            grant = min(max(1, _floor(r_remain * share[l])), int(caps[l] - counts[l]))
            counts[l] += grant
            r_total += grant
        full = active & (counts >= caps)
        if full.any():
            active &= ~full
            share = _renormalize(eta, active)

    r_remove = r_total - budget
    removed = r_remove
    order = sorted(range(L), key=lambda l: (eta[l], -l))
    while r_remove > 0:
        for l in order:
            if r_remove == 0:
                break
            if counts[l] > 0:
                counts[l] -= 1
                r_remove -= 1
    return BudgetAllocation(budget, [int(c) for c in counts], [int(c) for c in caps], names,
                            active=[int(a) for a in active], r_remain=0,
                            r_total=int(counts.sum()), r_remove=int(removed))


def uniform_allocation(budget: int, capacities: Sequence[int],
                       names: Sequence[str] | None = None) -> BudgetAllocation:
    """Same ReLU fraction in every layer (largest-remainder rounding to hit the budget)."""
    caps = np.asarray(capacities, dtype=np.int64)
    if budget > caps.sum() or budget < 0:
        raise InfeasibleBudget(f"budget {budget} outside [0, {int(caps.sum())}]")
    exact = budget * caps / max(int(caps.sum()), 1)
    counts = np.floor(exact + 1e-9).astype(np.int64)
    rest = budget - int(counts.sum())
    order = np.argsort(-(exact - counts), kind="stable")
    for l in order:
        if rest == 0:
            break
        if counts[l] < caps[l]:
            counts[l] += 1
            rest -= 1
    names = list(names) if names is not None else [f"relu{i}" for i in range(caps.size)]
    return BudgetAllocation(int(budget), [int(c) for c in counts], [int(c) for c in caps], names,
                            r_total=int(counts.sum()))


@dataclass
class ValidationReport:
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        return "ok" if self.ok else "; ".join(self.violations)


def validate(alloc: BudgetAllocation, relu_shapes=None) -> ValidationReport:
    """Check exact-sum, capacity bounds and (optionally) consistency with ReLU shapes."""
    v: list[str] = []
    total = sum(alloc.counts)
    if total != alloc.budget:
        v.append(f"sum {total} ≠ budget {alloc.budget}")
    for name, c, cap in zip(alloc.names, alloc.counts, alloc.capacities):
        if c < 0:
            v.append(f"layer {name}: negative count {c}")
        if c > cap:
            v.append(f"layer {name}: count {c} exceeds capacity {cap}")
    if relu_shapes is not None:
        shapes = list(relu_shapes)
        if len(shapes) != len(alloc.counts):
            v.append(f"{len(alloc.counts)} allocated layers but the model has {len(shapes)} ReLU layers")
        for (name, h, w, c), an, cap in zip(shapes, alloc.names, alloc.capacities):
            if name != an:
                v.append(f"layer order mismatch: {an} where {name} expected")
            elif h * w * c != cap:
                v.append(f"layer {name}: capacity {cap} ≠ activation size {h * w * c}")
    return ValidationReport(v)
