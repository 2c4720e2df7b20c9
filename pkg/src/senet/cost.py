"""Operation counts and private-inference latency / communication estimates.

Only multiply-accumulates and ReLUs are priced.  Batch-norm, pooling and
residual additions count zero MACs.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from .allocator import uniform_allocation
from .arch import ModelSpec

PHASES = ("online", "offline")
OPS = ("linear", "relu")


@dataclass(frozen=True)
class OpCost:
    runtime_us: float
    comm_kb: float


@dataclass(frozen=True)
class CostTable:
    """Per-operation cost: ``costs[op][phase]`` for op in {linear, relu}."""

    costs: Mapping[str, Mapping[str, OpCost]]
    gc_size_kb: float
    name: str = "custom"

    def __post_init__(self):
        for op in OPS:
            for ph in PHASES:
                c = self.costs[op][ph]
                if c.runtime_us < 0 or c.comm_kb < 0:
                    raise ValueError(f"cost table entry {op}/{ph} is negative")
        if self.gc_size_kb < 0:
            raise ValueError("gc_size_kb is negative")

    def t(self, op: str, phase: str) -> float:
        return self.costs[op][phase].runtime_us

    def kb(self, op: str, phase: str) -> float:
        return self.costs[op][phase].comm_kb

    @classmethod
    def from_dict(cls, d: dict) -> "CostTable":
        unknown = set(d) - {"name", "gc_size_kb", *OPS}
        if unknown:
            raise ValueError(f"unknown cost table keys: {sorted(unknown)}")
        costs = {op: {ph: OpCost(float(d[op][ph]["runtime_us"]), float(d[op][ph]["comm_kb"]))
                      for ph in PHASES} for op in OPS}
        return cls(costs, float(d["gc_size_kb"]), d.get("name", "custom"))

    def to_dict(self) -> dict:
        out: dict = {"name": self.name}
        for op in OPS:
            out[op] = {ph: {"runtime_us": self.t(op, ph), "comm_kb": self.kb(op, ph)} for ph in PHASES}
        out["gc_size_kb"] = self.gc_size_kb
        return out

    @classmethod
    def load(cls, path) -> "CostTable":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_table() -> CostTable:
    text = resources.files("senet").joinpath("tables/delphi.json").read_text()
    return CostTable.from_dict(json.loads(text))


def latency(n_mac: int, n_relu: int, table: CostTable, phase: str = "online") -> float:
    return n_mac * table.t("linear", phase) + n_relu * table.t("relu", phase)


def comm(n_mac: int, n_relu: int, table: CostTable, phase: str = "online") -> float:
    return n_mac * table.kb("linear", phase) + n_relu * table.kb("relu", phase)


@dataclass
class LayerCost:
    layer: str
    n_mac: int
    n_relu: int


@dataclass
class CostReport:
    n_mac: int
    n_relu: int
    layers: list[LayerCost]
    table: CostTable
    budget: int | None = None
    feasible: bool = True
    note: str = ""
    latency_us: dict[str, float] = field(init=False)
    comm_kb: dict[str, float] = field(init=False)
    gc_total_kb: float = field(init=False)

    def __post_init__(self):
        self.latency_us = {ph: latency(self.n_mac, self.n_relu, self.table, ph) for ph in PHASES}
        self.comm_kb = {ph: comm(self.n_mac, self.n_relu, self.table, ph) for ph in PHASES}
        self.gc_total_kb = self.n_relu * self.table.gc_size_kb

    def rows(self) -> list[dict]:
        t = self.table
        return [{
            "layer": l.layer, "n_mac": l.n_mac, "n_relu": l.n_relu,
            "online_lat_us": latency(l.n_mac, l.n_relu, t, "online"),
            "offline_lat_us": latency(l.n_mac, l.n_relu, t, "offline"),
            "online_kb": comm(l.n_mac, l.n_relu, t, "online"),
            "offline_kb": comm(l.n_mac, l.n_relu, t, "offline"),
            "gc_kb": l.n_relu * t.gc_size_kb,
        } for l in self.layers]

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["layer", "n_mac", "n_relu", "online_lat_us", "offline_lat_us", "online_kb", "offline_kb", "gc_kb"]
        w = csv.DictWriter(buf, cols, lineterminator="\n")
        w.writeheader()
        for r in self.rows():
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def summary(self) -> str:
        return (f"totals: n_mac={self.n_mac} n_relu={self.n_relu} "
                f"online_lat_us={self.latency_us['online']:.6g} offline_lat_us={self.latency_us['offline']:.6g} "
                f"online_kb={self.comm_kb['online']:.6g} offline_kb={self.comm_kb['offline']:.6g} "
                f"gc_kb={self.gc_total_kb:.6g}")


def count_ops(spec: ModelSpec, mask=None, d_r: float = 1.0) -> tuple[int, int, list[LayerCost]]:
    """MACs and ReLUs of the ``d_r`` sub-model; masked layers count only their ones
    inside the active channel prefix."""
    full = spec.shapes(1.0)
    shapes = spec.shapes(d_r)
    rows: list[LayerCost] = []
    if mask is not None:
        names = {l.name for l in spec.relu_layers()}
        if set(mask) - names:
            raise ValueError(f"mask layers not in spec: {sorted(set(mask) - names)}")
    for i, l in enumerate(spec.layers):
        src = shapes[spec.sources(i)[0]]
        out = shapes[l.name]
        if l.kind == "conv":
            rows.append(LayerCost(l.name, l.kernel * l.kernel * src[0] * out[0] * out[1] * out[2], 0))
        elif l.kind == "linear":
            rows.append(LayerCost(l.name, src[0] * out[0], 0))
        elif l.kind == "relu":
            m = mask.get(l.name) if mask is not None else None
            if m is None:
                n = math.prod(out)
            else:
                fs = full[l.name]
                expect = (fs[1], fs[2], fs[0]) if len(fs) == 3 else (1, 1, fs[0])
                if tuple(m.shape) != expect:
                    raise ValueError(f"mask {l.name}: shape {tuple(m.shape)} != activation {expect}")
                n = int(m[:, :, :out[0]].sum())
            rows.append(LayerCost(l.name, 0, n))
    return sum(r.n_mac for r in rows), sum(r.n_relu for r in rows), rows


def cost_report(spec: ModelSpec, mask=None, d_r: float = 1.0, table: CostTable | None = None) -> CostReport:
    n_mac, n_relu, rows = count_ops(spec, mask, d_r)
    return CostReport(n_mac, n_relu, rows, table or default_table())


def comm_savings(ar: CostReport | int, pr: CostReport | int) -> float:
    """AR-to-PR ratio of ReLU counts (the ReLU share of communication); inf if PR has none."""
    a = ar.n_relu if isinstance(ar, CostReport) else int(ar)
    p = pr.n_relu if isinstance(pr, CostReport) else int(pr)
    return math.inf if p == 0 else a / p


def sweep(spec: ModelSpec, budgets: Sequence[int], table: CostTable | None = None) -> list[CostReport]:
    """One report per budget, pricing an exact-budget mask spread uniformly over
    the ReLU layers; out-of-range budgets are flagged and priced at zero ReLUs."""
    table = table or default_table()
    n_mac, cap, rows = count_ops(spec)
    relu_rows = [r for r in rows if r.n_mac == 0]
    out = []
    for b in budgets:
        b = int(b)
        ok = 0 <= b <= cap
        counts = uniform_allocation(b if ok else 0, [r.n_relu for r in relu_rows]).counts
        per = iter(counts)
        layers = [r if r.n_mac else LayerCost(r.layer, 0, next(per)) for r in rows]
        note = "" if ok else f"infeasible budget: {b} outside [0, {cap}]"
        out.append(CostReport(n_mac, sum(counts), layers, table, budget=b, feasible=ok, note=note))
    return out


def relu_prefix_widths(spec: ModelSpec, d_r: float) -> dict[str, int]:
    """Active channel count of every ReLU layer in the ``d_r`` sub-model."""
    shapes = spec.shapes(d_r)
    return {l.name: shapes[l.name][0] for l in spec.relu_layers()}


__all__ = [
    "CostTable", "OpCost", "CostReport", "LayerCost", "default_table", "latency", "comm",
    "count_ops", "cost_report", "comm_savings", "sweep", "relu_prefix_widths",
]
