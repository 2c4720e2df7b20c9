"""Three-seed directional ablation on a 10-class toy-cnn-8 at a 25% ReLU budget.

Per seed: train the AR model, allocate by sensitivity, search the mask,
fine-tune with and without the activation penalty, and train a baseline whose
mask keeps a uniform 25% of every layer at random positions.  The baseline
fine-tunes from the AR weights for the combined stage-2 and stage-3 epochs,
so both arms see the same number of training epochs after stage 1.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from senet.allocator import allocate, uniform_allocation
from senet.arch import build_model, relu_shapes, toy_cnn_8
from senet.data import stratified_split, synth_generate
from senet.engine import substream
from senet.masks import init_mask, run_mask_search
from senet.sensitivity import sensitivity_profile
from senet.trainer import TrainConfig, activation_similarity, evaluate, finetune_pr, train_ar

SEEDS = (0, 1, 2)
CLASSES = 10
BUDGET_FRACTION = 0.25
DIFFICULTY = 1.0
PER_CLASS = 120
TEST_PER_CLASS = 100
CONFIG = TrainConfig(epochs=(30, 10, 30), lr=(0.05, 0.05, 0.001))


@dataclass
class SeedResult:
    seed: int
    ar_val: float
    ar_test: float
    stage2: float
    stage3: float
    stage3_no_pram: float
    uniform: float
    sim: float
    sim_no_pram: float
    seconds: float


def run_seed(seed: int, config: TrainConfig = CONFIG) -> SeedResult:
    t0 = time.process_time()
    cfg = replace(config, seed=seed)
    spec = toy_cnn_8(classes=CLASSES)
    shapes = relu_shapes(spec)
    names = [s[0] for s in shapes]
    caps = [h * w * c for _, h, w, c in shapes]
    budget = int(BUDGET_FRACTION * sum(caps))

    full = synth_generate(CLASSES, PER_CLASS, 16, DIFFICULTY, seed=seed)
    test = synth_generate(CLASSES, TEST_PER_CLASS, 16, DIFFICULTY, seed=1000 + seed, split="test")
    train, val = stratified_split(full, cfg.val_fraction, substream(seed, "split"))

    init = build_model(spec, substream(seed, "init"))
    n = cfg.sensitivity_samples
    prof = sensitivity_profile(init, train.images[:n], train.labels[:n], cfg.proxy_density)
    ar = train_ar(init, train, val, cfg)

    alloc = allocate(budget, prof.eta_hat, caps, names)
    search = run_mask_search(ar, alloc, train, val, cfg)
    pr = finetune_pr(ar, search.mask, search.model, train, val, cfg)
    pr0 = finetune_pr(ar, search.mask, search.model, train, val, replace(cfg, beta=0.0))

    umask = init_mask(uniform_allocation(budget, caps, names), shapes, cfg.granularity,
                      substream(seed, "uniform"))
    e1, e2, e3 = cfg.epochs
    upr = finetune_pr(ar, umask, ar.clone(), train, val, replace(cfg, epochs=(e1, e2, e2 + e3)))

    return SeedResult(
        seed=seed,
        ar_val=evaluate(ar, val)[0],
        ar_test=evaluate(ar, test)[0],
        stage2=evaluate(search.model, test)[0],
        stage3=evaluate(pr, test)[0],
        stage3_no_pram=evaluate(pr0, test)[0],
        uniform=evaluate(upr, test)[0],
        sim=activation_similarity(pr, ar, test),
        sim_no_pram=activation_similarity(pr0, ar, test),
        seconds=time.process_time() - t0,
    )


@dataclass
class Ablation:
    seeds: list[SeedResult]

    def mean(self, key: str) -> float:
        return float(np.mean([getattr(s, key) for s in self.seeds]))

    @property
    def cpu_seconds(self) -> float:
        return sum(s.seconds for s in self.seeds)

    def table(self) -> str:
        keys = ["ar_test", "stage2", "stage3", "stage3_no_pram", "uniform", "sim", "sim_no_pram"]
        lines = ["seed " + " ".join(f"{k:>14s}" for k in keys)]
        for s in self.seeds:
            lines.append(f"{s.seed:4d} " + " ".join(f"{getattr(s, k):14.4f}" for k in keys))
        lines.append("mean " + " ".join(f"{self.mean(k):14.4f}" for k in keys))
        return "\n".join(lines)


def run_all(seeds=SEEDS) -> Ablation:
    return Ablation([run_seed(s) for s in seeds])


if __name__ == "__main__":
    res = run_all()
    print(res.table())
    print(f"cpu {res.cpu_seconds:.0f}s")
