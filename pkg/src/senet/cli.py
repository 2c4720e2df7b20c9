"""``senet`` command line: the full pipeline and one subcommand per stage.

Exit codes: 0 success, 1 validation error (bad config, missing input,
infeasible budget, unsupported rate), 2 runtime failure.  Paths are
resolved against ``--workdir``.  Option precedence: flag > config file >
built-in default; ``SENET_SEED`` sits between ``--seed`` and the config.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .allocator import BudgetAllocation
from .arch import build_model
from .arch.zoo import ZOO
from .config import RunConfig, config_field_docs, load_spec, resolve_seed
from .cost import CostTable, comm_savings, cost_report, count_ops, default_table, sweep
from .engine import substream
from .engine.checkpoint import atomic_write_bytes
from .masks import load_mask, run_mask_search, save_mask
from .runner import (
    ARTIFACTS, Pipeline, allocation_for, evaluate_checkpoint, load_model, require, resolve_budget,
    run_spec, save_model, sensitivity_batch,
)
from .sensitivity import SensitivityProfile, sensitivity_profile
from .trainer import MetricsLog, finetune_pr, train_ar

log = logging.getLogger("senet")


def _config(args) -> RunConfig:
    cfg = RunConfig.load(_path(args, args.config)) if args.config else RunConfig()
    cfg = resolve_seed(cfg, args.seed)
    model = getattr(args, "spec", None)
    if model:
        local = _path(args, model)
        cfg = replace(cfg, model=str(local) if model not in ZOO and local.exists() else model)
    if getattr(args, "budget", None) is not None:
        cfg = replace(cfg, budget=args.budget)
    if getattr(args, "granularity", None):
        cfg = replace(cfg, train=replace(cfg.train, granularity=args.granularity))
    return cfg


def _path(args, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(args.workdir) / p


def _out(args, name: str) -> Path:
    explicit = getattr(args, "out", None)
    return _path(args, explicit) if explicit else Path(args.workdir) / ARTIFACTS[name]


def _table(args, cfg: RunConfig) -> CostTable:
    ref = getattr(args, "table", None) or cfg.cost_table
    return CostTable.load(_path(args, ref)) if ref else default_table()


# -- subcommands ---------------------------------------------------------------------

def cmd_pipeline(args) -> int:
    cfg = _config(args)
    p = Pipeline(Path(args.workdir), cfg)
    m = p.run(resume=args.resume)
    print(f"run {m.run_id}: ran {', '.join(p.ran) or 'nothing (all stages up to date)'}")
    train, val, test = p.data
    for r in p.spec.dropout_rates:
        acc, _ = evaluate_checkpoint(p.spec, p.path("pr"), test, r, load_mask(p.path("mask")))
        print(f"d_r={r:g} test accuracy {acc:.4f}")
    return 0


def cmd_train_ar(args) -> int:
    cfg = _config(args)
    p = Pipeline(Path(args.workdir), cfg)
    train, val, _ = p.data
    ar = train_ar(p.spec, train, val, cfg.train, metrics=MetricsLog(_path(args, "metrics.csv")))
    out = _out(args, "ar")
    save_model(out, ar)
    atomic_write_bytes(p.path("spec"), p.spec.to_json().encode())
    print(f"wrote {out}")
    return 0


def cmd_sensitivity(args) -> int:
    cfg = _config(args)
    p = Pipeline(Path(args.workdir), cfg)
    train, _, _ = p.data
    init = build_model(p.spec, substream(cfg.seed, "init"))
    x, y = sensitivity_batch(train, cfg.train.sensitivity_samples, cfg.seed)
    prof = sensitivity_profile(init, x, y, cfg.train.proxy_density)
    out = _out(args, "profile")
    atomic_write_bytes(out, prof.to_json().encode())
    for n, e in zip(prof.relu_layers, prof.eta_hat):
        print(f"{n:24s} eta_hat={e:.6f}")
    print(f"wrote {out}")
    return 0


def cmd_allocate(args) -> int:
    cfg = _config(args)
    spec = run_spec(cfg)
    prof = SensitivityProfile.load(require(_path(args, args.profile or ARTIFACTS["profile"]), "sensitivity profile"))
    alloc = allocation_for(spec, prof, resolve_budget(cfg, spec))
    out = _out(args, "allocation")
    atomic_write_bytes(out, alloc.to_json().encode())
    print(f"budget {alloc.budget}: {' '.join(map(str, alloc.counts))} (sum {sum(alloc.counts)})")
    print(f"wrote {out}")
    return 0


def cmd_search_mask(args) -> int:
    cfg = _config(args)
    p = Pipeline(Path(args.workdir), cfg)
    train, val, _ = p.data
    ar = load_model(require(_path(args, args.ar or ARTIFACTS["ar"]), "AR checkpoint"), p.spec)
    alloc = BudgetAllocation.load(require(_path(args, args.allocation or ARTIFACTS["allocation"]), "allocation"))
    res = run_mask_search(ar, alloc, train, val, cfg.train, metrics=MetricsLog(_path(args, "metrics.csv")))
    out = _out(args, "mask")
    save_mask(out, res.mask)
    save_model(p.path("stage2"), res.model)
    for h in res.history:
        print(f"epoch {h.epoch}: hamming {h.hamming:.4f} val_acc {h.val_acc:.4f}")
    print(f"best epoch {res.best_epoch}; wrote {out}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _config(args)
    p = Pipeline(Path(args.workdir), cfg)
    train, val, _ = p.data
    ar = load_model(require(_path(args, args.ar or ARTIFACTS["ar"]), "AR checkpoint"), p.spec)
    mask = load_mask(require(_path(args, args.mask or ARTIFACTS["mask"]), "mask"))
    snap_path = _path(args, args.snapshot or ARTIFACTS["stage2"])
    snap = load_model(snap_path, p.spec) if snap_path.exists() else None
    pr = finetune_pr(ar, mask, snap, train, val, cfg.train, metrics=MetricsLog(_path(args, "metrics.csv")))
    out = _out(args, "pr")
    save_model(out, pr)
    print(f"wrote {out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    p = Pipeline(Path(args.workdir), cfg)
    ckpt = require(_path(args, args.checkpoint), "checkpoint")
    mask = load_mask(require(_path(args, args.mask), "mask")) if args.mask else None
    dataset = dict(zip(("train", "val", "test"), p.data))[args.split]
    acc, per_class = evaluate_checkpoint(p.spec, ckpt, dataset, args.dr, mask)
    print(f"d_r={args.dr:g} {args.split} accuracy {acc:.4f}")
    print("per-class: " + " ".join(f"{a:.3f}" for a in per_class))
    return 0


def cmd_cost(args) -> int:
    cfg = _config(args)
    spec = load_spec(cfg.model)
    if args.dr not in spec.dropout_rates:
        spec = spec.with_rates(sorted(set(spec.dropout_rates) | {args.dr}))
    mask = load_mask(require(_path(args, args.mask), "mask")) if args.mask else None
    rep = cost_report(spec, mask, args.dr, _table(args, cfg))
    text = rep.to_csv() + rep.summary() + "\n"
    if args.out:
        atomic_write_bytes(_path(args, args.out), text.encode())
    sys.stdout.write(text)
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    spec = load_spec(cfg.model)
    table = _table(args, cfg)
    budgets = [int(b) for b in args.budgets.split(",") if b.strip()]
    ar_relu = count_ops(spec)[1]
    print("budget,n_relu,online_lat_us,offline_lat_us,online_kb,offline_kb,gc_kb,comm_savings,status")
    for rep in sweep(spec, budgets, table):
        sav = f"{comm_savings(ar_relu, rep):.4g}" if rep.feasible else ""
        status = "ok" if rep.feasible else rep.note
        if sav == "inf":
            status = "zero ReLUs: savings infinite"
        print(f"{rep.budget},{rep.n_relu},{rep.latency_us['online']:.6g},{rep.latency_us['offline']:.6g},"
              f"{rep.comm_kb['online']:.6g},{rep.comm_kb['offline']:.6g},{rep.gc_total_kb:.6g},"
              f"{sav},{status}")
    return 0


# -- parser -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    keys = "; ".join(f"{k}: {v}" for k, v in config_field_docs().items() if v != "TrainConfig field")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default=".", help="root for all relative paths (default: .)")
    common.add_argument("--config", help="JSON config; unknown keys are errors. Run keys: " + keys)
    common.add_argument("--seed", type=int, help="overrides SENET_SEED and the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="senet", description="ReLU-budgeted model training and PI cost reports.")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(fn=fn)
        return p

    p = add("pipeline", cmd_pipeline, "run every stage, persisting after each one")
    p.add_argument("--resume", action="store_true", help="skip stages whose artifacts still verify")
    p.add_argument("--spec", help="zoo name or spec JSON (overrides config 'model')")

    p = add("train-ar", cmd_train_ar, "stage 1: train the all-ReLU model")
    p.add_argument("--spec")
    p.add_argument("--out")

    p = add("sensitivity", cmd_sensitivity, "ReLU sensitivity of the untrained model")
    p.add_argument("--spec")
    p.add_argument("--out")

    p = add("allocate", cmd_allocate, "per-layer ReLU counts for a budget")
    p.add_argument("--budget", type=int, help="overrides config 'budget'")
    p.add_argument("--profile")
    p.add_argument("--spec")
    p.add_argument("--out")

    p = add("search-mask", cmd_search_mask, "stage 2: ReLU mask search")
    p.add_argument("--spec")
    p.add_argument("--ar")
    p.add_argument("--allocation")
    p.add_argument("--granularity", choices=["pixel", "channel"], help="overrides config 'granularity'")
    p.add_argument("--out")

    p = add("finetune", cmd_finetune, "stage 3: fine-tune the partial-ReLU model")
    p.add_argument("--spec")
    p.add_argument("--ar")
    p.add_argument("--mask")
    p.add_argument("--snapshot")
    p.add_argument("--out")

    p = add("evaluate", cmd_evaluate, "accuracy of a checkpoint")
    p.add_argument("--spec")
    p.add_argument("--checkpoint", default=ARTIFACTS["pr"])
    p.add_argument("--mask")
    p.add_argument("--dr", type=float, default=1.0)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")

    p = add("cost", cmd_cost, "MAC/ReLU counts and PI latency/communication as CSV")
    p.add_argument("--spec")
    p.add_argument("--mask")
    p.add_argument("--dr", type=float, default=1.0)
    p.add_argument("--table", help="cost table JSON (overrides config 'cost_table')")
    p.add_argument("--out")

    p = add("sweep", cmd_sweep, "cost reports over a list of budgets")
    p.add_argument("--spec")
    p.add_argument("--budgets", required=True, help="comma-separated ReLU budgets")
    p.add_argument("--table")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ValueError as exc:  # config, spec, format, budget and rate errors
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
