"""Pipeline orchestration over a working directory, with a resumable manifest."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .allocator import BudgetAllocation, allocate, validate
from .arch import Model, ModelSpec, build_model, relu_shapes
from .config import RunConfig, build_datasets, load_spec
from .cost import CostReport, CostTable, cost_report, default_table
from .engine import ConfigError, load_checkpoint, save_checkpoint, substream
from .engine.checkpoint import atomic_write_bytes
from .masks import MaskSearchResult, ReluMask, load_mask, run_mask_search, save_mask
from .sensitivity import SensitivityProfile, sensitivity_profile
from .trainer import MetricsLog, evaluate, finetune_pr, train_ar

log = logging.getLogger(__name__)

STAGES = ("train_ar", "sensitivity", "allocate", "search_mask", "finetune", "cost")

ARTIFACTS = {
    "spec": "spec.json",
    "config": "config.json",
    "ar": "ar.ckpt",
    "profile": "profile.json",
    "allocation": "allocation.json",
    "mask": "mask.bin",
    "stage2": "stage2.ckpt",
    "pr": "pr.ckpt",
    "metrics": "metrics.csv",
    "cost": "cost.csv",
}

# artifacts each stage produces; a stage is complete only if all of them verify
STAGE_OUTPUTS = {
    "train_ar": ("ar",),
    "sensitivity": ("profile",),
    "allocate": ("allocation",),
    "search_mask": ("mask", "stage2"),
    "finetune": ("pr",),
    "cost": ("cost",),
}


class MissingArtifact(ConfigError):
    pass


class LockHeld(RuntimeError):
    pass


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    run_id: str
    seed: int
    config: dict
    artifacts: dict[str, dict] = field(default_factory=dict)   # name -> {path, sha256}
    stages: dict[str, bool] = field(default_factory=lambda: {s: False for s in STAGES})
    timestamps: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"run_id": self.run_id, "seed": self.seed, "config": self.config,
                           "artifacts": self.artifacts, "stages": self.stages,
                           "timestamps": self.timestamps}, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(d["run_id"], int(d["seed"]), d["config"], d.get("artifacts", {}),
                   {s: bool(d.get("stages", {}).get(s, False)) for s in STAGES}, d.get("timestamps", {}))

    def record(self, workdir: Path, name: str) -> None:
        rel = ARTIFACTS[name]
        self.artifacts[name] = {"path": rel, "sha256": sha256_file(workdir / rel)}

    def verify(self, workdir: Path, name: str) -> bool:
        a = self.artifacts.get(name)
        if a is None:
            return False
        p = workdir / a["path"]
        return p.exists() and sha256_file(p) == a["sha256"]

    def stage_valid(self, workdir: Path, stage: str) -> bool:
        return self.stages.get(stage, False) and all(self.verify(workdir, a) for a in STAGE_OUTPUTS[stage])


def run_id_for(config: RunConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@contextmanager
def workdir_lock(workdir: Path):
    """One pipeline per working directory; a lock left by a dead process is taken over."""
    lock = workdir / ".senet.lock"
    for _ in range(2):
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                pid = int(lock.read_text().strip() or 0)
            except (OSError, ValueError):
                pid = 0
            if pid and _alive(pid):
                raise LockHeld(f"{workdir} is in use by process {pid} (lock {lock})") from None
            lock.unlink(missing_ok=True)
    else:  # pragma: no cover - lost a race twice
        raise LockHeld(f"could not acquire {lock}")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


# -- artifact helpers ---------------------------------------------------------------

def save_model(path: Path, model: Model) -> None:
    save_checkpoint(path, model.state_dict())


def load_model(path: Path, spec: ModelSpec) -> Model:
    if not Path(path).exists():
        raise MissingArtifact(f"missing checkpoint {path}")
    model = build_model(spec, 0)
    model.load_state_dict(load_checkpoint(path))
    return model


def require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise MissingArtifact(f"missing {what}: {path} (run the upstream stage first)")
    return Path(path)


def resolve_budget(config: RunConfig, spec: ModelSpec) -> int:
    capacity = sum(h * w * c for _, h, w, c in relu_shapes(spec))
    if config.budget is not None:
        return int(config.budget)
    if config.budget_fraction is None:
        raise ConfigError("config needs either 'budget' or 'budget_fraction'")
    return int(round(config.budget_fraction * capacity))


def sensitivity_batch(train, n: int, seed: int):
    idx = substream(seed, "sensitivity").permutation(len(train))[:n]
    return train.images[idx], train.labels[idx]


def run_spec(config: RunConfig) -> ModelSpec:
    spec = load_spec(config.model)
    if tuple(spec.dropout_rates) != tuple(config.train.dropout_rates):
        spec = spec.with_rates(config.train.dropout_rates)
    spec.validate()
    return spec


# -- pipeline -----------------------------------------------------------------------

@dataclass
class Pipeline:
    workdir: Path
    config: RunConfig
    manifest: RunManifest | None = None
    ran: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.workdir = Path(self.workdir)
        self.spec = run_spec(self.config)
        self._data = None

    def path(self, name: str) -> Path:
        return self.workdir / ARTIFACTS[name]

    @property
    def data(self):
        if self._data is None:
            self._data = build_datasets(self.config, self.spec)
        return self._data

    def _manifest_path(self) -> Path:
        return self.workdir / "manifest.json"

    def load_or_new_manifest(self, resume: bool) -> RunManifest:
        mp = self._manifest_path()
        rid = run_id_for(self.config)
        if resume and mp.exists():
            m = RunManifest.from_dict(json.loads(mp.read_text()))
            if m.run_id != rid:
                raise ConfigError(f"--resume with a different config (manifest run {m.run_id}, now {rid})")
            return m
        return RunManifest(rid, self.config.seed, self.config.to_dict())

    def save_manifest(self) -> None:
        atomic_write_bytes(self._manifest_path(), self.manifest.to_json().encode())

    def run(self, resume: bool = False) -> RunManifest:
        self.workdir.mkdir(parents=True, exist_ok=True)
        with workdir_lock(self.workdir):
            self.manifest = self.load_or_new_manifest(resume)
            self._write_static()
            invalid = False
            for stage in STAGES:
                if resume and not invalid and self.manifest.stage_valid(self.workdir, stage):
                    log.info("stage %s up to date", stage)
                    continue
                invalid = True
                self.manifest.stages[stage] = False
                self.save_manifest()
                getattr(self, f"stage_{stage}")()
                for a in STAGE_OUTPUTS[stage]:
                    self.manifest.record(self.workdir, a)
                if self.path("metrics").exists():
                    self.manifest.record(self.workdir, "metrics")
                self.manifest.stages[stage] = True
                self.manifest.timestamps[stage] = time.time()
                self.save_manifest()
                self.ran.append(stage)
        return self.manifest

    def _write_static(self) -> None:
        atomic_write_bytes(self.path("spec"), self.spec.to_json().encode())
        atomic_write_bytes(self.path("config"), (json.dumps(self.config.to_dict(), indent=1) + "\n").encode())
        self.manifest.record(self.workdir, "spec")
        self.manifest.record(self.workdir, "config")

    def _metrics(self) -> MetricsLog:
        return MetricsLog(self.path("metrics"))

    # each stage reads its inputs from disk so resumed runs see identical state
    def stage_train_ar(self) -> None:
        train, val, _ = self.data
        self.path("metrics").unlink(missing_ok=True)
        model = build_model(self.spec, substream(self.config.seed, "init"))
        ar = train_ar(model, train, val, self.config.train, metrics=self._metrics())
        save_model(self.path("ar"), ar)

    def stage_sensitivity(self) -> None:
        train, _, _ = self.data
        init = build_model(self.spec, substream(self.config.seed, "init"))
        x, y = sensitivity_batch(train, self.config.train.sensitivity_samples, self.config.seed)
        prof = sensitivity_profile(init, x, y, self.config.train.proxy_density)
        atomic_write_bytes(self.path("profile"), prof.to_json().encode())

    def stage_allocate(self) -> None:
        prof = SensitivityProfile.load(require(self.path("profile"), "sensitivity profile"))
        alloc = allocation_for(self.spec, prof, resolve_budget(self.config, self.spec))
        atomic_write_bytes(self.path("allocation"), alloc.to_json().encode())

    def stage_search_mask(self) -> None:
        train, val, _ = self.data
        ar = load_model(require(self.path("ar"), "AR checkpoint"), self.spec)
        alloc = BudgetAllocation.load(require(self.path("allocation"), "allocation"))
        res = run_mask_search(ar, alloc, train, val, self.config.train, metrics=self._metrics())
        save_mask(self.path("mask"), res.mask)
        save_model(self.path("stage2"), res.model)

    def stage_finetune(self) -> None:
        train, val, _ = self.data
        ar = load_model(require(self.path("ar"), "AR checkpoint"), self.spec)
        mask = load_mask(require(self.path("mask"), "mask"))
        snap = load_model(self.path("stage2"), self.spec) if self.path("stage2").exists() else None
        pr = finetune_pr(ar, mask, snap, train, val, self.config.train, metrics=self._metrics())
        save_model(self.path("pr"), pr)

    def stage_cost(self) -> None:
        mask = load_mask(require(self.path("mask"), "mask"))
        table = CostTable.load(self.config.cost_table) if self.config.cost_table else default_table()
        lines = []
        for r in self.spec.dropout_rates:
            rep = cost_report(self.spec, mask, r, table)
            lines.append(f"# d_r={r:g}\n" + rep.to_csv() + rep.summary() + "\n")
        atomic_write_bytes(self.path("cost"), "".join(lines).encode())


def allocation_for(spec: ModelSpec, prof: SensitivityProfile, budget: int) -> BudgetAllocation:
    shapes = relu_shapes(spec)
    names = [s[0] for s in shapes]
    if prof.relu_layers != names:
        raise ConfigError(f"profile layers {prof.relu_layers} do not match the spec's ReLU layers {names}")
    alloc = allocate(budget, prof.eta_hat, [h * w * c for _, h, w, c in shapes], names)
    report = validate(alloc, shapes)
    if not report:  # pragma: no cover - allocate guarantees this
        raise ConfigError(str(report))
    return alloc


def evaluate_checkpoint(spec: ModelSpec, ckpt: Path, dataset, d_r: float,
                        mask: ReluMask | None = None) -> tuple[float, np.ndarray]:
    model = load_model(ckpt, spec)
    model.check_rate(d_r)
    model.mask = mask
    return evaluate(model, dataset, d_r)


__all__ = [
    "Pipeline", "RunManifest", "STAGES", "ARTIFACTS", "MissingArtifact", "LockHeld",
    "workdir_lock", "save_model", "load_model", "allocation_for", "resolve_budget",
    "evaluate_checkpoint", "run_spec", "sha256_file", "CostReport", "MaskSearchResult",
]
