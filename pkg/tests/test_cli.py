import json
import shutil

import pytest

from senet.allocator import BudgetAllocation
from senet.arch import load_zoo, relu_shapes
from senet.cli import main
from senet.config import RunConfig, resolve_seed
from senet.engine import ConfigError
from senet.runner import ARTIFACTS, STAGES, sha256_file
from senet.sensitivity import SensitivityProfile

TINY_CONFIG = {
    "model": "toy-cnn-8",
    "budget_fraction": 0.25,
    "epochs": [1, 2, 1],
    "batch_size": 32,
    "sensitivity_samples": 32,
    "dataset": {"kind": "synth", "per_class": 20, "test_per_class": 10, "difficulty": 0.3},
}


def write_config(d, **extra):
    p = d / "config.in.json"
    p.write_text(json.dumps({**TINY_CONFIG, **extra}))
    return p


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    assert main(["pipeline", "--workdir", str(d), "--config", str(write_config(d))]) == 0
    return d


def test_pipeline_smoke(pipeline_dir):
    m = json.loads((pipeline_dir / "manifest.json").read_text())
    assert all(m["stages"][s] for s in STAGES)
    for name in ("ar", "profile", "allocation", "mask", "stage2", "pr", "metrics", "cost", "spec"):
        assert (pipeline_dir / ARTIFACTS[name]).exists(), name
    alloc = BudgetAllocation.load(pipeline_dir / ARTIFACTS["allocation"])
    caps = [h * w * c for _, h, w, c in relu_shapes(load_zoo("toy-cnn-8"))]
    assert sum(alloc.counts) == round(0.25 * sum(caps))


def test_resume_after_deleting_pr_reruns_only_tail(pipeline_dir, tmp_path, capsys):
    d = tmp_path / "resume"
    shutil.copytree(pipeline_dir, d)
    before = {n: sha256_file(d / ARTIFACTS[n]) for n in ("ar", "mask", "allocation")}
    (d / ARTIFACTS["pr"]).unlink()
    code, out, _ = run(capsys, "pipeline", "--workdir", d, "--config", d / "config.in.json", "--resume")
    assert code == 0 and "ran finetune, cost" in out
    assert before == {n: sha256_file(d / ARTIFACTS[n]) for n in before}
    assert (d / ARTIFACTS["pr"]).exists()


def test_resume_with_nothing_to_do(pipeline_dir, tmp_path, capsys):
    d = tmp_path / "idle"
    shutil.copytree(pipeline_dir, d)
    code, out, _ = run(capsys, "pipeline", "--workdir", d, "--config", d / "config.in.json", "--resume")
    assert code == 0 and "nothing" in out


def test_same_seed_same_mask(pipeline_dir, tmp_path):
    d = tmp_path / "again"
    d.mkdir()
    assert main(["pipeline", "--workdir", str(d), "--config", str(write_config(d))]) == 0
    assert sha256_file(d / ARTIFACTS["mask"]) == sha256_file(pipeline_dir / ARTIFACTS["mask"])
    assert sha256_file(d / ARTIFACTS["pr"]) == sha256_file(pipeline_dir / ARTIFACTS["pr"])


def test_allocate_resnet18_budget(tmp_path, capsys):
    names = [n for n, *_ in relu_shapes(load_zoo("resnet18-cifar"))]
    k = len(names)
    theta = [0.02 * (i + 1) for i in range(k)]
    alpha = [1 - t for t in theta]
    SensitivityProfile(0.1, names, theta, alpha, [a / sum(alpha) for a in alpha]).save(tmp_path / "p.json")
    code, out, _ = run(capsys, "allocate", "--workdir", tmp_path, "--budget", 100000,
                       "--profile", "p.json", "--spec", "resnet18-cifar")
    assert code == 0 and "(sum 100000)" in out
    alloc = BudgetAllocation.load(tmp_path / ARTIFACTS["allocation"])
    assert sum(alloc.counts) == 100000 and alloc.names == names


def test_cost_resnet18(tmp_path, capsys):
    code, out, _ = run(capsys, "cost", "--workdir", tmp_path, "--spec", "resnet18-cifar")
    assert code == 0
    assert out.splitlines()[0].startswith("layer,n_mac,n_relu")
    assert "n_relu=557056" in out.splitlines()[-1]


def test_cost_with_mask(pipeline_dir, capsys):
    code, out, _ = run(capsys, "cost", "--workdir", pipeline_dir, "--mask", ARTIFACTS["mask"])
    alloc = BudgetAllocation.load(pipeline_dir / ARTIFACTS["allocation"])
    assert code == 0 and f"n_relu={alloc.budget} " in out


def test_sweep_resnet18(tmp_path, capsys):
    code, out, _ = run(capsys, "sweep", "--workdir", tmp_path, "--spec", "resnet18-cifar",
                       "--budgets", "49600,100000,150000,0,999999999")
    rows = [l.split(",") for l in out.splitlines()[1:]]
    assert code == 0 and [r[7] for r in rows[:3]] == ["11.23", "5.571", "3.714"]
    assert "infinite" in rows[3][8] and "infeasible" in rows[4][8]


def test_evaluate_unsupported_rate(pipeline_dir, capsys):
    code, _, err = run(capsys, "evaluate", "--workdir", pipeline_dir, "--config",
                       pipeline_dir / "config.in.json", "--dr", 0.5)
    assert code == 1 and "rate not supported" in err


def test_evaluate_ok(pipeline_dir, capsys):
    code, out, _ = run(capsys, "evaluate", "--workdir", pipeline_dir, "--config",
                       pipeline_dir / "config.in.json", "--mask", ARTIFACTS["mask"])
    assert code == 0 and "d_r=1 test accuracy" in out


def test_missing_prerequisite(tmp_path, capsys):
    code, _, err = run(capsys, "finetune", "--workdir", tmp_path, "--config", write_config(tmp_path))
    assert code == 1 and "AR checkpoint" in err


def test_unknown_config_key(tmp_path, capsys):
    code, _, err = run(capsys, "pipeline", "--workdir", tmp_path, "--config", write_config(tmp_path, betta=1))
    assert code == 1 and "betta" in err


def test_seed_precedence(monkeypatch):
    cfg = RunConfig.from_dict({"seed": 3})
    monkeypatch.delenv("SENET_SEED", raising=False)
    assert resolve_seed(cfg, None).seed == 3
    monkeypatch.setenv("SENET_SEED", "7")
    assert resolve_seed(cfg, None).seed == 7
    assert resolve_seed(cfg, 11).seed == 11
    monkeypatch.setenv("SENET_SEED", "x")
    with pytest.raises(ConfigError, match="SENET_SEED"):
        resolve_seed(cfg, None)


def test_config_round_trip():
    cfg = RunConfig.from_dict(TINY_CONFIG)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    assert RunConfig.from_dict({"preset": "cifar-full"}).train.epochs == (240, 150, 180)
