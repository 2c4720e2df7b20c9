import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from senet.arch import load_zoo  # noqa: E402
from senet.data import stratified_split, synth_generate  # noqa: E402
from senet.engine import substream  # noqa: E402
from senet.trainer import TrainConfig, train_ar  # noqa: E402

TINY = TrainConfig(epochs=(2, 3, 2), batch_size=32, seed=0)


@pytest.fixture(scope="session")
def tiny_data():
    ds = synth_generate(4, 40, 16, 0.3, seed=11)
    return stratified_split(ds, 0.1, substream(0, "split"))


@pytest.fixture(scope="session")
def tiny_ar(tiny_data):
    train, val = tiny_data
    return train_ar(load_zoo("toy-cnn-8"), train, val, TINY)


@pytest.fixture(scope="session")
def ablation():
    import ablation as A
    return A.run_all()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


RESULTS: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str = "") -> None:
    RESULTS[n] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
