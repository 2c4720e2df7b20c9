import numpy as np
import pytest

from senet.data import (
    CIFAR_RECORD, Dataset, augment, batches, read_cifar10_binary, stratified_split, synth_generate,
)
from senet.engine import FormatError


def golden_records():
    a = np.zeros(CIFAR_RECORD, np.uint8)
    a[0] = 3
    a[1:1025] = np.arange(1024) % 256          # red plane ramp
    a[1025 + 5] = 200                          # one green pixel at row 0, col 5
    b = np.full(CIFAR_RECORD, 255, np.uint8)
    b[0] = 9
    return bytes(a) + bytes(b)


def test_cifar_golden_file(tmp_path):
    p = tmp_path / "batch.bin"
    p.write_bytes(golden_records())
    ds = read_cifar10_binary(p)
    assert len(ds) == 2 and ds.labels.tolist() == [3, 9] and ds.images.shape == (2, 3, 32, 32)
    np.testing.assert_array_equal(ds.images[0, 0].reshape(-1), (np.arange(1024) % 256).astype(np.float32) / 255)
    assert ds.images[0, 1, 0, 5] == pytest.approx(200 / 255) and ds.images[0, 1].sum() == pytest.approx(200 / 255)
    assert (ds.images[1] == 1.0).all()


def test_cifar_normalization_from_config(tmp_path):
    p = tmp_path / "batch.bin"
    p.write_bytes(golden_records())
    ds = read_cifar10_binary(p, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5))
    assert (ds.images[1] == 1.0).all() and ds.images[0, 2].min() == -1.0


def test_cifar_truncated_record(tmp_path):
    p = tmp_path / "batch.bin"
    p.write_bytes(golden_records()[:-10])
    with pytest.raises(FormatError, match=f"byte offset {CIFAR_RECORD}"):
        read_cifar10_binary(p)


def test_cifar_bad_label(tmp_path):
    buf = bytearray(golden_records())
    buf[CIFAR_RECORD] = 12
    p = tmp_path / "batch.bin"
    p.write_bytes(bytes(buf))
    with pytest.raises(FormatError, match="label 12"):
        read_cifar10_binary(p)


def test_synth_shapes_and_balance():
    ds = synth_generate(4, 500, 16, 0.5, seed=0)
    assert ds.images.shape == (2000, 3, 16, 16) and ds.labels.shape == (2000,)
    assert ds.class_counts.tolist() == [500] * 4
    assert 0 <= ds.images.min() and ds.images.max() <= 1


def test_synth_is_deterministic():
    a = synth_generate(5, 20, 12, 0.7, seed=4)
    b = synth_generate(5, 20, 12, 0.7, seed=4)
    assert a.images.tobytes() == b.images.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    assert synth_generate(5, 20, 12, 0.7, seed=5).images.tobytes() != a.images.tobytes()


def test_synth_argument_checks():
    with pytest.raises(ValueError):
        synth_generate(1, 10)
    with pytest.raises(ValueError):
        synth_generate(4, 10, difficulty=1.5)


def ridge_probe_accuracy(train: Dataset, test: Dataset, alpha: float = 1e-2) -> float:
    def feats(ds):
        x = ds.images.reshape(len(ds), -1).astype(np.float64)
        return np.hstack([x, np.ones((len(ds), 1))])
    x = feats(train)
    y = np.eye(train.classes)[train.labels]
    w = np.linalg.solve(x.T @ x + alpha * np.eye(x.shape[1]), x.T @ y)
    return float(((feats(test) @ w).argmax(1) == test.labels).mean())


def test_difficulty_zero_is_linearly_separable():
    train = synth_generate(4, 150, 16, 0.0, seed=1)
    test = synth_generate(4, 100, 16, 0.0, seed=2)
    assert ridge_probe_accuracy(train, test) >= 0.99


def test_augment_identity_and_flip():
    x = np.random.default_rng(0).random((3, 2, 4, 5)).astype(np.float32)
    rng = np.random.default_rng(1)
    np.testing.assert_array_equal(augment(x, rng, 0.0, 0), x)
    np.testing.assert_array_equal(augment(x, rng, 1.0, 0), x[..., ::-1])


def test_augment_crop_shifts_at_most_pad():
    x = np.zeros((20, 1, 16, 16), np.float32)
    x[:, :, 8, 8] = 1.0
    out = augment(x, np.random.default_rng(2), 0.0, 2)
    assert out.shape == x.shape
    for img in out[:, 0]:
        r, c = np.argwhere(img == 1.0)[0]
        assert abs(r - 8) <= 2 and abs(c - 8) <= 2
    assert len({tuple(np.argwhere(img == 1.0)[0]) for img in out[:, 0]}) > 1


def test_stratified_split_is_balanced_and_disjoint():
    ds = synth_generate(4, 50, 8, 0.5, seed=3)
    train, val = stratified_split(ds, 0.1, np.random.default_rng(0))
    assert val.class_counts.tolist() == [5] * 4 and len(train) == 180
    both = np.concatenate([train.images, val.images]).reshape(200, -1)
    assert len(np.unique(both, axis=0)) == 200


def test_batches_cover_dataset_once():
    ds = synth_generate(2, 25, 8, 0.5, seed=0)
    seen = np.concatenate([y for _, y in batches(ds, 8, np.random.default_rng(0))])
    assert len(seen) == 50 and sorted(np.bincount(seen).tolist()) == [25, 25]


def test_dataset_cache_round_trip(tmp_path):
    ds = synth_generate(3, 4, 8, 0.5, seed=0)
    ds.save(tmp_path / "d.ckpt")
    back = Dataset.load(tmp_path / "d.ckpt")
    assert back.images.tobytes() == ds.images.tobytes() and back.labels.tolist() == ds.labels.tolist()


def test_dataset_shape_validation():
    with pytest.raises(ValueError, match="labels"):
        Dataset(np.zeros((2, 1, 2, 2), np.float32), np.zeros(3, np.int64), 2)
