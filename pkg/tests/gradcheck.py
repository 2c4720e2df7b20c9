"""Central finite-difference checks for engine ops (f32 forward, f64 bookkeeping)."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from senet import engine as E
from senet.engine import Tensor

STEP = 1e-2
TOL = 1e-3


def numeric_grad(fn: Callable[[], float], arr: np.ndarray, step: float = STEP) -> np.ndarray:
    g = np.zeros(arr.shape, np.float64)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        hi = fn()
        flat[i] = old - step
        lo = fn()
        flat[i] = old
        g.reshape(-1)[i] = (hi - lo) / (2 * step)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Normwise ||a-b|| / max(||a||, ||b||, 1e-2); the floor keeps near-zero
    gradients from turning f32 rounding noise into a large ratio."""
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-2)
    return float(np.linalg.norm(np.asarray(a, np.float64) - b) / den)


def check(op: Callable[..., Tensor], inputs: Sequence[np.ndarray], rng: np.random.Generator,
          step: float = STEP) -> float:
    """Worst relative error over all inputs of ``sum(op(*inputs) * R)``."""
    arrays = [np.asarray(a, np.float32).copy() for a in inputs]
    probe = op(*[Tensor(a) for a in arrays])
    weights = rng.standard_normal(probe.shape).astype(np.float32) if probe.ndim else np.float32(1.0)

    def scalar() -> float:
        out = op(*[Tensor(a) for a in arrays])
        return float(np.sum(out.data.astype(np.float64) * weights))

    ts = [Tensor(a, requires_grad=True) for a in arrays]
    out = op(*ts)
    out.backward(np.broadcast_to(weights, out.shape).astype(np.float32).copy())
    worst = 0.0
    for t, a in zip(ts, arrays):
        analytic = t.grad if t.grad is not None else np.zeros_like(a)
        worst = max(worst, rel_error(analytic, numeric_grad(scalar, a, step)))
    return worst


def away_from_zero(rng, shape, margin=0.1):
    """Values with |x| >= margin so a ±STEP probe never crosses a ReLU kink."""
    x = rng.uniform(margin, 1.5, shape) * rng.choice([-1.0, 1.0], shape)
    return x.astype(np.float32)


def distinct(rng, shape, gap=0.05):
    """A permutation of well-separated values (max-pool argmax is then stable)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap - n * gap / 2).astype(np.float32).reshape(shape)


# -- randomized cases per op ---------------------------------------------------------

def _conv_case(rng):
    n, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([1, 2, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h = int(rng.integers(k, 6))
    w = int(rng.integers(k, 6))
    x = rng.standard_normal((n, cin, h, w))
    wt = rng.standard_normal((cout, cin, k, k)) * 0.5
    b = rng.standard_normal(cout)
    return (lambda x, w, b: E.conv2d(x, w, stride, pad, b)), [x, wt, b]


def _linear_case(rng):
    n, f, o = rng.integers(1, 5), rng.integers(1, 7), rng.integers(1, 6)
    return E.linear, [rng.standard_normal((n, f)), rng.standard_normal((o, f)), rng.standard_normal(o)]


def _bn_case(rng, training):
    four = rng.random() < 0.5
    # n >= 3: with two samples per channel x_hat is exactly ±1 and dL/dx is ~0
    n, c = int(rng.integers(3, 6)), int(rng.integers(1, 4))
    shape = (n, c, int(rng.integers(1, 4)), int(rng.integers(1, 4))) if four else (n, c)
    store = c + int(rng.integers(0, 2))  # prefix slice of stored state
    rm = rng.standard_normal(store).astype(np.float32)
    rv = rng.uniform(0.5, 2, store).astype(np.float32)

    def op(x, g, b):
        return E.batchnorm(x, g, b, rm.copy(), rv.copy(), training, update_stats=False)

    return op, [rng.standard_normal(shape) * 2 + 1, rng.uniform(0.5, 1.5, store), rng.standard_normal(store)]


def _relu_case(rng):
    shape = tuple(int(s) for s in rng.integers(1, 4, size=int(rng.integers(2, 5))))
    return E.relu, [away_from_zero(rng, shape)]


def _masked_relu_case(rng):
    shape = tuple(int(s) for s in rng.integers(1, 4, size=int(rng.integers(2, 5))))
    mask = rng.random(shape[1:]) < 0.5
    return (lambda x: E.masked_relu(x, mask)), [away_from_zero(rng, shape)]


def _pool_case(rng, kind):
    k = int(rng.choice([1, 2]))
    st = int(rng.integers(1, 3))
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(k, 6)), int(rng.integers(k, 6)))
    fn = E.avg_pool2d if kind == "avg" else E.max_pool2d
    x = rng.standard_normal(shape) if kind == "avg" else distinct(rng, shape)
    return (lambda x: fn(x, k, st)), [x]


def _add_case(rng):
    shape = tuple(int(s) for s in rng.integers(1, 4, size=int(rng.integers(1, 5))))
    return E.add, [rng.standard_normal(shape), rng.standard_normal(shape)]


def _scale_case(rng):
    shape = tuple(int(s) for s in rng.integers(1, 4, size=int(rng.integers(1, 5))))
    c = float(rng.uniform(-3, 3))
    return (lambda x: E.scale(x, c)), [rng.standard_normal(shape)]


def _flatten_case(rng):
    shape = tuple(int(s) for s in rng.integers(1, 4, size=int(rng.integers(2, 5))))
    return E.flatten, [rng.standard_normal(shape)]


def _slice_case(rng):
    shape = tuple(int(s) for s in rng.integers(1, 5, size=int(rng.integers(1, 5))))
    sizes = tuple(int(rng.integers(1, s + 1)) for s in shape)
    return (lambda x: E.slice_prefix(x, sizes)), [rng.standard_normal(shape)]


def _ce_case(rng):
    n, k = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    labels = rng.integers(0, k, n)
    return (lambda z: E.ce_loss(z, labels)), [rng.standard_normal((n, k)) * 2]


def _kl_case(rng):
    n, k = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    t = float(rng.choice([1.0, 2.0, 4.0]))
    return (lambda a, b: E.kl_loss(a, b, t)), [rng.standard_normal((n, k)) * 2, rng.standard_normal((n, k)) * 2]


def _pram_case(rng):
    layers = int(rng.integers(1, 3))
    n = int(rng.integers(1, 4))
    shapes = [(n,) + tuple(int(s) for s in rng.integers(1, 4, size=int(rng.integers(1, 4)))) for _ in range(layers)]
    arrays = [rng.uniform(0.2, 2, s) for s in shapes] + [rng.uniform(0.2, 2, s) for s in shapes]

    def op(*ts):
        return E.pram_loss(list(ts[:layers]), list(ts[layers:]))

    return op, arrays


CASES = {
    "conv2d": _conv_case,
    "linear": _linear_case,
    "batchnorm-train": lambda r: _bn_case(r, True),
    "batchnorm-eval": lambda r: _bn_case(r, False),
    "relu": _relu_case,
    "masked_relu": _masked_relu_case,
    "avg_pool2d": lambda r: _pool_case(r, "avg"),
    "max_pool2d": lambda r: _pool_case(r, "max"),
    "add": _add_case,
    "scale": _scale_case,
    "flatten": _flatten_case,
    "slice_prefix": _slice_case,
    "ce_loss": _ce_case,
    "kl_loss": _kl_case,
    "pram_loss": _pram_case,
}


def run_op(name: str, shapes: int = 20, seed: int = 0) -> float:
    """Worst error for ``name`` across ``shapes`` randomized cases."""
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst = 0.0
    for _ in range(shapes):
        op, inputs = CASES[name](rng)
        worst = max(worst, check(op, inputs, rng))
    return worst
