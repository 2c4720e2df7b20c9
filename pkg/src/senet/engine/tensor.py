"""Dense tensor with tape-free reverse-mode autodiff.

Every differentiable op builds a node holding its parents and a closure that
maps the node's upstream gradient to contributions on the parents.  Calling
``backward`` on a scalar walks the graph in reverse topological order.
Leaf gradients accumulate across calls until ``zero_grad``.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DTYPE)
        if arr.ndim > 4:
            raise ValueError(f"rank {arr.ndim} exceeds the supported maximum of 4")
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"],
                backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = cls(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- autodiff ---------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = _topological(self)
        # intermediate nodes start clean on each call; leaves keep accumulating
        for node in order:
            if node._backward is not None:
                node.grad = None
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                if not np.all(np.isfinite(node.grad)):
                    raise FloatingPointError(f"non-finite gradient at {node!r}")
                node._backward(node.grad)

    # -- arithmetic: same-shape tensors or python scalars only ----------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor*tensor is not needed by the model zoo")
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -float(other))


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        out = a.data + a.data.dtype.type(c)

        def back(g):
            a._accumulate(g)

        return Tensor.from_op(out, (a,), back)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def back(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return Tensor.from_op(a.data + b.data, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    k = a.data.dtype.type(c)

    def back(g):
        a._accumulate(g * k)

    return Tensor.from_op(a.data * k, (a,), back)


def add_n(terms: Iterable[Tensor]) -> Tensor:
    terms = list(terms)
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape

    def back(g):
        a._accumulate(g.reshape(src))

    return Tensor.from_op(a.data.reshape(shape), (a,), back)


def flatten(a: Tensor) -> Tensor:
    """Collapse everything but the batch axis (channel-major order)."""
    return reshape(a, (a.shape[0], -1))


def slice_prefix(a: Tensor, sizes: Sequence[int]) -> Tensor:
    """Leading-index slice ``a[:s0, :s1, ...]``; gradient scatters back."""
    idx = tuple(slice(0, s) for s in sizes)
    if all(s == d for s, d in zip(sizes, a.shape)):
        return a

    def back(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        a._accumulate(full)

    return Tensor.from_op(a.data[idx], (a,), back)
