"""Training objectives: cross-entropy, temperature KL and the post-ReLU map mismatch."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor

NORM_EPS = 1e-12


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _finite_scalar(value: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(value):
        raise FloatingPointError(f"{what} is not finite")
    return value


def ce_loss(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"ce_loss: {labels.shape[0] if labels.ndim else 0} labels for {n} logits")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"ce_loss: labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    logp = _log_softmax(logits.data)
    rows = np.arange(n)
    loss = _finite_scalar(-logp[rows, labels].mean(), "cross-entropy")

    def back(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        logits._accumulate(d * (g / n))

    return Tensor.from_op(np.asarray(loss, dtype=logits.dtype), (logits,), back)


def kl_loss(teacher_logits: Tensor, student_logits: Tensor, temperature: float = 4.0) -> Tensor:
    """KL(softmax(teacher/T) || softmax(student/T)), batch mean, no T² factor."""
    if temperature <= 0:
        raise ValueError(f"kl_loss: temperature must be positive, got {temperature}")
    if teacher_logits.shape != student_logits.shape:
        raise ValueError(f"kl_loss: shape mismatch {teacher_logits.shape} vs {student_logits.shape}")
    n = teacher_logits.shape[0]
    t = float(temperature)
    logpt = _log_softmax(teacher_logits.data / t)
    logps = _log_softmax(student_logits.data / t)
    pt = np.exp(logpt)
    diff = logpt - logps
    loss = _finite_scalar((pt * diff).sum() / n, "KL divergence")

    def back(g):
        scale = g / (n * t)
        if student_logits.requires_grad:
            student_logits._accumulate((np.exp(logps) - pt) * scale)
        if teacher_logits.requires_grad:
            inner = (pt * diff).sum(axis=1, keepdims=True)
            teacher_logits._accumulate(pt * (diff - inner) * scale)

    return Tensor.from_op(np.asarray(loss, dtype=student_logits.dtype),
                          (teacher_logits, student_logits), back)


def _pram_pair(pr: Tensor, ar: Tensor) -> Tensor:
    if pr.shape != ar.shape:
        raise ValueError(f"pram_loss: paired shapes differ, {pr.shape} vs {ar.shape}")
    n = pr.shape[0]
    a = pr.data.reshape(n, -1)
    b = ar.data.reshape(n, -1)
    na = np.maximum(np.linalg.norm(a, axis=1, keepdims=True), NORM_EPS)
    nb = np.maximum(np.linalg.norm(b, axis=1, keepdims=True), NORM_EPS)
    ua, ub = a / na, b / nb
    u = ua - ub
    dist = np.linalg.norm(u, axis=1, keepdims=True)
    loss = dist.mean()

    def back(g):
        # d||u||/du, zero where the maps already coincide
        du = np.where(dist > NORM_EPS, u / np.maximum(dist, NORM_EPS), 0) * (g / n)
        if pr.requires_grad:
            proj = (du * ua).sum(axis=1, keepdims=True)
            ga = np.where(na > NORM_EPS, (du - ua * proj) / na, du / NORM_EPS)
            pr._accumulate(ga.reshape(pr.shape))
        if ar.requires_grad:
            proj = (du * ub).sum(axis=1, keepdims=True)
            gb = np.where(nb > NORM_EPS, -(du - ub * proj) / nb, -du / NORM_EPS)
            ar._accumulate(gb.reshape(ar.shape))

    return Tensor.from_op(np.asarray(loss, dtype=pr.dtype), (pr, ar), back)


def pram_loss(pr_maps: Sequence[Tensor], ar_maps: Sequence[Tensor]) -> Tensor:
    """Sum over layer pairs of the batch-mean distance between unit-normalized maps.

    Each map is flattened per sample and divided by its L2 norm (floored at
    1e-12) before the L2 distance is taken.
    """
    if len(pr_maps) != len(ar_maps):
        raise ValueError(f"pram_loss: {len(pr_maps)} PR maps vs {len(ar_maps)} AR maps")
    if not pr_maps:
        return Tensor(np.zeros((), np.float32))
    total = _pram_pair(pr_maps[0], ar_maps[0])
    for pr, ar in zip(pr_maps[1:], ar_maps[1:]):
        total = total + _pram_pair(pr, ar)
    return total


def activation_cosine(pr_maps: Sequence[Tensor], ar_maps: Sequence[Tensor]) -> float:
    """Mean per-sample cosine similarity between paired maps (diagnostic only)."""
    sims = []
    for pr, ar in zip(pr_maps, ar_maps):
        n = pr.shape[0]
        a = pr.data.reshape(n, -1).astype(np.float64)
        b = ar.data.reshape(n, -1).astype(np.float64)
        den = np.maximum(np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), NORM_EPS)
        sims.append(((a * b).sum(axis=1) / den).mean())
    return float(np.mean(sims)) if sims else 1.0
