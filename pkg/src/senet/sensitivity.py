"""Pre-training connection sensitivity and the per-layer ReLU sensitivity derived from it."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .arch import Model
from .engine import ce_loss

DEFAULT_PROXY_DENSITY = 0.1


@dataclass
class SensitivityProfile:
    proxy_density: float
    relu_layers: list[str]
    eta_theta: list[float]  # pruning sensitivity of the paired parameter layer
    eta_alpha: list[float]
    eta_hat: list[float]
    param_eta_theta: dict[str, float] = field(default_factory=dict)
    scores: dict[str, np.ndarray] | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "proxy_density": self.proxy_density,
            "layers": [
                {"name": n, "eta_theta": t, "eta_alpha": a, "eta_hat": h}
                for n, t, a, h in zip(self.relu_layers, self.eta_theta, self.eta_alpha, self.eta_hat)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "SensitivityProfile":
        ls = d["layers"]
        return cls(
            proxy_density=float(d["proxy_density"]),
            relu_layers=[l["name"] for l in ls],
            eta_theta=[float(l["eta_theta"]) for l in ls],
            eta_alpha=[float(l["eta_alpha"]) for l in ls],
            eta_hat=[float(l["eta_hat"]) for l in ls],
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "SensitivityProfile":
        return cls.from_dict(json.loads(Path(path).read_text()))


def scored_parameters(model: Model) -> dict[str, str]:
    """Layer name -> weight key of every conv/linear layer (biases and BN excluded)."""
    return {l.name: f"{l.name}.weight" for l in model.spec.param_layers()}


def connection_gradients(model: Model, images: np.ndarray, labels: np.ndarray,
                         loss_fn: Callable = ce_loss) -> dict[str, np.ndarray]:
    """Signed dL/dc_j at c = 1, i.e. theta_j * dL/dtheta_j, per scored layer.

    One forward/backward pass of the full-width model with batch statistics;
    running BN buffers are left untouched.  ``loss_fn(logits, labels)``
    defaults to cross-entropy.
    """
    keys = scored_parameters(model)
    model.zero_grad()
    logits, _ = model(images, 1.0, training=True, update_stats=False)
    loss_fn(logits, labels).backward()
    out = {}
    for layer, key in keys.items():
        p = model.params[key]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        out[layer] = (p.data.astype(np.float64) * g.astype(np.float64))
    model.zero_grad()
    return out


def connection_sensitivity(model: Model, images: np.ndarray, labels: np.ndarray,
                           loss_fn: Callable = ce_loss) -> dict[str, np.ndarray]:
    """Normalized scores |theta_j dL/dtheta_j| / sum, keyed by layer name."""
    grads = connection_gradients(model, images, labels, loss_fn)
    if not grads or sum(g.size for g in grads.values()) == 0:
        raise ValueError("model has no scored (conv/linear) parameters")
    total = sum(np.abs(g).sum() for g in grads.values())
    if total == 0:
        return {k: np.zeros_like(g) for k, g in grads.items()}
    return {k: np.abs(g) / total for k, g in grads.items()}


def layer_pruning_sensitivity(scores: Mapping[str, np.ndarray], density: float) -> dict[str, float]:
    """Fraction of each layer's weights inside the global top-ceil(d*m) score set.

    Ties are broken by ascending flattened index over the layers in order.
    """
    if not 0 < density < 1:
        raise ValueError(f"proxy density must lie in (0, 1), got {density}")
    names = list(scores)
    flat = np.concatenate([np.ravel(scores[n]) for n in names])
    m = flat.size
    k = math.ceil(round(density * m, 9))
    order = np.argsort(-flat, kind="stable")
    selected = np.zeros(m, bool)
    selected[order[:k]] = True
    out, off = {}, 0
    for n in names:
        size = np.size(scores[n])
        out[n] = float(selected[off:off + size].sum() / size)
        off += size
    return out


def normalize_sensitivity(eta_alpha: Sequence[float], active: Sequence[bool] | None = None) -> list[float]:
    """eta_hat over active layers (summing to 1); inactive layers get 0."""
    a = np.asarray(eta_alpha, dtype=np.float64)
    act = np.ones(a.size, bool) if active is None else np.asarray(active, bool)
    tot = a[act].sum()
    if tot <= 0:
        warnings.warn("all ReLU sensitivities are zero; falling back to a uniform split", RuntimeWarning)
        out = np.where(act, 1.0 / max(act.sum(), 1), 0.0)
    else:
        out = np.where(act, a / tot, 0.0)
    return out.tolist()


def relu_sensitivity(eta_theta: Mapping[str, float], pairing: Mapping[str, str],
                     active: Sequence[bool] | None = None) -> tuple[list[float], list[float]]:
    """eta_alpha = 1 - eta_theta of the paired layer, and its normalized form."""
    eta_alpha = [1.0 - eta_theta[pairing[r]] for r in pairing]
    return eta_alpha, normalize_sensitivity(eta_alpha, active)


def sensitivity_profile(model: Model, images: np.ndarray, labels: np.ndarray,
                        density: float = DEFAULT_PROXY_DENSITY) -> SensitivityProfile:
    scores = connection_sensitivity(model, images, labels)
    eta_theta = layer_pruning_sensitivity(scores, density)
    pairing = model.spec.relu_pairing()
    eta_alpha, eta_hat = relu_sensitivity(eta_theta, pairing)
    return SensitivityProfile(
        proxy_density=density,
        relu_layers=list(pairing),
        eta_theta=[eta_theta[pairing[r]] for r in pairing],
        eta_alpha=eta_alpha,
        eta_hat=eta_hat,
        param_eta_theta=eta_theta,
        scores=scores,
    )
