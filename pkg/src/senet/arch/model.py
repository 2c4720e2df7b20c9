"""Executable model built from a ModelSpec, with ordered-dropout sub-models."""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from ..engine import (
    ConfigError,
    MultiBatchNorm,
    Tensor,
    avg_pool2d,
    conv2d,
    flatten,
    linear,
    masked_relu,
    max_pool2d,
    relu,
    slice_prefix,
)
from ..engine import add as t_add
from ..engine.nn import _tag_key
from .spec import INPUT, ModelSpec, SpecError, width


def _rate_tag(rate: float) -> str:
    return f"{rate:g}"


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, Tensor]
    bns: dict[str, MultiBatchNorm]
    mask: Mapping[str, np.ndarray] | None = None  # name -> h×w×c bool
    dtype: type = np.float32

    # -- parameter access -------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        out = list(self.params.values())
        for name, bn in self.bns.items():
            for st in bn.states.values():
                out.extend((st.gamma, st.beta))
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: t.data for k, t in self.params.items()}
        for name, bn in self.bns.items():
            for tag in bn.tags:
                st = bn.state(tag)
                base = f"{name}@{_rate_tag(tag)}"
                out[f"{base}.gamma"] = st.gamma.data
                out[f"{base}.beta"] = st.beta.data
                out[f"{base}.running_mean"] = st.running_mean
                out[f"{base}.running_var"] = st.running_var
        return out

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        mine = self.state_dict()
        missing = set(mine) - set(state)
        extra = set(state) - set(mine)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for k, arr in mine.items():
            src = np.asarray(state[k])
            if src.shape != arr.shape:
                raise ConfigError(f"state {k!r}: shape {src.shape} != {arr.shape}")
            arr[...] = src

    def clone(self) -> "Model":
        return copy.deepcopy(self)

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self.state_dict().items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def check_rate(self, rate: float) -> float:
        rates = [_tag_key(r) for r in self.spec.dropout_rates]
        if _tag_key(rate) not in rates:
            raise ConfigError(f"rate not supported: {rate} not in {list(self.spec.dropout_rates)}")
        return float(rate)

    # -- execution ---------------------------------------------------------------
    def __call__(self, x, rate: float = 1.0, training: bool = False, update_stats: bool = True):
        return forward(self, x, rate, training, update_stats)


def build_model(spec: ModelSpec, seed: int | np.random.Generator = 0, dtype=np.float32) -> Model:
    """Instantiate parameters with Kaiming-uniform init (zero biases, unit BN)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shapes = spec.shapes()
    params: dict[str, Tensor] = {}
    bns: dict[str, MultiBatchNorm] = {}
    for i, l in enumerate(spec.layers):
        src = shapes[spec.sources(i)[0]]
        if l.kind == "conv":
            cin = src[0]
            fan_in = cin * l.kernel * l.kernel
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, (l.out_channels, cin, l.kernel, l.kernel))
            params[f"{l.name}.weight"] = Tensor(w.astype(dtype), requires_grad=True, name=f"{l.name}.weight")
            if l.bias:
                params[f"{l.name}.bias"] = Tensor(np.zeros(l.out_channels, dtype), requires_grad=True)
        elif l.kind == "linear":
            fan_in = src[0]
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, (l.features, fan_in))
            params[f"{l.name}.weight"] = Tensor(w.astype(dtype), requires_grad=True, name=f"{l.name}.weight")
            if l.bias is None or l.bias:
                params[f"{l.name}.bias"] = Tensor(np.zeros(l.features, dtype), requires_grad=True)
        elif l.kind == "batchnorm":
            bns[l.name] = MultiBatchNorm(src[0], spec.dropout_rates, dtype=dtype)
    return Model(spec, params, bns, None, dtype)


def relu_shapes(spec: ModelSpec) -> list[tuple[str, int, int, int]]:
    """(name, h, w, c) of every ReLU activation, in forward order."""
    shapes = spec.shapes()
    out = []
    for l in spec.relu_layers():
        s = shapes[l.name]
        out.append((l.name, s[1], s[2], s[0]) if len(s) == 3 else (l.name, 1, 1, s[0]))
    return out


def _mask_prefix(m: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Map an h×w×c mask onto a (prefix-width) C×H×W or F activation."""
    m = np.asarray(m)
    c = shape[0]
    spatial = shape[1:] if len(shape) == 3 else (1, 1)
    if m.ndim != 3 or m.shape[:2] != spatial or m.shape[2] < c:
        raise SpecError(f"mask shape {m.shape} incompatible with activation {shape}")
    return m[:, :, :c].transpose(2, 0, 1).reshape(shape)


def forward(model: Model, x, rate: float = 1.0, training: bool = False,
            update_stats: bool = True) -> tuple[Tensor, list[Tensor]]:
    """Run the ``rate`` sub-model; returns logits and the post-ReLU maps in order."""
    rate = model.check_rate(rate)
    spec = model.spec
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=model.dtype))
    acts: dict[str, Tensor] = {INPUT: x}
    maps: list[Tensor] = []

    for i, l in enumerate(spec.layers):
        srcs = spec.sources(i)
        h = acts[srcs[0]]
        k = l.kind
        if k in ("conv", "linear"):
            w_full = model.params[f"{l.name}.weight"]
            b_full = model.params.get(f"{l.name}.bias")
            full_out = w_full.shape[0]
            out_c = full_out if l.name == spec.logits_layer else width(full_out, rate)
            in_c = h.shape[1]
            w = slice_prefix(w_full, (out_c, in_c) + w_full.shape[2:])
            b = slice_prefix(b_full, (out_c,)) if b_full is not None else None
            if k == "conv":
                y = conv2d(h, w, l.stride or 1, l.padding or 0, b)
            else:
                y = linear(h, w, b)
        elif k == "batchnorm":
            y = model.bns[l.name](h, rate, training, update_stats)
        elif k == "relu":
            m = model.mask.get(l.name) if model.mask is not None else None
            y = relu(h) if m is None else masked_relu(h, _mask_prefix(m, h.shape[1:]))
            maps.append(y)
        elif k == "pool":
            y = (avg_pool2d if l.mode == "avg" else max_pool2d)(h, l.kernel or 2, l.stride)
        elif k == "flatten":
            y = flatten(h)
        elif k == "residual-add":
            y = t_add(h, acts[srcs[1]])
        else:  # pragma: no cover - guarded by LayerSpec
            raise SpecError(f"unsupported layer kind {k}")
        acts[l.name] = y
    return acts[spec.logits_layer], maps
