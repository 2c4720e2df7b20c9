"""Declarative layer-by-layer model description and shape propagation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterator

KINDS = ("conv", "linear", "batchnorm", "relu", "pool", "residual-add", "flatten")
PARAM_KINDS = ("conv", "linear")
INPUT = "input"


class SpecError(ValueError):
    """A ModelSpec that fails validation or shape propagation."""


def width(channels: int, rate: float) -> int:
    """Active channel count ``ceil(rate * channels)`` of an ordered-dropout sub-model."""
    # round first so that e.g. 0.3*10 does not ceil to 4
    return max(1, math.ceil(round(rate * channels, 9)))


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    input: str | None = None
    inputs: tuple[str, ...] | None = None
    out_channels: int | None = None
    kernel: int | None = None
    stride: int | None = None
    padding: int | None = None
    features: int | None = None
    bias: bool | None = None
    mode: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"layer {self.name!r}: unknown kind {self.kind!r}")
        if self.inputs is not None:
            object.__setattr__(self, "inputs", tuple(self.inputs))

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None:
                d[f.name] = list(v) if isinstance(v, tuple) else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise SpecError(f"layer {d.get('name')!r}: unknown keys {sorted(extra)}")
        return cls(**d)


@dataclass
class ModelSpec:
    layers: list[LayerSpec]
    input_shape: tuple[int, int, int]
    classes: int
    dropout_rates: tuple[float, ...] = (1.0,)
    name: str = "model"
    _shapes: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.dropout_rates = tuple(float(r) for r in self.dropout_rates)
        self.validate()

    # -- serialization ----------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "classes": self.classes,
            "dropout_rates": list(self.dropout_rates),
            "layers": [l.to_dict() for l in self.layers],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        extra = set(d) - {"name", "input_shape", "classes", "dropout_rates", "layers"}
        if extra:
            raise SpecError(f"unknown model spec keys {sorted(extra)}")
        try:
            return cls(
                layers=[LayerSpec.from_dict(l) for l in d["layers"]],
                input_shape=tuple(d["input_shape"]),
                classes=int(d["classes"]),
                dropout_rates=tuple(d.get("dropout_rates", [1.0])),
                name=d.get("name", "model"),
            )
        except KeyError as exc:
            raise SpecError(f"model spec missing key {exc}") from None

    @classmethod
    def load(cls, path) -> "ModelSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def with_rates(self, rates) -> "ModelSpec":
        return ModelSpec(list(self.layers), self.input_shape, self.classes, tuple(rates), self.name)

    # -- structure ----------------------------------------------------------------
    def validate(self) -> None:
        rates = self.dropout_rates
        if not rates or any(not 0 < r <= 1 for r in rates):
            raise SpecError(f"dropout_rates must lie in (0, 1], got {list(rates)}")
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise SpecError(f"dropout_rates must be strictly increasing, got {list(rates)}")
        if rates[-1] != 1.0:
            raise SpecError("dropout_rates must contain 1.0")
        if self.classes < 1:
            raise SpecError("classes must be positive")
        seen = set()
        for l in self.layers:
            if l.name in seen or l.name == INPUT:
                raise SpecError(f"layer name {l.name!r} is duplicated or reserved")
            seen.add(l.name)
        if not self.layers or self.layers[-1].kind not in PARAM_KINDS:
            raise SpecError("the last layer must be a conv or linear layer producing the logits")
        self._shapes = None
        out = self.shapes()[self.layers[-1].name]
        if tuple(out) != (self.classes,):
            raise SpecError(f"layer {self.layers[-1].name!r}: output shape {out} != ({self.classes},)")

    @property
    def logits_layer(self) -> str:
        return self.layers[-1].name

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def sources(self, i: int) -> tuple[str, ...]:
        l = self.layers[i]
        if l.kind == "residual-add":
            if not l.inputs or len(l.inputs) != 2:
                raise SpecError(f"layer {l.name!r}: residual-add needs exactly two inputs")
            return l.inputs
        if l.input is not None:
            return (l.input,)
        return (self.layers[i - 1].name,) if i else (INPUT,)

    def shapes(self, rate: float = 1.0) -> dict[str, tuple[int, ...]]:
        """Output shape (without batch) of every layer for the ``rate`` sub-model."""
        if rate == 1.0 and self._shapes is not None:
            return self._shapes
        shapes: dict[str, tuple[int, ...]] = {INPUT: self.input_shape}
        for i, l in enumerate(self.layers):
            try:
                src = [shapes[s] for s in self.sources(i)]
            except KeyError as exc:
                raise SpecError(f"layer {l.name!r}: unknown or later input {exc}") from None
            shapes[l.name] = _propagate(l, src, rate, l.name == self.logits_layer)
        if rate == 1.0:
            self._shapes = shapes
        return shapes

    def relu_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind == "relu"]

    def param_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.kind in PARAM_KINDS]

    def relu_pairing(self) -> dict[str, str]:
        """Map each ReLU layer to the conv/linear layer that feeds it.

        Follows input links backwards (first input of a residual-add, i.e. the
        main branch) until a parameter layer is reached.
        """
        index = {l.name: i for i, l in enumerate(self.layers)}
        out = {}
        for i, l in enumerate(self.layers):
            if l.kind != "relu":
                continue
            j = i
            while True:
                src = self.sources(j)[0]
                if src == INPUT:
                    raise SpecError(f"relu {l.name!r} has no preceding conv/linear layer")
                j = index[src]
                if self.layers[j].kind in PARAM_KINDS:
                    out[l.name] = self.layers[j].name
                    break
        return out

    def __iter__(self) -> Iterator[LayerSpec]:
        return iter(self.layers)


def _propagate(l: LayerSpec, src: list[tuple[int, ...]], rate: float, is_logits: bool) -> tuple[int, ...]:
    s = src[0]
    if l.kind == "conv":
        if len(s) != 3:
            raise SpecError(f"layer {l.name!r}: conv needs a C×H×W input, got {s}")
        if not l.out_channels or not l.kernel:
            raise SpecError(f"layer {l.name!r}: conv needs out_channels and kernel")
        k, st, p = l.kernel, l.stride or 1, l.padding or 0
        h = (s[1] + 2 * p - k) // st + 1
        w = (s[2] + 2 * p - k) // st + 1
        if h < 1 or w < 1:
            raise SpecError(f"layer {l.name!r}: kernel {k} does not fit input {s}")
        c = l.out_channels if is_logits else width(l.out_channels, rate)
        return (c, h, w)
    if l.kind == "linear":
        if len(s) != 1:
            raise SpecError(f"layer {l.name!r}: linear needs a flat input, got {s}; add a flatten layer")
        if not l.features:
            raise SpecError(f"layer {l.name!r}: linear needs features")
        return (l.features if is_logits else width(l.features, rate),)
    if l.kind == "pool":
        if len(s) != 3:
            raise SpecError(f"layer {l.name!r}: pool needs a C×H×W input, got {s}")
        if l.mode not in ("avg", "max"):
            raise SpecError(f"layer {l.name!r}: pool mode must be 'avg' or 'max'")
        k = l.kernel or 2
        st = l.stride or k
        h, w = (s[1] - k) // st + 1, (s[2] - k) // st + 1
        if h < 1 or w < 1:
            raise SpecError(f"layer {l.name!r}: pool kernel {k} does not fit input {s}")
        return (s[0], h, w)
    if l.kind == "flatten":
        n = 1
        for v in s:
            n *= v
        return (n,)
    if l.kind == "residual-add":
        if src[0] != src[1]:
            raise SpecError(f"layer {l.name!r}: residual inputs have shapes {src[0]} and {src[1]}")
        return s
    return s  # batchnorm, relu
