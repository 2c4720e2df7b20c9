"""Model zoo: builders plus the golden JSON specs shipped alongside them."""
from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

from .spec import LayerSpec, ModelSpec

ZOO = ("toy-cnn-8", "mini-resnet", "mini-vgg", "resnet18-cifar")


def _conv_bn_relu(prefix: str, out: int, stride: int = 1, input: str | None = None) -> list[LayerSpec]:
    return [
        LayerSpec("conv", f"{prefix}", input=input, out_channels=out, kernel=3, stride=stride, padding=1, bias=False),
        LayerSpec("batchnorm", f"{prefix}_bn"),
        LayerSpec("relu", f"{prefix}_relu"),
    ]


def toy_cnn_8(classes: int = 4, resolution: int = 16, rates=(1.0,)) -> ModelSpec:
    """Six 3x3 conv layers in three stages plus two hidden FC layers; 8 ReLU layers."""
    layers: list[LayerSpec] = []
    widths = (16, 32, 64)
    for s, c in enumerate(widths, 1):
        layers += _conv_bn_relu(f"conv{s}a", c)
        layers += _conv_bn_relu(f"conv{s}b", c)
        layers.append(LayerSpec("pool", f"pool{s}", mode="avg", kernel=2))
    layers.append(LayerSpec("flatten", "flatten"))
    layers += [
        LayerSpec("linear", "fc1", features=128),
        LayerSpec("relu", "fc1_relu"),
        LayerSpec("linear", "fc2", features=64),
        LayerSpec("relu", "fc2_relu"),
        LayerSpec("linear", "fc_out", features=classes),
    ]
    return ModelSpec(layers, (3, resolution, resolution), classes, tuple(rates), "toy-cnn-8")


def _basic_block(prefix: str, inp: str, cin: int, cout: int, stride: int) -> tuple[list[LayerSpec], str]:
    layers: list[LayerSpec] = []
    if stride != 1 or cin != cout:
        layers += [
            LayerSpec("conv", f"{prefix}_sc", input=inp, out_channels=cout, kernel=1, stride=stride, bias=False),
            LayerSpec("batchnorm", f"{prefix}_sc_bn"),
        ]
        shortcut = f"{prefix}_sc_bn"
    else:
        shortcut = inp
    layers += _conv_bn_relu(f"{prefix}_conv1", cout, stride, input=inp)
    layers += [
        LayerSpec("conv", f"{prefix}_conv2", out_channels=cout, kernel=3, stride=1, padding=1, bias=False),
        LayerSpec("batchnorm", f"{prefix}_conv2_bn"),
        LayerSpec("residual-add", f"{prefix}_add", inputs=(f"{prefix}_conv2_bn", shortcut)),
        LayerSpec("relu", f"{prefix}_relu"),
    ]
    return layers, f"{prefix}_relu"


def resnet(name: str, widths, blocks, classes: int, resolution: int, rates=(1.0,)) -> ModelSpec:
    """CIFAR-style ResNet: 3x3 stride-1 stem, BasicBlocks, global average pool."""
    layers = _conv_bn_relu("stem", widths[0])
    cur, cin = "stem_relu", widths[0]
    res = resolution
    for s, (c, n) in enumerate(zip(widths, blocks), 1):
        for b in range(n):
            stride = 2 if (b == 0 and s > 1) else 1
            res //= stride
            blk, cur = _basic_block(f"layer{s}_{b}", cur, cin, c, stride)
            layers += blk
            cin = c
    layers += [
        LayerSpec("pool", "avgpool", mode="avg", kernel=res),
        LayerSpec("flatten", "flatten"),
        LayerSpec("linear", "fc", features=classes),
    ]
    return ModelSpec(layers, (3, resolution, resolution), classes, tuple(rates), name)


def resnet18_cifar(classes: int = 100, rates=(1.0,)) -> ModelSpec:
    return resnet("resnet18-cifar", (64, 128, 256, 512), (2, 2, 2, 2), classes, 32, rates)


def mini_resnet(classes: int = 4, resolution: int = 16, rates=(1.0,)) -> ModelSpec:
    return resnet("mini-resnet", (16, 32, 64), (1, 1, 1), classes, resolution, rates)


VGG16_HALF = (32, 32, "M", 64, 64, "M", 128, 128, 128, "M", 256, 256, 256, "M", 256, 256, 256, "M")


def mini_vgg(classes: int = 10, resolution: int = 32, rates=(1.0,)) -> ModelSpec:
    """VGG16 layout with every channel count halved, max-pool downsampling."""
    layers: list[LayerSpec] = []
    conv_i = pool_i = 0
    for v in VGG16_HALF:
        if v == "M":
            pool_i += 1
            layers.append(LayerSpec("pool", f"pool{pool_i}", mode="max", kernel=2))
        else:
            conv_i += 1
            layers += _conv_bn_relu(f"conv{conv_i}", v)
    layers += [LayerSpec("flatten", "flatten"), LayerSpec("linear", "fc", features=classes)]
    return ModelSpec(layers, (3, resolution, resolution), classes, tuple(rates), "mini-vgg")


BUILDERS = {
    "toy-cnn-8": toy_cnn_8,
    "mini-resnet": mini_resnet,
    "mini-vgg": mini_vgg,
    "resnet18-cifar": resnet18_cifar,
}


def load_zoo(name: str) -> ModelSpec:
    """Load the golden JSON spec of a zoo model."""
    if name not in BUILDERS:
        raise KeyError(f"unknown zoo model {name!r}; choose from {list(BUILDERS)}")
    text = resources.files("senet.arch").joinpath("specs", f"{name}.json").read_text()
    return ModelSpec.from_dict(json.loads(text))


def write_golden_specs(directory) -> None:
    for name, fn in BUILDERS.items():
        fn().save(Path(directory) / f"{name}.json")
