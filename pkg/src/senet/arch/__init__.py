from .model import Model, build_model, forward, relu_shapes
from .spec import LayerSpec, ModelSpec, SpecError, width
from .zoo import BUILDERS, ZOO, load_zoo, mini_resnet, mini_vgg, resnet18_cifar, toy_cnn_8

__all__ = [
    "LayerSpec", "ModelSpec", "SpecError", "width",
    "Model", "build_model", "forward", "relu_shapes",
    "ZOO", "BUILDERS", "load_zoo", "toy_cnn_8", "mini_resnet", "mini_vgg", "resnet18_cifar",
]
