"""Architectures: JSON layer lists -> LayerGraph, plus ResNet shape tables for the cost model."""

import logging

import numpy as np

from .errors import ConfigError
from .hwmodel import LayerShape
from .layers import (
    BatchNorm,
    Flatten,
    HardTanh,
    Identity,
    LayerGraph,
    MaxPool2d,
    ReLU,
    StoxConv2d,
    StoxDense,
    StoxLayer,
)
from .quantization import QuantSpec
from .rng import generator

logger = logging.getLogger(__name__)

# Reference desk-scale CNN: three StoX conv blocks and a StoX dense head.
REFERENCE_CNN = [
    {"type": "stox_conv", "out_channels": 16, "kernel_size": 3, "padding": 1},
    {"type": "batchnorm"},
    {"type": "relu"},
    {"type": "maxpool", "kernel_size": 2},
    {"type": "stox_conv", "out_channels": 32, "kernel_size": 3, "padding": 1},
    {"type": "batchnorm"},
    {"type": "relu"},
    {"type": "maxpool", "kernel_size": 2},
    {"type": "stox_conv", "out_channels": 64, "kernel_size": 3, "padding": 1},
    {"type": "batchnorm"},
    {"type": "relu"},
    {"type": "maxpool", "kernel_size": 2},
    {"type": "flatten"},
    {"type": "stox_dense", "out_features": 10},
    {"type": "batchnorm"},
]

ARCHITECTURES = {"reference_cnn": REFERENCE_CNN}

_PREFIX = {
    "stox_conv": "conv",
    "stox_dense": "fc",
    "batchnorm": "bn",
    "relu": "relu",
    "hardtanh": "htanh",
    "maxpool": "pool",
    "flatten": "flatten",
    "identity": "tap",
}

_LAYER_KEYS = {
    "stox_conv": {"out_channels", "kernel_size", "stride", "padding"},
    "stox_dense": {"out_features"},
    "batchnorm": {"momentum", "eps"},
    "maxpool": {"kernel_size"},
}


def resolve_architecture(architecture) -> list[dict]:
    if isinstance(architecture, str):
        if architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture '{architecture}', choose from {sorted(ARCHITECTURES)}")
        return [dict(entry) for entry in ARCHITECTURES[architecture]]
    if not isinstance(architecture, list) or not architecture:
        raise ConfigError("architecture must be a name or a non-empty list of layer objects")
    return [dict(entry) for entry in architecture]


def _build_layer(entry: dict, name: str, shape: tuple, spec: QuantSpec):
    kind = entry.get("type")
    if kind not in _PREFIX:
        raise ConfigError(f"unknown layer type {kind!r} in layer '{name}'")
    unknown = set(entry) - {"type", "name", "spec", "quantized"} - _LAYER_KEYS.get(kind, set())
    if unknown:
        raise ConfigError(f"layer '{name}' has unknown keys: {', '.join(sorted(unknown))}")
    opts = {k: v for k, v in entry.items() if k in _LAYER_KEYS.get(kind, set())}
    quantized = bool(entry.get("quantized", True))

    if kind == "stox_conv":
        if len(shape) != 3:
            raise ConfigError(f"layer '{name}' needs a (C, H, W) input, got {shape}")
        return StoxConv2d(name, shape[0], spec=spec, quantized=quantized, **opts)
    if kind == "stox_dense":
        if len(shape) != 1:
            raise ConfigError(f"layer '{name}' needs a flat input, got {shape}; add a flatten layer")
        return StoxDense(name, shape[0], spec=spec, quantized=quantized, **opts)
    if kind == "batchnorm":
        return BatchNorm(name, shape[0], **opts)
    if kind == "maxpool":
        return MaxPool2d(name, **opts)
    return {"relu": ReLU, "hardtanh": HardTanh, "flatten": Flatten, "identity": Identity}[kind](name)


def layer_spec(default_spec: QuantSpec, name: str, entry: dict, overrides: dict | None) -> QuantSpec:
    changes = dict(entry.get("spec") or {})
    changes.update((overrides or {}).get(name, {}))
    if not changes:
        return default_spec
    return QuantSpec.from_dict({**default_spec.to_dict(), **changes})


def init_parameters(graph: LayerGraph, seed: int) -> None:
    """He-uniform StoX weights drawn from the ``init`` stream, keyed by layer index."""
    for layer in graph.stox_layers():
        rng = generator(seed, "init", layer.index)
        limit = np.sqrt(6.0 / layer.fan_in)
        layer.weight = rng.uniform(-limit, limit, size=layer.weight.shape)
        layer.weight_grad = np.zeros_like(layer.weight)


def build_graph(
    architecture,
    input_shape,
    default_spec: QuantSpec | None = None,
    overrides: dict | None = None,
    seed: int = 0,
) -> LayerGraph:
    """Instantiate an architecture (name or layer list) with per-layer QuantSpecs."""
    default_spec = default_spec or QuantSpec()
    entries = resolve_architecture(architecture)
    shape = tuple(int(s) for s in input_shape)
    counters: dict[str, int] = {}
    layers = []
    for entry in entries:
        kind = entry.get("type")
        prefix = _PREFIX.get(kind, "layer")
        counters[prefix] = counters.get(prefix, 0) + 1
        name = entry.get("name") or f"{prefix}{counters[prefix]}"
        spec = layer_spec(default_spec, name, entry, overrides)
        layer = _build_layer(entry, name, shape, spec)
        shape = layer.output_shape(shape)
        layers.append(layer)

    known = {layer.name for layer in layers if isinstance(layer, StoxLayer)}
    stray = sorted(set(overrides or {}) - known)
    if stray:
        raise ConfigError(f"overrides name unknown StoX layers: {', '.join(stray)}")

    graph = LayerGraph(layers, input_shape)
    init_parameters(graph, seed)
    logger.debug("built graph with %d layers, output shape %s", len(layers), shape)
    return graph


def layer_shapes(graph: LayerGraph) -> list[LayerShape]:
    """Crossbar-mapped layer shapes of a graph, in graph order."""
    shapes = []
    out_shape = graph.input_shape
    for layer in graph.layers:
        out_shape = layer.output_shape(out_shape)
        if isinstance(layer, StoxConv2d):
            shapes.append(LayerShape(layer.name, layer.fan_in, layer.out_channels, out_shape[1] * out_shape[2]))
        elif isinstance(layer, StoxDense):
            shapes.append(LayerShape(layer.name, layer.fan_in, layer.out_features, 1))
    return shapes


def resnet20_shapes(num_classes: int = 10) -> list[LayerShape]:
    """CIFAR ResNet-20 (32x32 input): 3 stages of 3 basic blocks, 16/32/64 channels."""
    shapes = [LayerShape("conv1", 27, 16, 32 * 32)]
    c_in, size = 16, 32
    for stage, c_out in enumerate((16, 32, 64), start=1):
        for block in range(3):
            if block == 0 and c_out != c_in:
                size //= 2
            pixels = size * size
            shapes.append(LayerShape(f"s{stage}b{block + 1}a", 9 * c_in, c_out, pixels))
            shapes.append(LayerShape(f"s{stage}b{block + 1}b", 9 * c_out, c_out, pixels))
            c_in = c_out
    shapes.append(LayerShape("fc", 64, num_classes, 1))
    return shapes


def resnet18_shapes(num_classes: int = 200, input_size: int = 64) -> list[LayerShape]:
    """ResNet-18 for Tiny ImageNet sized inputs, 1x1 projection shortcuts included."""
    size = input_size // 2
    shapes = [LayerShape("conv1", 7 * 7 * 3, 64, size * size)]
    size //= 2  # max pool
    c_in = 64
    for stage, c_out in enumerate((64, 128, 256, 512), start=1):
        for block in range(2):
            if block == 0 and c_out != c_in:
                size //= 2
                shapes.append(LayerShape(f"s{stage}b1proj", c_in, c_out, size * size))
            shapes.append(LayerShape(f"s{stage}b{block + 1}a", 9 * c_in, c_out, size * size))
            shapes.append(LayerShape(f"s{stage}b{block + 1}b", 9 * c_out, c_out, size * size))
            c_in = c_out
    shapes.append(LayerShape("fc", 512, num_classes, 1))
    return shapes


def resnet50_shapes(num_classes: int = 200, input_size: int = 64) -> list[LayerShape]:
    """ResNet-50 bottleneck layout for Tiny ImageNet sized inputs."""
    size = input_size // 2
    shapes = [LayerShape("conv1", 7 * 7 * 3, 64, size * size)]
    size //= 2
    c_in = 64
    for stage, (width, blocks) in enumerate(((64, 3), (128, 4), (256, 6), (512, 3)), start=1):
        c_out = width * 4
        for block in range(blocks):
            tag = f"s{stage}b{block + 1}"
            shapes.append(LayerShape(f"{tag}a", c_in, width, size * size))
            if block == 0 and stage > 1:
                size //= 2
            shapes.append(LayerShape(f"{tag}b", 9 * width, width, size * size))
            shapes.append(LayerShape(f"{tag}c", width, c_out, size * size))
            if block == 0:
                shapes.append(LayerShape(f"{tag}proj", c_in, c_out, size * size))
            c_in = c_out
    shapes.append(LayerShape("fc", 2048, num_classes, 1))
    return shapes


SHAPE_TABLES = {"resnet20": resnet20_shapes, "resnet18": resnet18_shapes, "resnet50": resnet50_shapes}
