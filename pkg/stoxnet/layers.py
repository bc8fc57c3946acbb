"""Layer graph with hand-written backward passes.

StoX layers (conv and dense) run their products through :class:`CrossbarMVM`;
the remaining layers are the usual float building blocks. A graph is an ordered
list of layers ending in a softmax cross-entropy head.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .crossbar import ConversionCounter, CrossbarMVM, CrossbarPlan, Diagnostics, col2im, im2col
from .errors import ConfigError, DivergenceError, ShapeError, StateError
from .quantization import QuantSpec
from .rng import ConversionKey

logger = logging.getLogger(__name__)


@dataclass
class ForwardContext:
    """Per-call settings shared by all layers of one forward pass."""

    seed: int = 0
    step: int = 0
    stream: str = "converter"
    calibrate: bool = False
    counter: ConversionCounter | None = None
    diagnostics: Diagnostics | None = None

    def key(self, layer_index: int) -> ConversionKey:
        return ConversionKey(seed=self.seed, layer=layer_index, step=self.step, stream=self.stream)


class Layer:
    kind = "layer"
    trainable = True

    def __init__(self, name: str):
        self.name = name
        self.index = 0
        self.training = True
        self._cache = None

    def forward(self, x: np.ndarray, ctx: ForwardContext) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_shape(self, input_shape: tuple) -> tuple:
        return input_shape

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def grads(self) -> dict[str, np.ndarray]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def describe(self) -> dict:
        return {"type": self.kind}

    def _saved(self):
        if self._cache is None:
            raise StateError(f"backward called before forward in layer '{self.name}'")
        return self._cache


class StoxLayer(Layer):
    """Shared logic of crossbar-mapped layers: activation scaling and the engine."""

    def __init__(self, name: str, spec: QuantSpec, quantized: bool = True):
        super().__init__(name)
        self.spec = spec
        self.quantized = quantized
        self.act_scale = np.zeros((), dtype=np.float64)
        self.weight: np.ndarray = np.zeros(0)
        self.weight_grad: np.ndarray = np.zeros(0)

    def set_spec(self, spec: QuantSpec) -> None:
        self.spec = spec

    def weight_matrix(self) -> np.ndarray:
        raise NotImplementedError

    def plan(self) -> CrossbarPlan:
        raise NotImplementedError

    def _mvm(self, cols: np.ndarray, ctx: ForwardContext) -> np.ndarray:
        if ctx.calibrate and self.training:
            peak = float(np.max(np.abs(cols))) if cols.size else 0.0
            self.act_scale = np.asarray(max(float(self.act_scale), peak))
        scale = float(self.act_scale)
        if scale <= 0:
            logger.warning("layer %s has no activation scale yet, using 1.0", self.name)
            scale = 1.0
        scaled = cols / scale
        inside = np.abs(scaled) <= 1.0
        engine = CrossbarMVM(self.name, self.spec, index=self.index, quantized=self.quantized)
        out = engine.forward(
            scaled, self.weight_matrix(), key=ctx.key(self.index), counter=ctx.counter, diagnostics=ctx.diagnostics
        )
        self._engine = (engine, inside, scale)
        return out * scale

    def _mvm_backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        engine, inside, scale = self._saved_engine()
        g_a, g_w = engine.backward(grad * scale)
        return np.where(inside, g_a, 0.0) / scale, g_w

    def _saved_engine(self):
        engine = getattr(self, "_engine", None)
        if engine is None:
            raise StateError(f"backward called before forward in layer '{self.name}'")
        return engine

    def params(self):
        return {"weight": self.weight}

    def grads(self):
        return {"weight": self.weight_grad}

    def buffers(self):
        return {"act_scale": self.act_scale}


class StoxConv2d(StoxLayer):
    kind = "stox_conv"

    def __init__(self, name, in_channels, out_channels, kernel_size=3, stride=1, padding=1, spec=None, quantized=True):
        super().__init__(name, spec or QuantSpec(), quantized)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = np.zeros((out_channels, in_channels, kernel_size, kernel_size))
        self.weight_grad = np.zeros_like(self.weight)

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel_size**2

    def weight_matrix(self):
        return self.weight.reshape(self.out_channels, -1).T

    def plan(self):
        k = self.kernel_size
        return CrossbarPlan(self.fan_in, self.out_channels, self.spec, kernel=(k, k, self.in_channels))

    def output_shape(self, input_shape):
        c, h, w = input_shape
        if c != self.in_channels:
            raise ShapeError(f"layer '{self.name}' expects {self.in_channels} channels, got {c}")
        k, s, p = self.kernel_size, self.stride, self.padding
        return (self.out_channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)

    def forward(self, x, ctx):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"layer '{self.name}' expects (N, {self.in_channels}, H, W), got {x.shape}")
        k = self.kernel_size
        cols, geometry = im2col(x, k, k, self.stride, self.padding)
        out = self._mvm(cols, ctx)
        n, _, _, _, h_out, w_out = geometry
        self._cache = geometry
        return out.reshape(n, h_out, w_out, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, grad):
        geometry = self._saved()
        g = grad.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        g_cols, g_w = self._mvm_backward(g)
        self.weight_grad = g_w.T.reshape(self.weight.shape)
        k = self.kernel_size
        return col2im(g_cols, geometry, k, k, self.stride, self.padding)

    def describe(self):
        return {
            "type": self.kind, "out_channels": self.out_channels, "kernel_size": self.kernel_size,
            "stride": self.stride, "padding": self.padding,
        }


class StoxDense(StoxLayer):
    kind = "stox_dense"

    def __init__(self, name, in_features, out_features, spec=None, quantized=True):
        super().__init__(name, spec or QuantSpec(), quantized)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = np.zeros((out_features, in_features))
        self.weight_grad = np.zeros_like(self.weight)

    @property
    def fan_in(self) -> int:
        return self.in_features

    def weight_matrix(self):
        return self.weight.T

    def plan(self):
        return CrossbarPlan(self.in_features, self.out_features, self.spec)

    def output_shape(self, input_shape):
        if input_shape != (self.in_features,):
            raise ShapeError(f"layer '{self.name}' expects ({self.in_features},), got {input_shape}")
        return (self.out_features,)

    def forward(self, x, ctx):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"layer '{self.name}' expects (N, {self.in_features}), got {x.shape}")
        self._cache = True
        return self._mvm(x, ctx)

    def backward(self, grad):
        self._saved()
        g_x, g_w = self._mvm_backward(grad)
        self.weight_grad = g_w.T
        return g_x

    def describe(self):
        return {"type": self.kind, "out_features": self.out_features}


class BatchNorm(Layer):
    """Batch normalization over every axis except channels (axis 1)."""

    kind = "batchnorm"

    def __init__(self, name, channels, momentum=0.1, eps=1e-5):
        super().__init__(name)
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.gamma_grad = np.zeros(channels)
        self.beta_grad = np.zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def _axes(self, x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    def _view(self, v, x):
        return v.reshape((1, -1) + (1,) * (x.ndim - 2))

    def forward(self, x, ctx):
        axes = self._axes(x)
        if self.training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = x.size // self.channels
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var * m / max(m - 1, 1)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - self._view(mean, x)) * self._view(inv_std, x)
        self._cache = (x_hat, inv_std, axes, self.training)
        return (self._view(self.gamma, x) * x_hat + self._view(self.beta, x)).astype(x.dtype, copy=False)

    def backward(self, grad):
        x_hat, inv_std, axes, training = self._saved()
        self.gamma_grad = (grad * x_hat).sum(axis=axes)
        self.beta_grad = grad.sum(axis=axes)
        g_hat = grad * self._view(self.gamma, grad)
        if not training:
            return g_hat * self._view(inv_std, grad)
        m = grad.size // self.channels
        return (
            self._view(inv_std, grad)
            / m
            * (m * g_hat - g_hat.sum(axis=axes, keepdims=True) - x_hat * (g_hat * x_hat).sum(axis=axes, keepdims=True))
        )

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self.gamma_grad, "beta": self.beta_grad}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class ReLU(Layer):
    kind = "relu"
    trainable = False

    def forward(self, x, ctx):
        self._cache = x > 0
        return np.where(self._cache, x, 0.0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return np.where(self._saved(), grad, 0.0)


class HardTanh(Layer):
    kind = "hardtanh"
    trainable = False

    def forward(self, x, ctx):
        self._cache = np.abs(x) <= 1.0
        return np.clip(x, -1.0, 1.0)

    def backward(self, grad):
        return np.where(self._saved(), grad, 0.0)


class MaxPool2d(Layer):
    kind = "maxpool"
    trainable = False

    def __init__(self, name, kernel_size=2):
        super().__init__(name)
        self.kernel_size = kernel_size

    def output_shape(self, input_shape):
        c, h, w = input_shape
        k = self.kernel_size
        if h < k or w < k:
            raise ShapeError(f"layer '{self.name}' cannot pool {h}x{w} with kernel {k}")
        return (c, h // k, w // k)

    def forward(self, x, ctx):
        n, c, h, w = x.shape
        k = self.kernel_size
        h_out, w_out = h // k, w // k
        blocks = x[:, :, : h_out * k, : w_out * k].reshape(n, c, h_out, k, w_out, k)
        blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h_out, w_out, k * k)
        arg = blocks.argmax(axis=-1)
        self._cache = (x.shape, arg)
        return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        shape, arg = self._saved()
        n, c, h, w = shape
        k = self.kernel_size
        h_out, w_out = h // k, w // k
        blocks = np.zeros((n, c, h_out, w_out, k * k), dtype=grad.dtype)
        np.put_along_axis(blocks, arg[..., None], grad[..., None], axis=-1)
        blocks = blocks.reshape(n, c, h_out, w_out, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h_out * k, w_out * k)
        out = np.zeros(shape, dtype=grad.dtype)
        out[:, :, : h_out * k, : w_out * k] = blocks
        return out

    def describe(self):
        return {"type": self.kind, "kernel_size": self.kernel_size}


class Flatten(Layer):
    kind = "flatten"
    trainable = False

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, ctx):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._saved())


class Identity(Layer):
    """No-op diagnostic layer. Its weight is frozen and never read."""

    kind = "identity"
    trainable = False

    def __init__(self, name):
        super().__init__(name)
        self.weight = np.zeros(1)

    def forward(self, x, ctx):
        self._cache = True
        return x

    def backward(self, grad):
        self._saved()
        return grad


class SoftmaxCrossEntropy:
    """Mean cross-entropy of softmax(logits) against integer labels."""

    kind = "softmax_ce"

    def __init__(self):
        self._cache = None

    def forward(self, logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
        z = logits - logits.max(axis=1, keepdims=True)
        log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        probs = np.exp(log_probs)
        loss = -log_probs[np.arange(len(labels)), labels].mean()
        self._cache = (probs, labels)
        return float(loss), probs

    def backward(self) -> np.ndarray:
        if self._cache is None:
            raise StateError("loss backward called before loss forward")
        probs, labels = self._cache
        grad = probs.copy()
        grad[np.arange(len(labels)), labels] -= 1.0
        return grad / len(labels)


class LayerGraph:
    """Ordered layers plus a softmax cross-entropy head."""

    def __init__(self, layers: list[Layer], input_shape: tuple, head: SoftmaxCrossEntropy | None = None):
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise ConfigError(f"layer names must be unique: {names}")
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.head = head or SoftmaxCrossEntropy()
        for i, layer in enumerate(layers):
            layer.index = i
        self._forwarded = False

    def __iter__(self):
        return iter(self.layers)

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise ConfigError(f"unknown layer id '{name}'")

    def stox_layers(self) -> list[StoxLayer]:
        return [layer for layer in self.layers if isinstance(layer, StoxLayer)]

    def train(self) -> "LayerGraph":
        for layer in self.layers:
            layer.training = True
        return self

    def eval(self) -> "LayerGraph":
        for layer in self.layers:
            layer.training = False
        return self

    def output_shapes(self) -> list[tuple]:
        shapes, shape = [], self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
            shapes.append(shape)
        return shapes

    def forward(self, x: np.ndarray, ctx: ForwardContext | None = None) -> np.ndarray:
        ctx = ctx or ForwardContext()
        for layer in self.layers:
            x = layer.forward(x, ctx)
            if not np.isfinite(x).all():
                raise DivergenceError(layer.name)
        self._forwarded = True
        return x

    def loss(self, logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
        return self.head.forward(logits, labels)

    def backward(self, grad: np.ndarray | None = None) -> dict[str, dict[str, np.ndarray]]:
        """Back-propagate ``grad`` (default: the head's loss gradient) through every layer."""
        if not self._forwarded:
            raise StateError("backward called before forward")
        if grad is None:
            grad = self.head.backward()
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        self.input_grad = grad
        return {layer.name: layer.grads() for layer in self.layers if layer.grads()}

    def parameters(self):
        """Yield (layer, name, value, grad) for every trainable parameter."""
        for layer in self.layers:
            if not layer.trainable:
                continue
            grads = layer.grads()
            for name, value in layer.params().items():
                yield layer, name, value, grads[name]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for layer in self.layers:
            for name, value in {**layer.params(), **layer.buffers()}.items():
                state[f"{layer.name}.{name}"] = np.asarray(value)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        missing = sorted(set(expected) - set(state))
        if missing:
            raise ConfigError(f"state is missing entries: {', '.join(missing)}")
        for key, value in state.items():
            if key not in expected:
                raise ConfigError(f"unexpected state entry '{key}'")
            if np.shape(value) != np.shape(expected[key]):
                raise ConfigError(f"state entry '{key}' has shape {np.shape(value)}, expected {np.shape(expected[key])}")
            layer_name, attr = key.rsplit(".", 1)
            setattr(self.layer(layer_name), attr, np.array(value, dtype=np.float64 if attr == "act_scale" else None))

    def describe(self) -> list[dict]:
        """Architecture as a layer list that ``models.build_graph`` accepts."""
        entries = []
        for layer in self.layers:
            entry = {"name": layer.name, **layer.describe()}
            if isinstance(layer, StoxLayer) and not layer.quantized:
                entry["quantized"] = False
            entries.append(entry)
        return entries
