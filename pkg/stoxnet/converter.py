"""Behavioral model of the stochastic SOT-MTJ partial-sum converter.

The switching probability follows (1 + tanh(alpha * x)) / 2 and the switched /
unswitched states read out as +1 / -1, so one conversion is an unbiased
estimate of tanh(alpha * x). Averaging ``n_samples`` conversions reduces the
variance by 1 / n_samples.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NonFiniteError
from .quantization import MAX_SAMPLES, MODES, QuantSpec
from .rng import ConversionKey


@dataclass(frozen=True)
class ConverterModel:
    alpha: float = 4.0
    n_samples: int = 1
    mode: str = "stochastic"
    layer: str = "layer"
    # STE pass-through region: |alpha * x| <= clamp
    clamp: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if not 1 <= self.n_samples <= MAX_SAMPLES:
            raise ConfigError(f"n_samples must be in [1, {MAX_SAMPLES}], got {self.n_samples}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.clamp > 0:
            raise ConfigError(f"clamp must be > 0, got {self.clamp}")

    @classmethod
    def from_spec(cls, spec: QuantSpec, layer: str = "layer") -> "ConverterModel":
        return cls(alpha=spec.alpha, n_samples=spec.n_samples, mode=spec.mode, layer=layer)

    @property
    def is_random(self) -> bool:
        return self.mode == "stochastic"


def switching_probability(x, alpha: float) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(alpha * np.asarray(x)))


def _check_finite(x: np.ndarray, model: ConverterModel) -> None:
    if not np.isfinite(x).all():
        raise NonFiniteError(model.layer)


def convert(x, model: ConverterModel, rng: np.random.Generator | None = None) -> np.ndarray:
    """One conversion per element.

    stochastic: +1 with probability (1 + tanh(alpha x)) / 2, else -1.
    deterministic_sa: sign(x) with sign(0) = +1.
    expectation: tanh(alpha x).
    ideal: x (full-precision readout).
    """
    x = np.asarray(x)
    _check_finite(x, model)
    dtype = x.dtype if x.dtype.kind == "f" else np.float64
    if model.mode == "stochastic":
        if rng is None:
            raise ConfigError(f"stochastic conversion in layer '{model.layer}' needs a random generator")
        # rand ~ U[-1, 1): P(tanh(alpha x) >= rand) = (1 + tanh(alpha x)) / 2
        u = rng.uniform(-1.0, 1.0, size=x.shape)
        return np.where(np.tanh(model.alpha * x) >= u, 1.0, -1.0).astype(dtype)
    if model.mode == "deterministic_sa":
        return np.where(x >= 0, 1.0, -1.0).astype(dtype)
    if model.mode == "expectation":
        return np.tanh(model.alpha * x).astype(dtype)
    return x.astype(dtype, copy=True)


def convert_multisample(x, model: ConverterModel, key: ConversionKey | None = None) -> np.ndarray:
    """Mean of ``model.n_samples`` independent conversions.

    Sample j draws from ``key.generator(j)``. Non-random modes return the same
    value for every sample, so they are evaluated once.
    """
    x = np.asarray(x)
    if not model.is_random:
        return convert(x, model)
    if key is None:
        raise ConfigError(f"stochastic conversion in layer '{model.layer}' needs a conversion key")
    total = convert(x, model, key.generator(0))
    for j in range(1, model.n_samples):
        total += convert(x, model, key.generator(j))
    if model.n_samples > 1:
        total /= model.n_samples
    return total


def converter_grad(x, model: ConverterModel) -> np.ndarray:
    """Derivative used in the backward pass for d(conversion)/dx.

    For the stochastic and sense-amp modes this is a straight-through estimate:
    ``alpha`` where ``|alpha * x| <= clamp`` and zero elsewhere. The window is on
    the tanh argument rather than on ``x`` because row normalization already
    keeps ``|x| <= 1``, so a window on ``x`` alone would never close.
    """
    x = np.asarray(x)
    if model.mode == "ideal":
        return np.ones_like(x)
    if model.mode == "expectation":
        t = np.tanh(model.alpha * x)
        return model.alpha * (1.0 - t * t)
    # straight-through estimator, zero outside the saturation range
    inside = np.abs(model.alpha * x) <= model.clamp
    return np.where(inside, model.alpha, 0.0).astype(x.dtype if x.dtype.kind == "f" else np.float64)
