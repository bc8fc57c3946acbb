"""Fixed-point quantization, weight bit slicing and activation bit streaming.

Weights and activations are quantized with a symmetric uniform quantizer
(2^b - 1 levels, zero exact), stored in signed-magnitude form and split into
power-of-two weighted slices (weights) or 1-bit streams (activations). Weight
rows are partitioned into subarrays of at most R_arr rows.
"""

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

MODES = ("stochastic", "deterministic_sa", "expectation", "ideal")
SLICE_BITS = (1, 2, 4)
MAX_SAMPLES = 8
MAX_ROWS = 1024


@dataclass(frozen=True)
class QuantSpec:
    """Per-layer quantization and crossbar mapping configuration."""

    w_bits: int = 4
    a_bits: int = 4
    bits_per_slice: int = 4
    r_arr: int = 256
    alpha: float = 4.0
    n_samples: int = 1
    mode: str = "stochastic"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for field in ("w_bits", "a_bits", "bits_per_slice", "r_arr", "n_samples"):
            value = getattr(self, field)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ConfigError(f"{field} must be an integer, got {value!r}")
        if self.w_bits < 1:
            raise ConfigError(f"w_bits must be >= 1, got {self.w_bits}")
        if self.a_bits < 1:
            raise ConfigError(f"a_bits must be >= 1, got {self.a_bits}")
        if self.bits_per_slice not in SLICE_BITS:
            raise ConfigError(f"bits_per_slice must be one of {SLICE_BITS}, got {self.bits_per_slice}")
        if self.w_bits % self.bits_per_slice:
            raise ConfigError(
                f"w_bits ({self.w_bits}) must be divisible by bits_per_slice ({self.bits_per_slice})"
            )
        if self.r_arr < 1 or self.r_arr > MAX_ROWS or self.r_arr & (self.r_arr - 1):
            raise ConfigError(f"r_arr must be a power of two <= {MAX_ROWS}, got {self.r_arr}")
        if not (isinstance(self.alpha, (int, float)) and math.isfinite(self.alpha) and self.alpha > 0):
            raise ConfigError(f"alpha must be a finite number > 0, got {self.alpha!r}")
        if not 1 <= self.n_samples <= MAX_SAMPLES:
            raise ConfigError(f"n_samples must be in [1, {MAX_SAMPLES}], got {self.n_samples}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def w_slices(self) -> int:
        return self.w_bits // self.bits_per_slice

    @property
    def a_streams(self) -> int:
        return self.a_bits

    @property
    def label(self) -> str:
        return f"{self.w_bits}w{self.a_bits}a{self.bits_per_slice}b_s"

    @classmethod
    def from_label(cls, label: str, **kwargs) -> "QuantSpec":
        """Parse the ``XwYaZb_s`` notation, e.g. ``4w4a2b_s``."""
        text = label.strip().lower()
        try:
            w_part, rest = text.split("w", 1)
            a_part, rest = rest.split("a", 1)
            b_part = rest.split("b", 1)[0]
            return cls(w_bits=int(w_part), a_bits=int(a_part), bits_per_slice=int(b_part), **kwargs)
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"cannot parse quantization label {label!r}") from None

    def replace(self, **changes) -> "QuantSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "QuantSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown QuantSpec keys: {', '.join(unknown)}")
        return cls(**data)


def max_level(bits: int) -> int:
    """Largest quantized magnitude for ``bits`` signed bits."""
    if bits < 1:
        raise ConfigError(f"bits must be >= 1, got {bits}")
    return 1 if bits == 1 else 2 ** (bits - 1) - 1


def step_size(bits: int) -> float:
    return 2.0 if bits == 1 else 1.0 / max_level(bits)


def quantize(x, bits: int) -> np.ndarray:
    """Symmetric uniform quantization of values in [-1, 1] to signed integers."""
    level = max_level(bits)
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    if bits == 1:
        return np.sign(x).astype(np.int64)
    return np.rint(x * level).astype(np.int64)


def dequantize(q, bits: int) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) / max_level(bits)


def normalize_weights(w) -> tuple[np.ndarray, np.ndarray]:
    """Scale every crossbar column of a (fan_in, columns) matrix into [-1, 1].

    Returns the normalized matrix and the per-column max-abs factors. All-zero
    columns keep factor 1.
    """
    w = np.asarray(w)
    if w.ndim != 2:
        raise ConfigError(f"normalize_weights expects a (fan_in, columns) matrix, got shape {w.shape}")
    scale = np.max(np.abs(w), axis=0)
    scale = np.where(scale > 0, scale, 1.0).astype(w.dtype if w.dtype.kind == "f" else np.float64)
    return w / scale, scale


def subarray_count(fan_in: int, r_arr: int) -> int:
    """Number of subarrays needed for ``fan_in`` rows: ceil(fan_in / r_arr)."""
    return -(-int(fan_in) // int(r_arr))


def rows_per_subarray(fan_in: int, r_arr: int) -> int:
    return min(int(r_arr), int(fan_in))


@dataclass(frozen=True)
class SlicedTensor:
    """Weight matrix in signed-magnitude cell groups, sliced and partitioned.

    ``positive`` and ``negative`` are indexed (slice, subarray, row, column); the
    last subarray is zero-padded to ``rows_per_arr`` rows.
    """

    positive: np.ndarray
    negative: np.ndarray
    n_arrs: int
    fan_in: int
    slice_weights: tuple[int, ...]
    sign_convention: str = "signed_magnitude"

    @property
    def slices(self) -> np.ndarray:
        return self.positive.astype(np.int64) - self.negative.astype(np.int64)

    @property
    def rows_per_arr(self) -> int:
        return self.positive.shape[2]

    @property
    def cell_count(self) -> int:
        return self.positive.size + self.negative.size

    def recombine(self) -> np.ndarray:
        factors = np.asarray(self.slice_weights, dtype=np.int64)[:, None, None, None]
        full = (self.slices * factors).sum(axis=0)
        n_arrs, rows, cols = full.shape
        return full.reshape(n_arrs * rows, cols)[: self.fan_in]


def slice_weights(w_q, spec: QuantSpec) -> SlicedTensor:
    """Split a quantized (fan_in, columns) weight matrix into slices and subarrays."""
    w_q = np.asarray(w_q, dtype=np.int64)
    if w_q.ndim != 2:
        raise ConfigError(f"slice_weights expects a (fan_in, columns) matrix, got shape {w_q.shape}")
    magnitude = np.abs(w_q)
    if magnitude.size and magnitude.max() >= 2 ** spec.w_bits:
        raise ConfigError(f"weights do not fit in {spec.w_bits} bits")
    fan_in, cols = w_q.shape
    n_arrs = subarray_count(fan_in, spec.r_arr)
    rows = rows_per_subarray(fan_in, spec.r_arr)
    padded = np.zeros((n_arrs * rows, cols), dtype=np.int64)
    padded[:fan_in] = w_q
    padded = padded.reshape(n_arrs, rows, cols)

    bps = spec.bits_per_slice
    mask = 2**bps - 1
    pos_mag = np.where(padded > 0, padded, 0)
    neg_mag = np.where(padded < 0, -padded, 0)
    shifts = [bps * (spec.w_slices - 1 - s) for s in range(spec.w_slices)]
    positive = np.stack([(pos_mag >> sh) & mask for sh in shifts]).astype(np.uint8)
    negative = np.stack([(neg_mag >> sh) & mask for sh in shifts]).astype(np.uint8)
    return SlicedTensor(
        positive=positive,
        negative=negative,
        n_arrs=n_arrs,
        fan_in=fan_in,
        slice_weights=tuple(2**sh for sh in shifts),
    )


@dataclass(frozen=True)
class ActivationStreams:
    """Bit streams of a quantized activation tensor, most significant first.

    ``positive`` and ``negative`` have shape (a_bits, *activation_shape).
    """

    positive: np.ndarray
    negative: np.ndarray
    stream_weights: tuple[int, ...]

    @property
    def bipolar(self) -> np.ndarray:
        # DAC drive per time step: +1, -1 or 0
        return self.positive.astype(np.int8) - self.negative.astype(np.int8)

    def recombine(self) -> np.ndarray:
        weights = np.asarray(self.stream_weights, dtype=np.int64).reshape((-1,) + (1,) * (self.positive.ndim - 1))
        return (self.bipolar.astype(np.int64) * weights).sum(axis=0)


def stream_activations(a_q, spec: QuantSpec) -> ActivationStreams:
    a_q = np.asarray(a_q, dtype=np.int64)
    if a_q.size and np.abs(a_q).max() >= 2 ** spec.a_bits:
        raise ConfigError(f"activations do not fit in {spec.a_bits} bits")
    pos_mag = np.where(a_q > 0, a_q, 0)
    neg_mag = np.where(a_q < 0, -a_q, 0)
    shifts = list(range(spec.a_bits - 1, -1, -1))
    positive = np.stack([(pos_mag >> sh) & 1 for sh in shifts]).astype(np.uint8)
    negative = np.stack([(neg_mag >> sh) & 1 for sh in shifts]).astype(np.uint8)
    return ActivationStreams(positive=positive, negative=negative, stream_weights=tuple(2**sh for sh in shifts))
