"""Crossbar matrix-vector products with converter-quantized partial sums.

A layer's (fan_in, columns) weight matrix is column-normalized, quantized,
bit-sliced and partitioned into subarrays; activations are quantized and fed as
1-bit streams. Every (subarray, stream, slice) partial sum is normalized into
[-1, 1], passed through the converter (optionally multisampled), and the
converted values are shift-and-added, averaged over subarrays and samples and
rescaled back to the layer's units.
"""

import csv
import logging
import threading
from dataclasses import dataclass

import numpy as np

from .converter import ConverterModel, convert_multisample, converter_grad
from .errors import DiagnosticsError, NonFiniteError, ShapeError, StateError
from .quantization import (
    QuantSpec,
    max_level,
    normalize_weights,
    quantize,
    rows_per_subarray,
    slice_weights,
    stream_activations,
    subarray_count,
)
from .rng import ConversionKey

logger = logging.getLogger(__name__)

BUCKET_WIDTH = 0.02
BUCKET_CENTERS = np.round(np.linspace(-1.0, 1.0, 101), 10)
_BUCKET_EDGES = np.linspace(-1.0 - BUCKET_WIDTH / 2, 1.0 + BUCKET_WIDTH / 2, 102)


@dataclass(frozen=True)
class CrossbarPlan:
    """How one layer maps onto subarrays, slices and streams."""

    fan_in: int
    c_out: int
    spec: QuantSpec
    kernel: tuple[int, int, int] | None = None  # (k_h, k_w, c_in) for conv layers

    def __post_init__(self):
        if self.kernel is not None:
            k_h, k_w, c_in = self.kernel
            if k_h * k_w * c_in != self.fan_in:
                raise ShapeError(f"kernel {self.kernel} does not match fan_in {self.fan_in}")

    @property
    def n_arrs(self) -> int:
        return subarray_count(self.fan_in, self.spec.r_arr)

    @property
    def rows_per_arr(self) -> int:
        return rows_per_subarray(self.fan_in, self.spec.r_arr)

    @property
    def w_slices(self) -> int:
        return self.spec.w_slices

    @property
    def a_streams(self) -> int:
        return self.spec.a_streams

    @property
    def column_count(self) -> int:
        return self.c_out * self.w_slices

    @property
    def conversions_per_output(self) -> int:
        """Converter evaluations per output pixel (all output channels)."""
        return self.n_arrs * self.w_slices * self.a_streams * self.spec.n_samples * self.c_out


def plan_layer(fan_in: int, c_out: int, spec: QuantSpec, kernel=None) -> CrossbarPlan:
    return CrossbarPlan(fan_in=int(fan_in), c_out=int(c_out), spec=spec, kernel=kernel)


class ConversionCounter:
    """Counts converter evaluations per layer. Safe to share between threads."""

    def __init__(self):
        self._counts: dict[str, int] = {}
        self._lock = threading.Lock()

    def add(self, layer: str, n: int) -> None:
        with self._lock:
            self._counts[layer] = self._counts.get(layer, 0) + int(n)

    def merge(self, other: "ConversionCounter") -> None:
        for layer, n in other.counts().items():
            self.add(layer, n)

    def counts(self) -> dict[str, int]:
        with self._lock:
            return dict(self._counts)

    def __getitem__(self, layer: str) -> int:
        return self.counts().get(layer, 0)

    @property
    def total(self) -> int:
        return sum(self.counts().values())


class PartialSumHistogram:
    """Histogram of normalized pre-conversion partial sums over [-1, 1]."""

    def __init__(self):
        self.counts = np.zeros(len(BUCKET_CENTERS), dtype=np.int64)
        self.active_bits = 0
        self.total_bits = 0

    def add(self, values) -> None:
        values = np.clip(np.asarray(values, dtype=np.float64).ravel(), -1.0, 1.0)
        counts, _ = np.histogram(values, bins=_BUCKET_EDGES)
        self.counts += counts

    def add_activity(self, streams: np.ndarray) -> None:
        self.active_bits += int(np.count_nonzero(streams))
        self.total_bits += int(streams.size)

    def merge(self, other: "PartialSumHistogram") -> None:
        self.counts += other.counts
        self.active_bits += other.active_bits
        self.total_bits += other.total_bits

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def activity(self) -> float:
        return self.active_bits / self.total_bits if self.total_bits else 0.0

    def frequencies(self) -> np.ndarray:
        return self.counts / max(self.total, 1)

    def mean(self) -> float:
        return float(np.dot(self.frequencies(), BUCKET_CENTERS))

    def std(self) -> float:
        p = self.frequencies()
        mu = np.dot(p, BUCKET_CENTERS)
        return float(np.sqrt(np.dot(p, (BUCKET_CENTERS - mu) ** 2)))

    def kurtosis(self) -> float:
        p = self.frequencies()
        mu = np.dot(p, BUCKET_CENTERS)
        var = np.dot(p, (BUCKET_CENTERS - mu) ** 2)
        if var == 0:
            return float("inf")
        return float(np.dot(p, (BUCKET_CENTERS - mu) ** 4) / var**2)


class Diagnostics:
    """Per-layer partial-sum histograms, mergeable across threads or runs."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.layers: dict[str, PartialSumHistogram] = {}

    def record(self, layer: str, normalized_ps: np.ndarray, streams: np.ndarray) -> None:
        if not self.enabled:
            return
        hist = self.layers.setdefault(layer, PartialSumHistogram())
        hist.add(normalized_ps)
        hist.add_activity(streams)

    def merge(self, other: "Diagnostics") -> None:
        for layer, hist in other.layers.items():
            self.layers.setdefault(layer, PartialSumHistogram()).merge(hist)

    def combined(self, layer: str | None = None) -> PartialSumHistogram:
        if not self.enabled:
            raise DiagnosticsError("partial-sum diagnostics are disabled for this run")
        if layer is not None:
            if layer not in self.layers:
                raise DiagnosticsError(f"no partial sums recorded for layer '{layer}'")
            return self.layers[layer]
        if not self.layers:
            raise DiagnosticsError("no forward pass was recorded with diagnostics enabled")
        out = PartialSumHistogram()
        for hist in self.layers.values():
            out.merge(hist)
        return out


def partial_sum_histogram(diagnostics: Diagnostics | None, layer: str | None = None) -> list[tuple]:
    """Rows of (bucket_center, count, normalized_frequency)."""
    if diagnostics is None:
        raise DiagnosticsError("partial-sum diagnostics are disabled for this run")
    hist = diagnostics.combined(layer)
    freq = hist.frequencies()
    return [(float(c), int(n), float(f)) for c, n, f in zip(BUCKET_CENTERS, hist.counts, freq)]


def write_histogram_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["bucket_center", "count", "normalized_frequency"])
        for center, count, freq in rows:
            writer.writerow([f"{center:.2f}", count, format(freq, ".10g")])


def im2col(x: np.ndarray, k_h: int, k_w: int, stride: int = 1, padding: int = 0) -> tuple[np.ndarray, tuple]:
    """Lower an NCHW tensor to (N * H_out * W_out, C * k_h * k_w) rows."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    h_out = (h + 2 * padding - k_h) // stride + 1
    w_out = (w + 2 * padding - k_w) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"kernel {k_h}x{k_w} does not fit input {h}x{w} with padding {padding}")
    windows = np.lib.stride_tricks.sliding_window_view(x, (k_h, k_w), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :h_out, :w_out]
    # (n, c, h_out, w_out, k_h, k_w) -> (n, h_out, w_out, c, k_h, k_w)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c * k_h * k_w)
    return np.ascontiguousarray(cols), (n, c, h, w, h_out, w_out)


def col2im(cols: np.ndarray, geometry: tuple, k_h: int, k_w: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add rows back to an NCHW tensor."""
    n, c, h, w, h_out, w_out = geometry
    patches = cols.reshape(n, h_out, w_out, c, k_h, k_w).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(k_h):
        for j in range(k_w):
            out[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += patches[:, :, i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


class CrossbarMVM:
    """Forward and backward pass of one layer's crossbar product.

    ``quantized=False`` keeps the normalized weights and activations real-valued
    (one slice, one stream); the converter still sees row-normalized partial
    sums. That relaxation is what gradient checks run against.
    """

    def __init__(self, name: str, spec: QuantSpec, index: int = 0, quantized: bool = True):
        self.name = name
        self.spec = spec
        self.index = index
        self.quantized = quantized
        self._cache = None

    @property
    def converter(self) -> ConverterModel:
        return ConverterModel.from_spec(self.spec, layer=self.name)

    def _encode(self, a: np.ndarray, w_bn: np.ndarray, dtype):
        """Return activation streams (n, T, P, R), weight slices (n, S, R, C) and the scale constants."""
        fan_in, cols = w_bn.shape
        n_arrs = subarray_count(fan_in, self.spec.r_arr)
        rows = rows_per_subarray(fan_in, self.spec.r_arr)
        pad = n_arrs * rows - fan_in

        if self.quantized:
            sliced = slice_weights(quantize(w_bn, self.spec.w_bits), self.spec)
            slices = sliced.slices.astype(dtype).transpose(1, 0, 2, 3)
            streams = stream_activations(quantize(a, self.spec.a_bits), self.spec)
            bits = streams.bipolar.astype(dtype)
            f = np.asarray(sliced.slice_weights, dtype=dtype)
            g = np.asarray(streams.stream_weights, dtype=dtype)
            cell_max = 2**self.spec.bits_per_slice - 1
            levels = max_level(self.spec.w_bits) * max_level(self.spec.a_bits)
        else:
            slices = np.pad(w_bn, ((0, pad), (0, 0))).reshape(n_arrs, 1, rows, cols).astype(dtype)
            bits = a[None].astype(dtype)
            f = np.ones(1, dtype=dtype)
            g = np.ones(1, dtype=dtype)
            cell_max = 1
            levels = 1

        t, p = bits.shape[0], bits.shape[1]
        bits = np.pad(bits, ((0, 0), (0, 0), (0, pad))).reshape(t, p, n_arrs, rows).transpose(2, 0, 1, 3)
        return bits, slices, f, g, n_arrs, rows, cell_max, levels

    def forward(
        self,
        a,
        w,
        key: ConversionKey | None = None,
        counter: ConversionCounter | None = None,
        diagnostics: Diagnostics | None = None,
    ) -> np.ndarray:
        """Compute the (P, C) output for activations (P, fan_in) in [-1, 1] and weights (fan_in, C)."""
        a = np.asarray(a)
        w = np.asarray(w)
        if a.ndim != 2 or w.ndim != 2 or a.shape[1] != w.shape[0]:
            raise ShapeError(f"layer '{self.name}': activations {a.shape} do not match weights {w.shape}")
        if not (np.isfinite(a).all() and np.isfinite(w).all()):
            raise NonFiniteError(self.name)
        dtype = np.result_type(a.dtype, w.dtype, np.float32)
        a = np.clip(a.astype(dtype, copy=False), -1.0, 1.0)
        w_bn, colscale = normalize_weights(w.astype(dtype, copy=False))

        bits, slices, f, g, n_arrs, rows, cell_max, levels = self._encode(a, w_bn, dtype)
        # (n, T, 1, P, R) @ (n, 1, S, R, C) -> (n, T, S, P, C)
        ps = np.matmul(bits[:, :, None], slices[:, None])
        norm = rows * cell_max
        x = ps / norm

        model = self.converter
        if diagnostics is not None:
            diagnostics.record(self.name, x, bits)
        converted = convert_multisample(x, model, key)
        if counter is not None:
            counter.add(self.name, x.size * model.n_samples)

        coef = (g[:, None] * f[None, :]).astype(dtype)
        recombined = np.einsum("ntspc,ts->pc", converted, coef) / n_arrs
        gain = n_arrs * norm / levels
        out = recombined * gain * colscale[None, :]

        self._cache = dict(
            a=a, w=w, w_bn=w_bn, colscale=colscale, bits=bits, slices=slices, x=x,
            coef=coef, recombined=recombined, n_arrs=n_arrs, norm=norm, gain=gain,
            f=f, g=g, model=model,
        )
        return out

    def backward(self, grad_out) -> tuple[np.ndarray, np.ndarray]:
        """Return (grad_activations, grad_weights) for the last forward call."""
        if self._cache is None:
            raise StateError(f"backward called before forward in layer '{self.name}'")
        c = self._cache
        grad_out = np.asarray(grad_out, dtype=c["recombined"].dtype)
        fan_in = c["w"].shape[0]
        n_arrs = c["n_arrs"]

        g_rec = grad_out * c["gain"] * c["colscale"][None, :]
        g_colscale = (grad_out * c["recombined"]).sum(axis=0) * c["gain"]

        # S&A and averaging over subarrays, then the converter (STE or exact)
        g_conv = g_rec[None, None, None] * (c["coef"][None, :, :, None, None] / n_arrs)
        g_ps = g_conv * converter_grad(c["x"], c["model"]) / c["norm"]

        bits, slices = c["bits"], c["slices"]
        # d ps / d bits: (n, T, S, P, C) @ (n, 1, S, C, R) summed over slices
        g_bits = np.matmul(g_ps, slices[:, None].transpose(0, 1, 2, 4, 3)).sum(axis=2)
        # d ps / d slices: (n, T, 1, R, P) @ (n, T, S, P, C) summed over streams
        g_slices = np.matmul(bits[:, :, None].transpose(0, 1, 2, 4, 3), g_ps).sum(axis=1)

        f, g = c["f"], c["g"]
        # slicing and streaming pass gradient straight through to the integer value
        g_wq = np.einsum("nsrc,s->nrc", g_slices, 1.0 / (f * len(f)))
        g_aq = np.einsum("ntpr,t->npr", g_bits, 1.0 / (g * len(g)))
        g_wq = g_wq.reshape(-1, g_wq.shape[-1])[:fan_in]
        g_aq = g_aq.transpose(1, 0, 2).reshape(g_aq.shape[1], -1)[:, :fan_in]

        if self.quantized:
            g_wbn = g_wq * max_level(self.spec.w_bits)
            g_a = g_aq * max_level(self.spec.a_bits)
        else:
            g_wbn, g_a = g_wq, g_aq
        g_a = np.where(np.abs(c["a"]) <= 1.0, g_a, 0.0)

        # w_bn = w / colscale with colscale = max |w| per column
        w, colscale = c["w"], c["colscale"]
        g_w = g_wbn / colscale[None, :]
        g_colscale = g_colscale - (g_wbn * w).sum(axis=0) / colscale**2
        nonzero = np.abs(w).max(axis=0) > 0
        argmax = np.argmax(np.abs(w), axis=0)
        cols = np.arange(w.shape[1])[nonzero]
        g_w[argmax[nonzero], cols] += g_colscale[nonzero] * np.sign(w[argmax[nonzero], cols])
        return g_a, g_w


def mvm_forward(
    activations,
    weights,
    spec: QuantSpec,
    *,
    key: ConversionKey | None = None,
    counter: ConversionCounter | None = None,
    diagnostics: Diagnostics | None = None,
    quantized: bool = True,
    name: str = "mvm",
) -> np.ndarray:
    """One-shot crossbar product, see :class:`CrossbarMVM`."""
    engine = CrossbarMVM(name, spec, quantized=quantized)
    return engine.forward(activations, weights, key=key, counter=counter, diagnostics=diagnostics)
