"""Monte-Carlo layer sensitivity and per-layer sampling schedules.

A layer's sensitivity is the accuracy lost when its weights receive uniform
random noise at inference. More sensitive layers get more converter samples
under a budget on the total number of conversions.
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .layers import LayerGraph, StoxConv2d, StoxLayer
from .rng import generator
from .training import apply_sampling, evaluate

logger = logging.getLogger(__name__)

SAMPLE_LEVELS = (1, 2, 4, 8)
DEFAULT_TRIALS = 20
DEFAULT_EVAL_SIZE = 2000


@dataclass
class SensitivityResult:
    layer: str
    magnitude: float
    mean_drop: float
    std_drop: float
    trials: int
    drops: list[float] = field(default_factory=list, repr=False)


def perturb_and_score(
    graph: LayerGraph,
    layer_id: str,
    magnitude: float,
    trials: int,
    images: np.ndarray,
    labels: np.ndarray,
    seed: int = 0,
    batch_size: int = 256,
    baseline: float | None = None,
) -> SensitivityResult:
    """Mean accuracy drop when one layer's weights get Uniform[-m, m] noise.

    ``m = magnitude * max|W|``. Weights are restored after every trial, and
    converter draws repeat the unperturbed run, so a zero perturbation gives a
    zero drop.
    """
    layer = graph.layer(layer_id)
    if not hasattr(layer, "weight"):
        raise ConfigError(f"layer '{layer_id}' has no weights to perturb")
    if magnitude < 0:
        raise ConfigError(f"magnitude must be >= 0, got {magnitude}")
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    if baseline is None:
        _, baseline = evaluate(graph, images, labels, batch_size, seed=seed)

    original = layer.weight
    peak = float(np.max(np.abs(original))) if original.size else 0.0
    scale = magnitude * (peak if peak > 0 else 1.0)
    drops = []
    try:
        for trial in range(trials):
            rng = generator(seed, "sensitivity", layer.index, trial, int(round(magnitude * 1e6)))
            noise = rng.uniform(-scale, scale, size=original.shape)
            layer.weight = (original + noise).astype(original.dtype)
            _, acc = evaluate(graph, images, labels, batch_size, seed=seed)
            drops.append(baseline - acc)
    finally:
        layer.weight = original

    result = SensitivityResult(layer_id, magnitude, float(np.mean(drops)), float(np.std(drops)), trials, drops)
    logger.info("%s magnitude %.3g: mean drop %.4f (std %.4f)", layer_id, magnitude, result.mean_drop, result.std_drop)
    return result


def sensitivity_scan(
    graph: LayerGraph,
    magnitudes,
    images: np.ndarray,
    labels: np.ndarray,
    trials: int = DEFAULT_TRIALS,
    seed: int = 0,
    layers: list[str] | None = None,
    batch_size: int = 256,
) -> list[SensitivityResult]:
    """perturb_and_score for every (StoX) layer and magnitude, baseline evaluated once."""
    names = layers or [layer.name for layer in graph.stox_layers()]
    _, baseline = evaluate(graph, images, labels, batch_size, seed=seed)
    logger.info("unperturbed accuracy %.4f on %d images", baseline, len(images))
    return [
        perturb_and_score(graph, name, m, trials, images, labels, seed, batch_size, baseline)
        for name in names
        for m in magnitudes
    ]


def layer_scores(results: list[SensitivityResult]) -> dict[str, float]:
    """Mean drop per layer, averaged over magnitudes, in first-seen layer order."""
    grouped: dict[str, list[float]] = {}
    for r in results:
        grouped.setdefault(r.layer, []).append(r.mean_drop)
    return {layer: float(np.mean(drops)) for layer, drops in grouped.items()}


def layer_conversion_counts(graph: LayerGraph) -> dict[str, int]:
    """Converter evaluations per input image with one sample per conversion."""
    counts = {}
    shape = graph.input_shape
    for layer in graph.layers:
        shape = layer.output_shape(shape)
        if isinstance(layer, StoxLayer):
            plan = layer.plan()
            pixels = shape[1] * shape[2] if isinstance(layer, StoxConv2d) else 1
            counts[layer.name] = pixels * plan.n_arrs * plan.w_slices * plan.a_streams * plan.c_out
    return counts


@dataclass
class SamplingSchedule:
    """Per-layer sample counts plus their cost relative to one sample everywhere."""

    samples: dict[str, int]
    relative_conversions: float = 1.0

    def __post_init__(self):
        for name, n in self.samples.items():
            if n not in SAMPLE_LEVELS:
                raise ConfigError(f"layer '{name}': n_samples must be one of {SAMPLE_LEVELS}, got {n}")

    def conversions(self, counts: dict[str, int]) -> int:
        missing = sorted(set(counts) - set(self.samples))
        if missing:
            raise ConfigError(f"schedule has no entry for layers: {', '.join(missing)}")
        return sum(counts[name] * self.samples[name] for name in counts)

    def apply(self, graph: LayerGraph) -> None:
        apply_sampling(graph, self.samples)

    def to_dict(self) -> dict:
        return {"samples": dict(self.samples), "relative_conversions": self.relative_conversions}

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "SamplingSchedule":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"schedule file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"schedule file {path} is not valid JSON: {e}") from None
        if not isinstance(data, dict) or "samples" not in data:
            raise ConfigError(f"schedule file {path} needs a 'samples' mapping")
        return cls({k: int(v) for k, v in data["samples"].items()}, float(data.get("relative_conversions", 1.0)))


def build_schedule(scores: dict[str, float], conversions: dict[str, int], budget: float) -> SamplingSchedule:
    """Greedy allocation of samples under a relative conversion budget.

    Layers are visited by descending score (ties by position in ``conversions``)
    and raised through 1, 2, 4, 8. Allocation stops at the first raise that would
    push total conversions over ``budget`` times the one-sample total.
    """
    if not budget >= 1.0:
        raise ConfigError(f"budget must be >= 1, got {budget}")
    missing = sorted(set(conversions) - set(scores))
    if missing:
        raise ConfigError(f"no sensitivity score for layers: {', '.join(missing)}")
    names = list(conversions)
    order = sorted(range(len(names)), key=lambda i: (-scores[names[i]], i))
    samples = {name: 1 for name in names}
    base = sum(conversions.values())
    total = base

    def allocate():
        nonlocal total
        for i in order:
            name = names[i]
            for level in SAMPLE_LEVELS[1:]:
                extra = conversions[name] * (level - samples[name])
                if total + extra > budget * base:
                    return
                samples[name] = level
                total += extra

    allocate()
    relative = total / base if base else 1.0
    logger.info("schedule %s uses %.3fx the one-sample conversions", samples, relative)
    return SamplingSchedule(samples, relative)


def write_sensitivity_csv(path, results: list[SensitivityResult]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["layer", "magnitude", "mean_drop", "std_drop", "trials"])
        for r in results:
            writer.writerow([r.layer, format(r.magnitude, "g"), f"{r.mean_drop:.6f}", f"{r.std_drop:.6f}", r.trials])
