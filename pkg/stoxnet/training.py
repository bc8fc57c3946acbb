"""Training loop, evaluation and checkpoints for StoX layer graphs."""

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .crossbar import ConversionCounter, Diagnostics
from .errors import CheckpointError, ConfigError, DivergenceError
from .layers import ForwardContext, LayerGraph, StoxLayer
from .models import build_graph, resolve_architecture
from .quantization import QuantSpec
from .rng import generator

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
OPTIMIZERS = ("momentum_sgd", "sgd")
LR_SCHEDULES = ("cosine", "constant")
METRICS_COLUMNS = ("epoch", "split", "loss", "accuracy", "wall_seconds")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_schedule: str = "cosine"
    optimizer: str = "momentum_sgd"
    seed: int = 0
    dataset: str = "mnist"
    sampling_schedule: dict[str, int] | None = None
    calibrate_epochs: int = 1
    eval_batch_size: int = 256
    dtype: str = "float32"
    log_wall_time: bool = False
    train_limit: int | None = None
    test_limit: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if self.calibrate_epochs < 1:
            raise ConfigError("calibrate_epochs must be >= 1 so activation scales get measured")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown train keys: {', '.join(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class MomentumSGD:
    """SGD with heavy-ball momentum; weight decay applies to StoX weights only."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[tuple[str, str], np.ndarray] = {}

    def step(self, graph: LayerGraph, lr: float) -> None:
        for layer, name, value, grad in graph.parameters():
            update = grad
            if self.weight_decay and isinstance(layer, StoxLayer):
                update = update + self.weight_decay * value
            if self.momentum:
                key = (layer.name, name)
                v = self.velocity.get(key)
                v = update if v is None else self.momentum * v + update
                self.velocity[key] = v
                update = v
            value -= (lr * update).astype(value.dtype, copy=False)


def cosine_lr(base: float, epoch: int, epochs: int) -> float:
    return base * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))


def learning_rate(config: TrainConfig, epoch: int) -> float:
    if config.lr_schedule == "cosine":
        return cosine_lr(config.lr, epoch, config.epochs)
    return config.lr


def backward(graph: LayerGraph, grad: np.ndarray | None = None) -> dict[str, dict[str, np.ndarray]]:
    """Gradients of every parameter for the last forward pass, keyed by layer and name."""
    grads = graph.backward(grad)
    for layer_name, layer_grads in grads.items():
        for name, g in layer_grads.items():
            if not np.isfinite(g).all():
                raise DivergenceError(layer_name, f"non-finite gradient of '{name}' in layer '{layer_name}'")
    return grads


def apply_sampling(graph: LayerGraph, samples: dict[str, int]) -> None:
    """Set per-layer converter sample counts; every name must be a StoX layer."""
    stox = {layer.name: layer for layer in graph.stox_layers()}
    for name, n in samples.items():
        if name not in stox:
            raise ConfigError(f"sampling schedule names unknown StoX layer '{name}'")
        stox[name].set_spec(stox[name].spec.replace(n_samples=int(n)))


def override_specs(graph: LayerGraph, **changes) -> None:
    """Apply the same QuantSpec changes (e.g. n_samples, alpha, mode) to every StoX layer."""
    for layer in graph.stox_layers():
        layer.set_spec(layer.spec.replace(**changes))


def cast_parameters(graph: LayerGraph, dtype) -> None:
    for layer in graph.stox_layers():
        layer.weight = layer.weight.astype(dtype)


def evaluate(
    graph: LayerGraph,
    images: np.ndarray,
    labels: np.ndarray,
    batch_size: int = 256,
    seed: int = 0,
    counter: ConversionCounter | None = None,
    diagnostics: Diagnostics | None = None,
) -> tuple[float, float]:
    """Mean loss and accuracy. Converter draws are keyed by ('eval', batch index)."""
    graph.eval()
    total_loss, correct = 0.0, 0
    for b, start in enumerate(range(0, len(images), batch_size)):
        x = images[start : start + batch_size]
        y = labels[start : start + batch_size]
        ctx = ForwardContext(seed=seed, step=b, stream="eval", counter=counter, diagnostics=diagnostics)
        logits = graph.forward(x, ctx)
        loss, probs = graph.loss(logits, y)
        total_loss += loss * len(y)
        correct += int((probs.argmax(axis=1) == y).sum())
    n = max(len(images), 1)
    return total_loss / n, correct / n


@dataclass
class TrainResult:
    metrics: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None

    @property
    def final_test_accuracy(self) -> float:
        tests = [row for row in self.metrics if row["split"] == "test"]
        return tests[-1]["accuracy"] if tests else float("nan")


def write_metrics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            wall = row.get("wall_seconds")
            writer.writerow([
                row["epoch"], row["split"], format(row["loss"], ".8g"), format(row["accuracy"], ".6f"),
                "" if wall is None else f"{wall:.3f}",
            ])


def train(graph: LayerGraph, config: TrainConfig, dataset, out_dir=None) -> TrainResult:
    """Train ``graph`` on ``dataset``; write metrics.csv and checkpoint.npz under ``out_dir``."""
    dtype = np.dtype(config.dtype)
    train_x = dataset.train_x.astype(dtype, copy=False)
    test_x = dataset.test_x.astype(dtype, copy=False)
    train_y, test_y = dataset.train_y, dataset.test_y
    if config.sampling_schedule:
        apply_sampling(graph, config.sampling_schedule)
    cast_parameters(graph, dtype)

    momentum = config.momentum if config.optimizer == "momentum_sgd" else 0.0
    optimizer = MomentumSGD(momentum, config.weight_decay)
    logger.info(
        "training %d epochs on %d images, optimizer %s (momentum %.2f), %s lr %.4g",
        config.epochs, len(train_x), config.optimizer, momentum, config.lr_schedule, config.lr,
    )
    result = TrainResult()
    step = 0
    for epoch in range(config.epochs):
        started = time.perf_counter()
        lr = learning_rate(config, epoch)
        order = generator(config.seed, "data", epoch).permutation(len(train_x))
        graph.train()
        total_loss, correct, seen = 0.0, 0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            x, y = train_x[idx], train_y[idx]
            ctx = ForwardContext(seed=config.seed, step=step, calibrate=epoch < config.calibrate_epochs)
            logits = graph.forward(x, ctx)
            loss, probs = graph.loss(logits, y)
            if not math.isfinite(loss):
                raise DivergenceError("softmax_ce", f"loss became {loss} at epoch {epoch + 1}")
            backward(graph)
            optimizer.step(graph, lr)
            total_loss += loss * len(y)
            correct += int((probs.argmax(axis=1) == y).sum())
            seen += len(y)
            step += 1
            logger.debug("epoch %d step %d loss %.4f", epoch + 1, step, loss)

        train_wall = time.perf_counter() - started if config.log_wall_time else None
        result.metrics.append({
            "epoch": epoch + 1, "split": "train", "loss": total_loss / seen,
            "accuracy": correct / seen, "wall_seconds": train_wall,
        })
        test_loss, test_acc = evaluate(graph, test_x, test_y, config.eval_batch_size, seed=config.seed)
        test_wall = time.perf_counter() - started if config.log_wall_time else None
        result.metrics.append({
            "epoch": epoch + 1, "split": "test", "loss": test_loss, "accuracy": test_acc, "wall_seconds": test_wall,
        })
        logger.info(
            "epoch %d/%d  train loss %.4f acc %.4f  test loss %.4f acc %.4f",
            epoch + 1, config.epochs, total_loss / seen, correct / seen, test_loss, test_acc,
        )

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out_dir / "metrics.csv", result.metrics)
        result.checkpoint = save_checkpoint(
            out_dir / "checkpoint.npz", graph, seed=config.seed, extra={"train": config.to_dict()}
        )
    return result


def save_checkpoint(path, graph: LayerGraph, seed: int = 0, extra: dict | None = None) -> Path:
    """Parameters and buffers plus a JSON ``__meta__`` entry describing the graph."""
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "package_version": __version__,
        "architecture": graph.describe(),
        "input_shape": list(graph.input_shape),
        "specs": {layer.name: layer.spec.to_dict() for layer in graph.stox_layers()},
        "seed": seed,
        **(extra or {}),
    }
    arrays = graph.state_dict()
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    logger.info("checkpoint saved to %s", path)
    return path


def load_checkpoint(path, architecture=None) -> tuple[LayerGraph, dict]:
    """Rebuild the graph stored in a checkpoint.

    When ``architecture`` is given it must match the stored one, otherwise
    :class:`CheckpointError` is raised.
    """
    path = Path(path)
    try:
        archive = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except (OSError, ValueError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    with archive:
        if "__meta__" not in archive.files:
            raise CheckpointError(f"{path} has no metadata entry")
        meta = json.loads(str(archive["__meta__"]))
        state = {k: archive[k] for k in archive.files if k != "__meta__"}

    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format {meta.get('format_version')} is not supported (expected {CHECKPOINT_VERSION})"
        )
    if architecture is not None:
        stored = [{k: v for k, v in e.items() if k != "name"} for e in meta["architecture"]]
        wanted = [{k: v for k, v in e.items() if k not in ("name", "spec")} for e in resolve_architecture(architecture)]
        if _strip_defaults(stored) != _strip_defaults(wanted):
            raise CheckpointError("checkpoint architecture does not match the configured model")

    overrides = {name: spec for name, spec in meta["specs"].items()}
    try:
        graph = build_graph(meta["architecture"], meta["input_shape"], QuantSpec(), overrides, seed=meta.get("seed", 0))
        graph.load_state_dict(state)
    except ConfigError as e:
        raise CheckpointError(f"checkpoint {path} does not match its architecture: {e}") from None
    graph.eval()
    return graph, meta


_LAYER_DEFAULTS = {"kernel_size": 3, "stride": 1, "padding": 1}


def _strip_defaults(entries: list[dict]) -> list[dict]:
    out = []
    for entry in entries:
        clean = {}
        for key, value in entry.items():
            if key == "quantized" and value is True:
                continue
            if entry.get("type") == "stox_conv" and _LAYER_DEFAULTS.get(key) == value:
                continue
            if entry.get("type") == "maxpool" and key == "kernel_size" and value == 2:
                continue
            clean[key] = value
        out.append(clean)
    return out
