"""Experiment configuration: JSON file + dotted overrides -> validated ExperimentConfig."""

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .datasets import DATASETS, INPUT_SHAPES
from .errors import ConfigError
from .hwmodel import ArchConfig
from .models import resolve_architecture
from .quantization import QuantSpec
from .training import TrainConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    architecture: str | list = "reference_cnn"
    input_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        resolve_architecture(self.architecture)
        if self.input_shape is not None:
            shape = tuple(self.input_shape)
            if not shape or any(not isinstance(s, int) or s < 1 for s in shape):
                raise ConfigError(f"input_shape must be positive integers, got {self.input_shape}")
            object.__setattr__(self, "input_shape", shape)


@dataclass(frozen=True)
class SensitivityConfig:
    magnitudes: tuple[float, ...] = (0.05, 0.1, 0.2)
    trials: int = 20
    eval_size: int = 2000
    budget: float = 1.15

    def __post_init__(self):
        object.__setattr__(self, "magnitudes", tuple(float(m) for m in self.magnitudes))
        if any(m < 0 for m in self.magnitudes):
            raise ConfigError("perturbation magnitudes must be >= 0")
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")
        if self.eval_size < 1:
            raise ConfigError(f"eval_size must be >= 1, got {self.eval_size}")
        if not self.budget >= 1:
            raise ConfigError(f"budget must be >= 1, got {self.budget}")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    quant: QuantSpec = field(default_factory=QuantSpec)
    layer_overrides: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    sensitivity: SensitivityConfig = field(default_factory=SensitivityConfig)
    output_dir: str | None = None
    data_dir: str | None = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        if self.train.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.train.dataset!r}")
        for name, changes in self.layer_overrides.items():
            if not isinstance(changes, dict):
                raise ConfigError(f"layer_overrides['{name}'] must be an object")
            QuantSpec.from_dict({**self.quant.to_dict(), **changes})

    @property
    def input_shape(self) -> tuple:
        return self.model.input_shape or INPUT_SHAPES[self.train.dataset]

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("experiment config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        seed = data.get("seed", 0)
        train = dict(data.get("train", {}))
        if "seed" in train:
            raise ConfigError("set the seed at the top level, not under 'train'")
        try:
            return cls(
                model=ModelConfig(**_section(data, "model", ModelConfig)),
                quant=QuantSpec.from_dict(data.get("quant", {})),
                layer_overrides=dict(data.get("layer_overrides", {})),
                train=TrainConfig.from_dict({**train, "seed": seed}),
                arch=ArchConfig.from_dict(data.get("arch", {})),
                sensitivity=SensitivityConfig(**_section(data, "sensitivity", SensitivityConfig)),
                output_dir=data.get("output_dir"),
                data_dir=data.get("data_dir"),
                seed=seed,
            )
        except TypeError as e:
            raise ConfigError(f"invalid config value: {e}") from None

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        train.pop("seed")
        model = dataclasses.asdict(self.model)
        if model["input_shape"] is not None:
            model["input_shape"] = list(model["input_shape"])
        sens = dataclasses.asdict(self.sensitivity)
        sens["magnitudes"] = list(sens["magnitudes"])
        return {
            "model": model,
            "quant": self.quant.to_dict(),
            "layer_overrides": self.layer_overrides,
            "train": train,
            "arch": dataclasses.asdict(self.arch),
            "sensitivity": sens,
            "output_dir": self.output_dir,
            "data_dir": self.data_dir,
            "seed": self.seed,
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def _section(data: dict, key: str, cls) -> dict:
    section = data.get(key, {})
    if not isinstance(section, dict):
        raise ConfigError(f"'{key}' must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(section) - known)
    if unknown:
        raise ConfigError(f"unknown {key} keys: {', '.join(unknown)}")
    return section


def parse_value(text: str):
    """JSON literal when it parses (numbers, true/false/null, lists), plain string otherwise."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(data: dict, assignment: str) -> dict:
    """Set ``dotted.key=value`` in a nested dict, creating intermediate objects."""
    if "=" not in assignment:
        raise ConfigError(f"override must look like key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"bad override key {key!r}")
    node = data
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"override {key!r} descends into a non-object value")
        node = child
    node[parts[-1]] = parse_value(raw.strip())
    return data


def load_config(path=None, overrides=(), seed: int | None = None) -> ExperimentConfig:
    """Read a JSON config (or start empty), apply overrides and the seed flag, validate."""
    data = {}
    if path is not None:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    for assignment in overrides:
        apply_override(data, assignment)
    if seed is not None:
        data["seed"] = seed
    config = ExperimentConfig.from_dict(data)
    logger.debug("config %s hash %s", path, config.config_hash())
    return config
