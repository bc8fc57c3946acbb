"""Counter-based random streams.

Every stream is a Philox generator keyed by the root seed, a stream name and a
tuple of integers. The same key always yields the same block of numbers, and the
position of an element inside the block is its counter, so draws do not depend on
the order in which layers, subarrays or samples are evaluated.
"""

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

STREAMS = ("init", "data", "converter", "eval", "sensitivity")


def _stream_id(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def generator(seed: int, stream: str, *key: int) -> np.random.Generator:
    """Return the Philox generator for (seed, stream, *key)."""
    if stream not in STREAMS:
        raise ConfigError(f"unknown random stream {stream!r}; expected one of {STREAMS}")
    seq = np.random.SeedSequence(int(seed), spawn_key=(_stream_id(stream), *(int(k) for k in key)))
    return np.random.Generator(np.random.Philox(seq))


@dataclass(frozen=True)
class ConversionKey:
    """Identifies the converter draws of one layer at one step."""

    seed: int
    layer: int
    step: int
    stream: str = "converter"

    def generator(self, sample: int) -> np.random.Generator:
        return generator(self.seed, self.stream, self.layer, self.step, sample)
