"""Dataset ingestion: MNIST IDX files, CIFAR-10 binary batches, scikit-learn digits."""

import gzip
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import requests
from sklearn.datasets import load_digits
from sklearn.model_selection import train_test_split
from tqdm import tqdm

from . import settings
from .errors import ConfigError, DatasetError

logger = logging.getLogger(__name__)

DATASETS = ("mnist", "digits", "cifar10")
INPUT_SHAPES = {"mnist": (1, 28, 28), "digits": (1, 8, 8), "cifar10": (3, 32, 32)}

MNIST_FILES = {
    "train_x": "train-images-idx3-ubyte",
    "train_y": "train-labels-idx1-ubyte",
    "test_x": "t10k-images-idx3-ubyte",
    "test_y": "t10k-labels-idx1-ubyte",
}
_IDX_TYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


@dataclass
class Dataset:
    name: str
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def input_shape(self) -> tuple:
        return tuple(self.train_x.shape[1:])

    def limit(self, train: int | None = None, test: int | None = None) -> "Dataset":
        """Keep the first ``train`` / ``test`` examples."""
        return Dataset(
            self.name,
            self.train_x[:train] if train else self.train_x,
            self.train_y[:train] if train else self.train_y,
            self.test_x[:test] if test else self.test_x,
            self.test_y[:test] if test else self.test_y,
        )


def read_idx(path) -> np.ndarray:
    """Parse an IDX file, gzipped or raw."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as f:
            data = f.read()
    except (OSError, EOFError) as e:
        raise DatasetError(f"cannot read IDX file {path}: {e}") from None
    if len(data) < 4 or data[0] != 0 or data[1] != 0 or data[2] not in _IDX_TYPES:
        raise DatasetError(f"{path} is not an IDX file")
    ndim = data[3]
    dims = [int.from_bytes(data[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)]
    offset = 4 + 4 * ndim
    dtype = np.dtype(_IDX_TYPES[data[2]])
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(data) - offset != expected:
        raise DatasetError(f"{path}: header says {expected} data bytes, file has {len(data) - offset}")
    return np.frombuffer(data, dtype=dtype, offset=offset).reshape(dims)


def _find(root: Path, stem: str) -> Path | None:
    for candidate in (root / stem, root / f"{stem}.gz", root / "mnist" / stem, root / "mnist" / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    return None


def download_mnist(root, mirror: str = settings.MNIST_MIRROR) -> None:
    target = Path(root) / "mnist"
    target.mkdir(parents=True, exist_ok=True)
    for stem in MNIST_FILES.values():
        dest = target / f"{stem}.gz"
        if dest.exists():
            continue
        url = mirror.rstrip("/") + f"/{stem}.gz"
        partial = dest.with_suffix(".part")
        logger.info("downloading %s", url)
        try:
            with requests.get(url, stream=True, timeout=60) as response:
                response.raise_for_status()
                total = int(response.headers.get("content-length", 0))
                with open(partial, "wb") as f, tqdm(total=total, unit="iB", unit_scale=True, desc=stem,
                                                     disable=None) as pbar:
                    for chunk in response.iter_content(chunk_size=8192):
                        f.write(chunk)
                        pbar.update(len(chunk))
        except requests.exceptions.RequestException as e:
            partial.unlink(missing_ok=True)
            raise DatasetError(f"download of {url} failed: {e}") from None
        partial.rename(dest)


def load_mnist(root=None, allow_download: bool | None = None) -> Dataset:
    """MNIST as (N, 1, 28, 28) floats in [0, 1] with int64 labels."""
    root = Path(root or settings.DATA_DIR)
    allow_download = settings.ALLOW_DOWNLOAD if allow_download is None else allow_download
    paths = {key: _find(root, stem) for key, stem in MNIST_FILES.items()}
    if any(p is None for p in paths.values()):
        if not allow_download:
            missing = [MNIST_FILES[k] for k, p in paths.items() if p is None]
            raise DatasetError(f"MNIST files missing under {root}: {', '.join(missing)}")
        download_mnist(root)
        paths = {key: _find(root, stem) for key, stem in MNIST_FILES.items()}

    arrays = {key: read_idx(path) for key, path in paths.items()}
    for split in ("train", "test"):
        if len(arrays[f"{split}_x"]) != len(arrays[f"{split}_y"]):
            raise DatasetError(f"MNIST {split} images and labels differ in length")
    return Dataset(
        "mnist",
        (arrays["train_x"][:, None] / 255.0).astype(np.float32),
        arrays["train_y"].astype(np.int64),
        (arrays["test_x"][:, None] / 255.0).astype(np.float32),
        arrays["test_y"].astype(np.int64),
    )


def load_digits_dataset(test_size: float = 0.2) -> Dataset:
    """scikit-learn's 8x8 digits, a small offline stand-in for MNIST."""
    digits = load_digits()
    images = (digits.images / 16.0).astype(np.float32)[:, None]
    train_x, test_x, train_y, test_y = train_test_split(
        images, digits.target.astype(np.int64), test_size=test_size, random_state=0, stratify=digits.target
    )
    return Dataset("digits", train_x, train_y, test_x, test_y)


def load_cifar10(root=None) -> Dataset:
    """CIFAR-10 binary version: data_batch_1..5.bin and test_batch.bin."""
    root = Path(root or settings.DATA_DIR)
    base = root / "cifar-10-batches-bin" if (root / "cifar-10-batches-bin").exists() else root

    def read(names):
        xs, ys = [], []
        for name in names:
            path = base / name
            if not path.exists():
                raise DatasetError(f"CIFAR-10 batch missing: {path}")
            raw = np.fromfile(path, dtype=np.uint8)
            if raw.size % 3073:
                raise DatasetError(f"{path} is not a CIFAR-10 binary batch")
            records = raw.reshape(-1, 3073)
            ys.append(records[:, 0].astype(np.int64))
            xs.append(records[:, 1:].reshape(-1, 3, 32, 32))
        return (np.concatenate(xs) / 255.0).astype(np.float32), np.concatenate(ys)

    train_x, train_y = read([f"data_batch_{i}.bin" for i in range(1, 6)])
    test_x, test_y = read(["test_batch.bin"])
    return Dataset("cifar10", train_x, train_y, test_x, test_y)


def load_dataset(name: str, root=None, train_limit=None, test_limit=None) -> Dataset:
    if name not in DATASETS:
        raise ConfigError(f"dataset must be one of {DATASETS}, got {name!r}")
    if name == "digits":
        data = load_digits_dataset()
    elif name == "cifar10":
        data = load_cifar10(root)
    else:
        try:
            data = load_mnist(root)
        except DatasetError as e:
            if not settings.DATASET_FALLBACK:
                raise
            logger.warning("%s; falling back to the offline digits set", e)
            data = load_digits_dataset()
    data = data.limit(train_limit, test_limit)
    logger.info("%s: %d train / %d test images of shape %s", data.name, len(data.train_x), len(data.test_x),
                data.input_shape)
    return data