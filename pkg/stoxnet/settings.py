import logging
import os

from dotenv import load_dotenv

load_dotenv()

# ─── CONFIG ───────────────────────────────────────
DATA_DIR = os.environ.get("STOX_DATA_DIR", "data")
OUTPUT_DIR = os.environ.get("STOX_OUTPUT_DIR", "runs")
LOG_LEVEL = os.environ.get("STOX_LOG_LEVEL", "INFO")
ALLOW_DOWNLOAD = os.environ.get("STOX_ALLOW_DOWNLOAD", "1") == "1"
DATASET_FALLBACK = os.environ.get("STOX_DATASET_FALLBACK", "0") == "1"
MNIST_MIRROR = os.environ.get(
    "STOX_MNIST_MIRROR", "https://storage.googleapis.com/cvdf-datasets/mnist/"
)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def configure_logging(level: str | None = None) -> None:
    logging.basicConfig(level=(level or LOG_LEVEL).upper(), format=LOG_FORMAT)
