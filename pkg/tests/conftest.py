import os

import numpy as np
import pytest

from stoxnet.datasets import load_digits_dataset
from stoxnet.layers import ForwardContext
from stoxnet.models import build_graph
from stoxnet.quantization import QuantSpec


def pytest_collection_modifyitems(config, items):
    if os.environ.get("STOX_RUN_ACCEPTANCE") == "1":
        return
    skip = pytest.mark.skip(reason="set STOX_RUN_ACCEPTANCE=1 to run desk-scale acceptance runs")
    for item in items:
        if "acceptance" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def digits():
    return load_digits_dataset().limit(train=240, test=120)


@pytest.fixture
def digits_graph(digits):
    """Reference CNN on 8x8 digits with calibrated activation scales."""
    spec = QuantSpec(r_arr=128, mode="expectation")
    graph = build_graph("reference_cnn", digits.input_shape, spec, seed=3)
    graph.train()
    graph.forward(digits.train_x[:64], ForwardContext(seed=3, calibrate=True))
    return graph.eval()
