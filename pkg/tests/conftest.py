"""Shared fixtures for the clockwatch test suite"""

import json
from pathlib import Path

import numpy as np
import pytest
import torch

from config import GenerateConfig
from datagen import NormalizationStats, generate_dataset, normalized_columns
from stgat import STGAT, Checkpoint, HyperParams, LossReduction


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="run long acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


SMALL_GENERATE = {
    "seed": 3,
    "n_devices": 8,
    "length": 200,
    "window": 20,
    "stride": 10,
    "perturbed_fraction": 0.5,
    "split_fractions": [0.5, 0.1, 0.4],
    "k": 2,
}

TINY_HYPER = {
    "d_model": 4,
    "n_layers": 1,
    "epochs": 2,
    "learning_rate": 0.01,
    "loss_reduction": "mean",
}


@pytest.fixture(scope="session")
def small_config() -> GenerateConfig:
    return GenerateConfig(**SMALL_GENERATE)


@pytest.fixture(scope="session")
def small_dataset(small_config):
    return generate_dataset(small_config)


@pytest.fixture
def tiny_hyper() -> HyperParams:
    return HyperParams(**TINY_HYPER)


@pytest.fixture
def config_file(tmp_path):
    """Write a dict as JSON and return its path"""

    def write(payload, name="config.json") -> Path:
        path = tmp_path / name
        path.write_text(json.dumps(payload), encoding="utf-8")
        return path

    return write


def overflow_checkpoint(window: int = 20) -> Checkpoint:
    """Hand-set model whose posterior keys on the overflow input.

    With zero attention weights every layer is the identity, so the logit is
    x_0 / 1000 + 33 * o - 3 and the overflow head is sigmoid(10 * proximity).
    """
    hyper = HyperParams(d_model=4, n_layers=1, use_graph_attention=False, loss_reduction=LossReduction.MEAN)
    model = STGAT(5, hyper)
    with torch.no_grad():
        for param in model.parameters():
            param.zero_()
        model.w_emb[0, 3] = 33.0
        model.w_in[0, 0] = 1.0
        model.cls_w[0] = 1.0
        model.cls_b.fill_(-3.0)
        model.w_o[3] = 10.0
    stats = NormalizationStats(columns=normalized_columns(5), mean=[0.0] * 12, std=[1000.0] * 12)
    return Checkpoint(model=model, normalization=stats, window=window, dt=1.0)


@pytest.fixture
def handcrafted_checkpoint() -> Checkpoint:
    return overflow_checkpoint()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
