import numpy as np
import pytest
import torch

torch.set_num_threads(1)


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "cifar_smoke: long CIFAR training check, excluded by default"
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("-m", default=""):
        return
    skip = pytest.mark.skip(reason="run explicitly with -m cifar_smoke")
    for item in items:
        if "cifar_smoke" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
