"""
Shared fixtures and the --runslow switch.
"""

import logging
from pathlib import Path

import numpy as np
import pytest

from triplet.config import build_config


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow end-to-end experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def reset_triplet_logger():
    """The CLI installs its own handler and stops propagation; undo that per test."""
    yield
    logger = logging.getLogger("triplet")
    logger.handlers[:] = []
    logger.setLevel(logging.NOTSET)
    logger.propagate = True


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_document():
    """A run small enough to train in seconds: 16x16x8 patches, 16 angles."""
    return {
        "data": {
            "volume_size": [24, 24, 8],
            "patch_size": [16, 16, 8],
            "patches_per_phantom": 2,
            "n_phantoms": 4,
            "n_structures": 2,
            "activity_threshold": 0.0,
            "count_scale": 1e5,
            "folds": 2,
            "workers": 1,
        },
        "geometry": {"n_angles": 16},
        "networks": {
            "dennet": {"channels": 6, "pattern": "CTC", "heads": 2, "window": [4, 4, 4]},
            "recnet": {"base_channels": 2, "levels": 1, "max_block_width": 8},
            "advnet": {"widths": [4, 4, 4], "strides": [2, 2, 2, 1]},
        },
        "stages": {
            "batch_size": 2,
            "stage1": {"epochs": 1, "lr": 1e-3},
            "stage2": {"epochs": 1, "lr": 1e-3},
            "stage3": {"epochs": 1, "lr": 1e-4},
        },
    }


@pytest.fixture
def tiny_config(tiny_document, tmp_path):
    document = dict(tiny_document, workspace=str(tmp_path / "workspace"))
    return build_config(document, "desk")


@pytest.fixture
def tiny_dataset(tiny_config, tmp_path):
    from triplet.datagen import build_dataset, load_dataset

    root = Path(tmp_path) / "dataset"
    build_dataset(tiny_config, root)
    return load_dataset(root)
