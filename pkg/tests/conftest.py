from pathlib import Path
import sys

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT))

from kaa_network import NetworkConfig  # noqa: E402
from mocap_sim import default_rig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return NetworkConfig.preset('tiny')


@pytest.fixture
def grad_config():
    return NetworkConfig.preset('grad-check')


@pytest.fixture
def oracle_denoiser():
    """Build a predict_x0 closure that always returns the given ground truth."""
    def make(x0):
        x0 = np.array(x0, dtype=np.float64)
        return lambda x_k, k, cond: x0.copy()

    return make


@pytest.fixture
def rig():
    return default_rig()
