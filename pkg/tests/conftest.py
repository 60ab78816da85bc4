import os
from typing import Callable

import hypothesis
import numpy as np
import pytest

from services.data_service import generate_synthetic
from settings import build_config
from utils.seeding import stream

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))


def numeric_grad(loss_fn: Callable[[], float], array: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of loss_fn() w.r.t. every entry of `array` (perturbed in place)."""
    grad = np.zeros_like(array)
    for idx in np.ndindex(array.shape):
        orig = array[idx]
        array[idx] = orig + eps
        up = loss_fn()
        array[idx] = orig - eps
        down = loss_fn()
        array[idx] = orig
        grad[idx] = (up - down) / (2 * eps)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(1e-8, np.linalg.norm(a) + np.linalg.norm(b)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Small enough for a full three-stage run in a few seconds."""
    return build_config(
        {
            "synth": {"n_bags": 40, "bag_size": 12, "feature_dim": 4, "n_classes": 2},
            "data": {"bag_size": 12},
            "split": {"n_seen": 1, "validation_fraction": 0.0},
            "encoder": {"hidden_dim": 4},
            "head": {"hidden_dim": 8},
            "flow": {"n_layers": 2, "hidden_factor": 2},
            "pseudo": {"pool_size": 200, "keep_fraction": 0.1},
            "training": {
                "epochs_warmup": 3,
                "epochs_flow": 3,
                "epochs_edl": 2,
                "triplets_per_step": 8,
                "bags_per_class": 2,
                "flow_bags_per_step": 2,
            },
        },
        seed=7,
    )


@pytest.fixture(scope="session", autouse=True)
def quiet_progress():
    with pytest.MonkeyPatch.context() as mp:
        mp.setenv("VAD_PROGRESS", "0")
        yield


@pytest.fixture
def tiny_bags(tiny_config):
    return generate_synthetic(tiny_config.synth, stream(tiny_config.seed, "synth"))
