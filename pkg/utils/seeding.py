from typing import Any, Dict

import numpy as np

# One stream per concern; draws from one never shift another.
STREAMS = {"synth": 0, "split": 1, "train": 2, "ingest": 3, "eval": 4, "validation": 5}


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), STREAMS[name]])


def rng_state(rng: np.random.Generator) -> Dict[str, Any]:
    return rng.bit_generator.state


def restore_rng(state: Dict[str, Any]) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng
