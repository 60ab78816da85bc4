# utils/optim.py
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ContractError
from utils.autodiff import Tensor

DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_EPS = 1e-8


@dataclass
class AdamState:
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)
    t: int = 0


def adam_step(
    params: Sequence[Tensor],
    lr: float,
    betas: Tuple[float, float] = DEFAULT_BETAS,
    eps: float = DEFAULT_EPS,
    t: int = 1,
    state: Optional[AdamState] = None,
) -> AdamState:
    """
    One bias-corrected Adam update, in place on params.values.
    t is the 1-based step index. Returns the (mutated) moment state.
    """
    if t < 1:
        raise ContractError(f"Adam step index starts at 1, got {t}")
    if state is None:
        state = AdamState()
    if not state.m:
        state.m = [np.zeros_like(p.values) for p in params]
        state.v = [np.zeros_like(p.values) for p in params]
    if len(state.m) != len(params):
        raise ContractError("optimizer state does not match the parameter list")

    b1, b2 = betas
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"parameter {i} has no gradient; run backward first")
        g = p.grad
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / (1.0 - b1 ** t)
        v_hat = state.v[i] / (1.0 - b2 ** t)
        p.values = p.values - lr * m_hat / (np.sqrt(v_hat) + eps)
    state.t = t
    return state


class Adam:
    """Keeps the moment state between steps for a fixed list of parameters."""

    def __init__(self, params: Dict[str, Tensor], lr: float, betas=DEFAULT_BETAS, eps: float = DEFAULT_EPS):
        self.names = list(params)
        self.params = [params[n] for n in self.names]
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: Optional[float] = None) -> None:
        adam_step(
            self.params,
            self.lr if lr is None else lr,
            self.betas,
            self.eps,
            self.state.t + 1,
            self.state,
        )

    # checkpoint plumbing
    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {"t": np.array([[float(self.state.t)]])}
        for name, m, v in zip(self.names, self.state.m, self.state.v):
            out[f"m/{name}"] = m
            out[f"v/{name}"] = v
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        self.state.t = int(arrays["t"][0, 0])
        if self.state.t == 0:
            self.state.m, self.state.v = [], []
            return
        self.state.m = [arrays[f"m/{n}"].copy() for n in self.names]
        self.state.v = [arrays[f"v/{n}"].copy() for n in self.names]


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float) -> float:
    if total < 1:
        raise ContractError(f"cosine schedule needs total >= 1, got {total}")
    if step >= total:
        return lr_min
    step = max(step, 0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total))
