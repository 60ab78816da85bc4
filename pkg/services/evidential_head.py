# services/evidential_head.py
"""
Evidential classification head (Beta evidence over anomaly/normal), the Type-II
maximum likelihood MIL loss and clean-instance selection.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Literal, Sequence, Tuple

import numpy as np

from errors import ContractError
from schemas import SelectionConfig
from utils.autodiff import Tensor, matmul, relu, softplus

BASE_RATE = 0.5
PRIOR_WEIGHT = 2.0
PRIOR = BASE_RATE * PRIOR_WEIGHT  # a_k * W = 1 for both classes

ANOMALY = (1.0, 0.0)
NORMAL = (0.0, 1.0)


@dataclass(frozen=True)
class EvidenceOutput:
    alpha_pos: float
    alpha_neg: float

    @property
    def alpha0(self) -> float:
        return self.alpha_pos + self.alpha_neg

    @property
    def p_pos(self) -> float:
        return self.alpha_pos / self.alpha0

    @property
    def p_neg(self) -> float:
        return self.alpha_neg / self.alpha0

    @property
    def u(self) -> float:
        return PRIOR_WEIGHT / self.alpha0


# -----------------------------------
# Parameters
# -----------------------------------
@dataclass
class HeadParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    nonneg: Literal["relu", "softplus"] = "relu"

    def named(self) -> Dict[str, Tensor]:
        return {"head/w1": self.w1, "head/b1": self.b1, "head/w2": self.w2, "head/b2": self.b2}

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.values.copy() for k, v in self.named().items()}

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], nonneg: str = "relu") -> "HeadParams":
        return cls(
            w1=Tensor(arrays["head/w1"], requires_grad=True),
            b1=Tensor(arrays["head/b1"], requires_grad=True),
            w2=Tensor(arrays["head/w2"], requires_grad=True),
            b2=Tensor(arrays["head/b2"], requires_grad=True),
            nonneg=nonneg,
        )


def init_head(
    in_dim: int,
    hidden_dim: int,
    rng: np.random.Generator,
    nonneg: str = "relu",
    evidence_bias: float = 0.1,
) -> HeadParams:
    """
    The output layer starts at zero weights with equal biases, so every instance
    begins with equal evidence on both classes (p_pos = 0.5).
    """
    limit = math.sqrt(6.0 / (in_dim + hidden_dim))
    return HeadParams(
        w1=Tensor(rng.uniform(-limit, limit, size=(in_dim, hidden_dim)), requires_grad=True),
        b1=Tensor(np.zeros((1, hidden_dim)), requires_grad=True),
        w2=Tensor(np.zeros((hidden_dim, 2)), requires_grad=True),
        b2=Tensor(np.full((1, 2), evidence_bias), requires_grad=True),
        nonneg=nonneg,
    )


# -----------------------------------
# Evidence
# -----------------------------------
def evidence_alpha(encoded: Tensor, params: HeadParams) -> Tensor:
    """alpha = nonneg(FC(ReLU(FC(H(x))))) + a*W, an N x 2 tensor (column 0 = anomaly)."""
    hidden = relu(matmul(encoded, params.w1) + params.b1)
    logits = matmul(hidden, params.w2) + params.b2
    evidence = softplus(logits) if params.nonneg == "softplus" else relu(logits)
    return evidence + PRIOR


def evidence_forward(encoded, params: HeadParams) -> List[EvidenceOutput]:
    enc = encoded if isinstance(encoded, Tensor) else Tensor(encoded)
    alpha = evidence_alpha(enc, params).values
    return [EvidenceOutput(float(a), float(b)) for a, b in alpha]


def outputs_from_alpha(alpha: np.ndarray) -> List[EvidenceOutput]:
    return [EvidenceOutput(float(a), float(b)) for a, b in np.asarray(alpha)]


def mil_loss(alpha: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row sum_k y_k (log alpha_0 - log alpha_k); targets are one-hot rows."""
    y = np.asarray(targets, dtype=np.float64).reshape(alpha.shape)
    log_alpha0 = alpha.sum(axis=1).log()
    picked = (alpha.log() * Tensor(y)).sum(axis=1)
    return log_alpha0 * Tensor(y.sum(axis=1, keepdims=True)) - picked


def mil_loss_value(ev: EvidenceOutput, label_onehot: Tuple[float, float]) -> float:
    alpha = Tensor([[ev.alpha_pos, ev.alpha_neg]])
    return mil_loss(alpha, np.asarray([label_onehot])).item()


def anomaly_score(ev: EvidenceOutput) -> float:
    return ev.p_pos


def targets(n: int, label: Tuple[float, float]) -> np.ndarray:
    return np.tile(np.asarray(label, dtype=np.float64), (n, 1))


# -----------------------------------
# Selection
# -----------------------------------
@dataclass(frozen=True)
class SelectionThresholds:
    mode: Literal["rank", "absolute", "topk", "all"] = "rank"
    p_rank: int = 1
    u_rank: int = 1
    p_value: float = 0.5
    u_value: float = 2.0


@dataclass
class SelectionSet:
    """Clean positive instances, as row indices into the bag."""

    omega: Tuple[int, ...] = ()


def _top_ranked(values: Sequence[float], rank: int) -> set:
    # descending by value, lower index first on ties
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    return set(order[:rank])


def select_clean(bag_evidence: Sequence[EvidenceOutput], thresholds: SelectionThresholds) -> SelectionSet:
    n = len(bag_evidence)
    if n == 0:
        return SelectionSet()
    if thresholds.mode == "all":
        return SelectionSet(omega=tuple(range(n)))
    p = [ev.p_pos for ev in bag_evidence]
    a = [ev.alpha_pos for ev in bag_evidence]
    if thresholds.mode == "absolute":
        keep = [i for i in range(n) if p[i] >= thresholds.p_value and a[i] >= thresholds.u_value]
        return SelectionSet(omega=tuple(keep))
    if thresholds.p_rank < 1 or thresholds.u_rank < 1:
        raise ContractError(f"rank thresholds must be >= 1, got {thresholds.p_rank}, {thresholds.u_rank}")
    confident = _top_ranked(p, min(thresholds.p_rank, n))
    if thresholds.mode == "topk":
        return SelectionSet(omega=tuple(sorted(confident)))
    evident = _top_ranked(a, min(thresholds.u_rank, n))
    return SelectionSet(omega=tuple(sorted(confident & evident)))


def default_ranks(n: int, cfg: SelectionConfig) -> Tuple[int, int]:
    p_rank = cfg.p_rank if cfg.p_rank is not None else math.ceil(cfg.p_fraction * n)
    u_rank = cfg.u_rank if cfg.u_rank is not None else math.ceil(cfg.u_fraction * n)
    return max(1, min(p_rank, n)), max(1, min(u_rank, n))


def ramped_rank(target: int, n: int, progress: float) -> int:
    """Linear anneal from n (accept all) at progress 0 to target at progress >= 1."""
    progress = min(max(progress, 0.0), 1.0)
    return max(1, int(round(n - (n - target) * progress)))


def thresholds_for_bag(n: int, cfg: SelectionConfig, progress: float = 1.0) -> SelectionThresholds:
    p_rank, u_rank = default_ranks(n, cfg)
    return SelectionThresholds(
        mode=cfg.mode,
        p_rank=ramped_rank(p_rank, n, progress),
        u_rank=u_rank,
        p_value=cfg.p_value,
        u_value=cfg.u_value,
    )
