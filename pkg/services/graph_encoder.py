# services/graph_encoder.py
"""
Per-bag instance encoder: two GCN branches (feature similarity, temporal
consistency), each two layers deep, concatenated. Also the triplet loss and
the triplet sampler used during warmup.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from errors import DimensionError
from schemas import GraphConfig
from utils.autodiff import Tensor, concat, matmul, relu

N_LAYERS = 2


# -----------------------------------
# Adjacency construction
# -----------------------------------
def build_similarity_adjacency(features: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """A[i][j] = max(0, cos(x_i, x_j) - threshold) / (1 - threshold), zero diagonal."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"features must be N x D with N >= 1, got {x.shape}")
    norms = np.linalg.norm(x, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = x / safe[:, None]
    cos = unit @ unit.T
    # zero-norm rows: cosine treated as 0 for every pair they touch
    cos[norms == 0, :] = 0.0
    cos[:, norms == 0] = 0.0
    adj = np.maximum(0.0, cos - threshold) / (1.0 - threshold)
    adj = np.clip(adj, 0.0, 1.0)
    adj = 0.5 * (adj + adj.T)
    np.fill_diagonal(adj, 0.0)
    return adj


def build_temporal_adjacency(n: int, decay: float = math.log(2.0)) -> np.ndarray:
    """A[i][j] = exp(-decay * |i - j|) off the diagonal."""
    idx = np.arange(n)
    dist = np.abs(idx[:, None] - idx[None, :]).astype(np.float64)
    adj = np.exp(-decay * dist)
    np.fill_diagonal(adj, 0.0)
    return adj


def normalize_adjacency(adj: np.ndarray) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2; the self loop keeps every degree >= 1."""
    a_hat = adj + np.eye(adj.shape[0])
    inv_sqrt = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return a_hat * inv_sqrt[:, None] * inv_sqrt[None, :]


@dataclass
class BagGraph:
    features: np.ndarray
    adj_sim: np.ndarray
    adj_temp: np.ndarray
    _ops: Optional[Tuple[np.ndarray, np.ndarray]] = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def operators(self) -> Tuple[np.ndarray, np.ndarray]:
        if self._ops is None:
            self._ops = (normalize_adjacency(self.adj_sim), normalize_adjacency(self.adj_temp))
        return self._ops


def build_bag_graph(features: np.ndarray, cfg: Optional[GraphConfig] = None) -> BagGraph:
    cfg = cfg or GraphConfig()
    x = np.asarray(features, dtype=np.float64)
    return BagGraph(
        features=x,
        adj_sim=build_similarity_adjacency(x, cfg.similarity_threshold),
        adj_temp=build_temporal_adjacency(x.shape[0], cfg.temporal_decay),
    )


# -----------------------------------
# Parameters
# -----------------------------------
def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class EncoderParams:
    w_sim: List[Tensor]
    w_temp: List[Tensor]

    @property
    def in_dim(self) -> int:
        return self.w_sim[0].rows

    @property
    def out_dim(self) -> int:
        return self.w_sim[-1].cols + self.w_temp[-1].cols

    def named(self) -> Dict[str, Tensor]:
        out = {}
        for i, w in enumerate(self.w_sim):
            out[f"encoder/w_sim/{i}"] = w
        for i, w in enumerate(self.w_temp):
            out[f"encoder/w_temp/{i}"] = w
        return out

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.values.copy() for k, v in self.named().items()}

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], n_layers: int = N_LAYERS) -> "EncoderParams":
        return cls(
            w_sim=[Tensor(arrays[f"encoder/w_sim/{i}"], requires_grad=True) for i in range(n_layers)],
            w_temp=[Tensor(arrays[f"encoder/w_temp/{i}"], requires_grad=True) for i in range(n_layers)],
        )

    def freeze(self) -> None:
        for w in self.w_sim + self.w_temp:
            w.requires_grad = False
            w.zero_grad()


def init_encoder(in_dim: int, hidden_dim: int, rng: np.random.Generator) -> EncoderParams:
    dims = [in_dim] + [hidden_dim] * N_LAYERS

    def branch():
        return [Tensor(_glorot(rng, dims[i], dims[i + 1]), requires_grad=True) for i in range(N_LAYERS)]

    return EncoderParams(w_sim=branch(), w_temp=branch())


# -----------------------------------
# Forward
# -----------------------------------
def _branch(op: Optional[np.ndarray], x: Tensor, weights: Sequence[Tensor]) -> Tensor:
    h = x
    for w in weights:
        support = matmul(h, w)
        h = relu(support if op is None else matmul(Tensor(op), support))
    return h


def gcn_forward(graph: BagGraph, params: EncoderParams, use_graphs: bool = True) -> Tensor:
    """
    H(x) = [sigma(S_sim ... X W) || sigma(S_temp ... X W)], layer-wise with
    S = D^-1/2 (A + I) D^-1/2 and sigma = ReLU. With use_graphs=False both
    operators are the identity (plain fully connected branches).
    """
    if graph.features.shape[1] != params.in_dim:
        raise DimensionError(
            f"bag has {graph.features.shape[1]} feature dims, encoder expects {params.in_dim}"
        )
    x = Tensor(graph.features)
    if use_graphs:
        s_sim, s_temp = graph.operators()
    else:
        s_sim = s_temp = None
    return concat([_branch(s_sim, x, params.w_sim), _branch(s_temp, x, params.w_temp)], axis=1)


def encode_bag(graph: BagGraph, params: EncoderParams, use_graphs: bool = True) -> np.ndarray:
    return gcn_forward(graph, _detached(params), use_graphs).numpy()


def _detached(params: EncoderParams) -> EncoderParams:
    return EncoderParams(
        w_sim=[w.detach() for w in params.w_sim],
        w_temp=[w.detach() for w in params.w_temp],
    )


# -----------------------------------
# Triplets
# -----------------------------------
class Triplet(NamedTuple):
    anchor: int
    positive: int
    negative: int


def triplet_loss(anchor: Tensor, positive: Tensor, negative: Tensor, margin: float) -> Tensor:
    """Row-wise [d_ap - d_an + m]_+ with Euclidean d; returns a k x 1 tensor."""
    if not (anchor.shape == positive.shape == negative.shape):
        raise DimensionError(f"triplet shapes differ: {anchor.shape}, {positive.shape}, {negative.shape}")
    ap = anchor - positive
    an = anchor - negative
    d_ap = (ap * ap).sum(axis=1).sqrt()
    d_an = (an * an).sum(axis=1).sqrt()
    return relu(d_ap - d_an + margin)


def triplet_loss_value(anchor, positive, negative, margin: float) -> float:
    return triplet_loss(Tensor(anchor), Tensor(positive), Tensor(negative), margin).item()


def sample_triplets(
    positive_pool: Sequence[int],
    normal_pool: Sequence[int],
    k: int,
    rng: np.random.Generator,
) -> List[Triplet]:
    """
    k triplets over row indices. Anchor and positive share a class, the negative
    comes from the other one. A class can anchor only if it has >= 2 members and
    the other class is non-empty; with no such class the result is empty.
    """
    pools = [list(positive_pool), list(normal_pool)]
    eligible = [c for c in (0, 1) if len(pools[c]) >= 2 and len(pools[1 - c]) >= 1]
    if k <= 0 or not eligible:
        return []
    out: List[Triplet] = []
    for _ in range(k):
        c = eligible[int(rng.integers(len(eligible)))] if len(eligible) > 1 else eligible[0]
        a, p = rng.choice(len(pools[c]), size=2, replace=False)
        n = int(rng.integers(len(pools[1 - c])))
        out.append(Triplet(pools[c][int(a)], pools[c][int(p)], pools[1 - c][n]))
    return out
