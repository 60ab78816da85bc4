# services/flow_service.py
"""
Inverse autoregressive flow over the encoder output space.

Generative direction g (z -> x), one pass per layer:
    x_i = z_i * s_i(z_<i) + t_i(z_<i),   s = exp(clamp(a, -c, c))
Density direction f = g^-1 (x -> z) is solved coordinate by coordinate, so

    log p(x) = log N(f(x); 0, I) - sum_layers sum_i log s_i

Layers are separated by a fixed reversal of the coordinates. The last step of g
is an elementwise affine x = y * exp(l) + loc whose loc and l start at the
mean and log-std of the training data (std floored at min_scale).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from errors import ContractError, DimensionError
from schemas import FlowConfig
from utils.autodiff import Tensor, matmul, tanh

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


# -----------------------------------
# Autoregressive masks
# -----------------------------------
def autoregressive_masks(dim: int, hidden: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Input degrees 1..dim, hidden degrees cycle through 1..dim-1. Output i may only
    see inputs with degree < i, so s_i and t_i depend on z_<i alone.
    For dim == 1 nothing is visible and both masks are zero.
    """
    in_deg = np.arange(1, dim + 1)
    if dim == 1:
        return np.zeros((dim, hidden)), np.zeros((hidden, dim))
    hid_deg = np.arange(hidden) % (dim - 1) + 1
    m_in = (hid_deg[None, :] >= in_deg[:, None]).astype(np.float64)
    m_out = (in_deg[None, :] > hid_deg[:, None]).astype(np.float64)
    return m_in, m_out


@dataclass
class IAFLayer:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    mask_in: np.ndarray
    mask_out: np.ndarray
    clamp: float = 5.0

    @property
    def dim(self) -> int:
        return self.mask_in.shape[0]

    def params(self) -> List[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def shift_and_log_scale(self, z: Tensor) -> Tuple[Tensor, Tensor]:
        h = tanh(matmul(z, self.w1 * Tensor(self.mask_in)) + self.b1)
        out = matmul(h, self.w2 * Tensor(np.hstack([self.mask_out, self.mask_out]))) + self.b2
        log_s = out.slice_cols(0, self.dim).clamp(-self.clamp, self.clamp)
        t = out.slice_cols(self.dim, 2 * self.dim)
        return t, log_s

    def forward(self, z: Tensor) -> Tuple[Tensor, Tensor]:
        """z -> x in a single pass; returns (x, per-row log|det dx/dz|)."""
        t, log_s = self.shift_and_log_scale(z)
        return z * log_s.exp() + t, log_s.sum(axis=1)

    def inverse(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        """x -> z, one coordinate at a time; returns (z, per-row log|det dx/dz|)."""
        rows, dim = x.shape
        z = Tensor(np.zeros((rows, dim)))
        log_det = None
        for i in range(dim):
            t, log_s = self.shift_and_log_scale(z)
            ti, si = t.slice_cols(i, i + 1), log_s.slice_cols(i, i + 1)
            zi = (x.slice_cols(i, i + 1) - ti) * (-si).exp()
            z = z + matmul(zi, Tensor(_unit_row(i, dim)))
            log_det = si if log_det is None else log_det + si
        return z, log_det


def _unit_row(i: int, dim: int) -> np.ndarray:
    row = np.zeros((1, dim))
    row[0, i] = 1.0
    return row


def _reverse(x: Tensor) -> Tensor:
    dim = x.cols
    return matmul(x, Tensor(np.eye(dim)[::-1].copy()))


# -----------------------------------
# Flow model
# -----------------------------------
@dataclass
class FlowModel:
    layers: List[IAFLayer]
    loc: Optional[Tensor] = None
    log_scale: Optional[Tensor] = None
    min_scale: float = 1e-2

    def __post_init__(self):
        if self.loc is None:
            self.loc = Tensor(np.zeros((1, self.dim)), requires_grad=True)
        if self.log_scale is None:
            self.log_scale = Tensor(np.zeros((1, self.dim)), requires_grad=True)

    @property
    def dim(self) -> int:
        return self.layers[0].dim

    def named(self) -> Dict[str, Tensor]:
        out = {"flow/norm/loc": self.loc, "flow/norm/log_scale": self.log_scale}
        for li, layer in enumerate(self.layers):
            for name, p in zip(("w1", "b1", "w2", "b2"), layer.params()):
                out[f"flow/{li}/{name}"] = p
        return out

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.values.copy() for k, v in self.named().items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for key, p in self.named().items():
            p.values = np.array(arrays[key], dtype=np.float64)

    def freeze(self) -> None:
        for p in self.named().values():
            p.requires_grad = False
            p.zero_grad()

    def detached(self) -> "FlowModel":
        """Same parameter values, no gradient bookkeeping."""
        return FlowModel([
            IAFLayer(l.w1.detach(), l.b1.detach(), l.w2.detach(), l.b2.detach(), l.mask_in, l.mask_out, l.clamp)
            for l in self.layers
        ], self.loc.detach(), self.log_scale.detach(), self.min_scale)

    # ---- directions ----
    def _scale_log(self) -> Tensor:
        return self.log_scale.clamp(math.log(self.min_scale), -math.log(self.min_scale))

    def generate(self, z) -> Tuple[Tensor, Tensor]:
        """g: z -> x with the accumulated log|det dx/dz| per row."""
        x = _lift(z, self.dim)
        log_det = None
        for li, layer in enumerate(self.layers):
            if li > 0:
                x = _reverse(x)
            x, ld = layer.forward(x)
            log_det = ld if log_det is None else log_det + ld
        log_s = self._scale_log()
        return x * log_s.exp() + self.loc, log_det + log_s.sum()

    def normalize(self, x) -> Tuple[Tensor, Tensor]:
        """f = g^-1: x -> z with the accumulated log|det dx/dz| per row (of g)."""
        log_s = self._scale_log()
        z = (_lift(x, self.dim) - self.loc) * (-log_s).exp()
        log_det = log_s.sum()
        for li in reversed(range(len(self.layers))):
            z, ld = self.layers[li].inverse(z)
            if li > 0:
                z = _reverse(z)
            log_det = ld + log_det
        return z, log_det

    def log_density(self, x) -> Tensor:
        """Exact log p(x) per row, differentiable w.r.t. the flow parameters."""
        z, log_det = self.normalize(x)
        return standard_normal_log_density(z) - log_det


def _lift(x, dim: int) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.cols != dim:
        raise DimensionError(f"flow expects {dim} dims, got {t.shape}")
    return t


def standard_normal_log_density(z: Tensor) -> Tensor:
    return (z * z).sum(axis=1) * -0.5 - 0.5 * z.cols * LOG_2PI


def init_flow(
    dim: int,
    rng: np.random.Generator,
    cfg: Optional[FlowConfig] = None,
    identity: bool = True,
    output_scale: float = 0.0,
    data: Optional[np.ndarray] = None,
) -> FlowModel:
    """
    With identity=True the output layer is zero, so s = 1 and t = 0 everywhere
    and the flow starts as the identity map. output_scale > 0 perturbs it,
    including the elementwise affine. Given data (rows of encoded normals), the
    affine starts at their per-dimension mean and std instead.
    """
    cfg = cfg or FlowConfig()
    hidden = cfg.hidden_factor * dim
    m_in, m_out = autoregressive_masks(dim, hidden)
    layers = []
    for _ in range(cfg.n_layers):
        limit = math.sqrt(6.0 / (dim + hidden))
        w2 = np.zeros((hidden, 2 * dim)) if identity else rng.normal(0.0, output_scale, size=(hidden, 2 * dim))
        b2 = np.zeros((1, 2 * dim)) if identity else rng.normal(0.0, output_scale, size=(1, 2 * dim))
        layers.append(
            IAFLayer(
                w1=Tensor(rng.uniform(-limit, limit, size=(dim, hidden)), requires_grad=True),
                b1=Tensor(np.zeros((1, hidden)), requires_grad=True),
                w2=Tensor(w2, requires_grad=True),
                b2=Tensor(b2, requires_grad=True),
                mask_in=m_in,
                mask_out=m_out,
                clamp=cfg.scale_clamp,
            )
        )
    loc = np.zeros((1, dim))
    log_scale = np.zeros((1, dim))
    if not identity:
        loc = rng.normal(0.0, output_scale, size=(1, dim))
        log_scale = rng.normal(0.0, output_scale, size=(1, dim))
    if data is not None:
        data = np.atleast_2d(np.asarray(data, dtype=np.float64))
        if data.shape[1] != dim:
            raise DimensionError(f"flow init data has {data.shape[1]} dims, expected {dim}")
        loc = data.mean(axis=0, keepdims=True)
        log_scale = np.log(np.maximum(data.std(axis=0, keepdims=True), cfg.min_scale))
    return FlowModel(
        layers,
        Tensor(loc, requires_grad=True),
        Tensor(log_scale, requires_grad=True),
        cfg.min_scale,
    )


# -----------------------------------
# Operations
# -----------------------------------
def flow_log_density(flow: FlowModel, x) -> np.ndarray:
    """log p(x) for one vector (returns a float array of one) or a batch of rows."""
    return flow.log_density(_frozen_input(x)).values[:, 0]


def _frozen_input(x) -> Tensor:
    return Tensor(np.atleast_2d(np.asarray(x.values if isinstance(x, Tensor) else x, dtype=np.float64)))


def flow_sample(flow: FlowModel, m: int, rng: np.random.Generator) -> np.ndarray:
    """m draws z ~ N(0, I) pushed through g."""
    x, _ = sample_with_log_density(flow, m, rng)
    return x


def sample_with_log_density(flow: FlowModel, m: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Samples and their exact log-density from the same single generative pass."""
    if m < 1:
        raise ContractError(f"sample count must be >= 1, got {m}")
    z = Tensor(rng.standard_normal(size=(m, flow.dim)))
    x, log_det = flow.generate(z)
    log_p = standard_normal_log_density(z) - log_det
    return x.values, log_p.values[:, 0]


def nf_loss(flow: FlowModel, batch) -> Tensor:
    """Mean negative log-likelihood of a batch of encoded normal instances."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    return flow.log_density(x).mean() * -1.0


@dataclass
class PseudoAnomalySet:
    samples: np.ndarray
    densities: np.ndarray
    epsilon: float

    @property
    def log_densities(self) -> np.ndarray:
        return np.log(np.maximum(self.densities, np.finfo(np.float64).tiny))

    def __len__(self) -> int:
        return int(self.samples.shape[0])


def retained_count(pool_size: int, keep_fraction: float) -> int:
    return max(1, min(pool_size, int(round(pool_size * keep_fraction))))


def generate_pseudo_anomalies(
    flow: FlowModel,
    pool_size: int,
    keep_fraction: float,
    rng: np.random.Generator,
) -> PseudoAnomalySet:
    """
    Draw a pool from the flow, keep the keep_fraction lowest-density samples.
    epsilon is the density of the highest retained sample (rank based cutoff).
    """
    if pool_size < 1:
        raise ContractError(f"pool_size must be >= 1, got {pool_size}")
    if not (0.0 < keep_fraction <= 1.0):
        raise ContractError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    x, log_p = sample_with_log_density(flow, pool_size, rng)
    keep = retained_count(pool_size, keep_fraction)
    order = np.argsort(log_p, kind="stable")[:keep]
    kept_log_p = log_p[order]
    logger.debug("Pseudo anomalies: kept %d of %d, log epsilon %.4f", keep, pool_size, kept_log_p.max())
    return PseudoAnomalySet(
        samples=x[order],
        densities=np.exp(kept_log_p),
        epsilon=float(np.exp(kept_log_p.max())),
    )


def gaussian_noise_anomalies(count: int, dim: int, std: float, rng: np.random.Generator) -> np.ndarray:
    """Isotropic Gaussian stand-in for flow pseudo anomalies (ablation)."""
    return rng.normal(0.0, std, size=(count, dim))
