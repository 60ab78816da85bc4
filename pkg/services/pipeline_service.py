# services/pipeline_service.py
"""
Three-stage training:

  1. warmup      encoder + head on MIL (selected positives, all negatives) + beta * triplet
  2. flow        encoder frozen, flow fitted to encoded normal instances
  3. fine-tune   encoder and flow frozen, head refit on selected positives,
                 flow pseudo anomalies and negatives

plus scoring, early stopping and stage checkpoints.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from errors import ConfigError, ContractError, UndefinedMetricError, VadError
from schemas import ExperimentConfig, TrainRecord
from services.data_service import Bag, OpenSetSplit, negatives, positives, split_from_config, split_validation
from services.eval_service import (
    OpenSetReport,
    ScoredInstances,
    auc_roc,
    open_set_report,
    rank_normalize,
    scored_from_bags,
)
from services.evidential_head import (
    ANOMALY,
    NORMAL,
    HeadParams,
    evidence_alpha,
    init_head,
    mil_loss,
    outputs_from_alpha,
    select_clean,
    targets,
    thresholds_for_bag,
)
from services.flow_service import (
    FlowModel,
    gaussian_noise_anomalies,
    generate_pseudo_anomalies,
    init_flow,
    nf_loss,
    retained_count,
)
from services.graph_encoder import (
    BagGraph,
    EncoderParams,
    build_bag_graph,
    encode_bag,
    gcn_forward,
    init_encoder,
    sample_triplets,
    triplet_loss,
)
from settings import hash_of, progress_enabled
from storage import load_checkpoint, save_checkpoint
from utils.autodiff import Tensor, backward, concat
from utils.hashing import params_hash
from utils.optim import Adam, cosine_lr
from utils.seeding import restore_rng, rng_state, stream

logger = logging.getLogger(__name__)

RecordSink = Callable[[TrainRecord], None]
STAGE_CHOICES = ("1", "12", "123")


# -----------------------------------
# Model bundle
# -----------------------------------
@dataclass
class AnomalyDetector:
    encoder: EncoderParams
    head: HeadParams
    flow: Optional[FlowModel] = None
    use_graphs: bool = True

    def arrays(self) -> Dict[str, np.ndarray]:
        out = {**self.encoder.arrays(), **self.head.arrays()}
        if self.flow is not None:
            out.update(self.flow.arrays())
        return out

    def hashes(self) -> Dict[str, Optional[str]]:
        return {
            "encoder": params_hash(self.encoder.named()),
            "head": params_hash(self.head.named()),
            "flow": None if self.flow is None else params_hash(self.flow.named()),
        }


def _load_into(named: Dict[str, Tensor], arrays: Dict[str, np.ndarray]) -> None:
    for key, tensor in named.items():
        tensor.values = np.array(arrays[key], dtype=np.float64)


def build_graphs(bags: Sequence[Bag], config: ExperimentConfig) -> Dict[str, BagGraph]:
    return {b.id: build_bag_graph(b.instances, config.graph) for b in bags}


# -----------------------------------
# Scoring
# -----------------------------------
def score_video(
    instances: np.ndarray,
    encoder: EncoderParams,
    head: HeadParams,
    config: Optional[ExperimentConfig] = None,
    graph: Optional[BagGraph] = None,
) -> np.ndarray:
    """Per-instance alpha_pos / alpha_0. The flow is never consulted."""
    return score_with_uncertainty(instances, encoder, head, config, graph)[0]


def score_with_uncertainty(
    instances: np.ndarray,
    encoder: EncoderParams,
    head: HeadParams,
    config: Optional[ExperimentConfig] = None,
    graph: Optional[BagGraph] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """(anomaly score, vacuity u = 2 / alpha_0) per instance."""
    config = config or ExperimentConfig()
    graph = graph or build_bag_graph(instances, config.graph)
    encoded = encode_bag(graph, encoder, config.encoder.use_graphs)
    alpha = evidence_alpha(Tensor(encoded), _detached_head(head)).values
    alpha0 = alpha.sum(axis=1)
    return alpha[:, 0] / alpha0, 2.0 / alpha0


def score_with_flow(
    instances: np.ndarray,
    encoder: EncoderParams,
    flow: FlowModel,
    config: Optional[ExperimentConfig] = None,
    graph: Optional[BagGraph] = None,
) -> np.ndarray:
    """Negative flow log-density of each encoded instance (higher = more anomalous)."""
    config = config or ExperimentConfig()
    graph = graph or build_bag_graph(instances, config.graph)
    encoded = encode_bag(graph, encoder, config.encoder.use_graphs)
    return -flow.log_density(Tensor(encoded)).values[:, 0]


def _detached_head(head: HeadParams) -> HeadParams:
    return HeadParams(head.w1.detach(), head.b1.detach(), head.w2.detach(), head.b2.detach(), head.nonneg)


def score_bags(
    bags: Sequence[Bag],
    detector: AnomalyDetector,
    config: ExperimentConfig,
    graphs: Optional[Dict[str, BagGraph]] = None,
) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    graphs = graphs or {}
    return {
        b.id: score_with_uncertainty(b.instances, detector.encoder, detector.head, config, graphs.get(b.id))
        for b in bags
    }


# -----------------------------------
# Early stopping + validation
# -----------------------------------
def early_stop(history: Sequence[float], patience: int) -> bool:
    """True iff the best value (first occurrence) is at least `patience` evaluations old."""
    if patience < 1:
        raise ContractError(f"patience must be >= 1, got {patience}")
    if not history:
        return False
    best = int(np.argmax(np.asarray(history, dtype=np.float64)))
    return len(history) - 1 - best >= patience


def validation_metric(
    bags: Sequence[Bag],
    scores: Dict[str, np.ndarray],
    extra_positive: Optional[np.ndarray] = None,
) -> Optional[float]:
    """
    Instance-level AUC-ROC when every bag has ground truth, otherwise bag-level
    AUC-ROC with the max instance score per bag. extra_positive scores (held-out
    pseudo anomalies) join as anomalies. None when undefined.
    """
    if not bags:
        return None
    if all(b.instance_labels is not None for b in bags):
        base = scored_from_bags(bags, scores, ())
        s, y = base.scores, base.labels
    else:
        s = np.array([float(np.max(scores[b.id])) for b in bags])
        y = np.array([b.bag_label for b in bags])
    if extra_positive is not None and len(extra_positive):
        s = np.concatenate([s, np.asarray(extra_positive, dtype=np.float64).ravel()])
        y = np.concatenate([y, np.ones(len(extra_positive), dtype=np.int64)])
    try:
        return auc_roc(ScoredInstances(s, y))
    except UndefinedMetricError:
        return None


class _BestKeeper:
    """Tracks the best validation value and the parameters that produced it; ties keep the later ones."""

    def __init__(self, *named: Dict[str, Tensor]):
        self.named = named
        self.history: List[float] = []
        self.best: Optional[float] = None
        self.snapshot: Optional[List[Dict[str, np.ndarray]]] = None

    def update(self, value: Optional[float]) -> None:
        if value is None:
            return
        self.history.append(value)
        if self.best is None or value >= self.best:
            self.best = value
            self.snapshot = [{k: t.values.copy() for k, t in n.items()} for n in self.named]

    def restore(self) -> None:
        if self.snapshot is None:
            return
        for named, arrays in zip(self.named, self.snapshot):
            _load_into(named, arrays)


def _draw(bags: Sequence[Bag], k: int, rng: np.random.Generator) -> List[Bag]:
    idx = rng.choice(len(bags), size=k, replace=len(bags) < k)
    return [bags[int(i)] for i in idx]


def _steps_per_epoch(count: int, per_step: int) -> int:
    return max(1, math.ceil(count / per_step))


def _epochs(n: int, stage: int):
    return tqdm(range(n), desc=f"stage {stage}", leave=False, disable=not progress_enabled())


# -----------------------------------
# Stage 1: warmup
# -----------------------------------
@dataclass
class Stage1Terms:
    total: Tensor
    mil: Tensor
    triplet: Tensor
    omega: int


def stage1_loss(
    pos_bags: Sequence[Bag],
    neg_bags: Sequence[Bag],
    encoder: EncoderParams,
    head: HeadParams,
    config: ExperimentConfig,
    graphs: Dict[str, BagGraph],
    rng: np.random.Generator,
    progress: float = 1.0,
) -> Stage1Terms:
    """mean MIL over Omega and negatives + beta * mean triplet (positive pool vs negatives)."""
    use_graphs = config.encoder.use_graphs
    encoded: List[Tensor] = []
    mil_rows: List[Tensor] = []
    omega_rows: List[int] = []
    positive_rows: List[int] = []
    normal_rows: List[int] = []
    offset = 0
    for bag in list(pos_bags) + list(neg_bags):
        h = gcn_forward(graphs[bag.id], encoder, use_graphs)
        alpha = evidence_alpha(h, head)
        if bag.is_positive:
            thresholds = thresholds_for_bag(bag.n, config.selection, progress)
            omega = list(select_clean(outputs_from_alpha(alpha.values), thresholds).omega)
            if omega:
                mil_rows.append(mil_loss(alpha.take_rows(omega), targets(len(omega), ANOMALY)))
                omega_rows += [offset + i for i in omega]
            positive_rows += list(range(offset, offset + bag.n))
        else:
            mil_rows.append(mil_loss(alpha, targets(bag.n, NORMAL)))
            normal_rows += list(range(offset, offset + bag.n))
        encoded.append(h)
        offset += bag.n

    mil = concat(mil_rows, axis=0).mean()
    trip = Tensor(0.0)
    beta = config.training.beta
    if beta > 0:
        # until the ramp settles, every positive-bag instance may act as a positive
        pool = positive_rows if progress < 1.0 else omega_rows
        triplets = sample_triplets(pool, normal_rows, config.training.triplets_per_step, rng)
        if triplets:
            h_all = concat(encoded, axis=0)
            a, p, n = zip(*triplets)
            trip = triplet_loss(
                h_all.take_rows(a), h_all.take_rows(p), h_all.take_rows(n), config.training.margin
            ).mean()
    return Stage1Terms(total=mil + trip * beta, mil=mil, triplet=trip, omega=len(omega_rows))


def stage1_warmup(
    train_bags: Sequence[Bag],
    config: ExperimentConfig,
    rng: Optional[np.random.Generator] = None,
    val_bags: Sequence[Bag] = (),
    on_record: Optional[RecordSink] = None,
    encoder: Optional[EncoderParams] = None,
    head: Optional[HeadParams] = None,
    optimizers: Optional[Dict[int, Adam]] = None,
) -> Tuple[EncoderParams, HeadParams]:
    pos, neg = positives(train_bags), negatives(train_bags)
    if not pos:
        raise ConfigError("stage 1 needs at least one positive bag in the training set")
    if not neg:
        raise ConfigError("stage 1 needs at least one negative bag in the training set")
    rng = rng if rng is not None else stream(config.seed, "train")
    tc = config.training
    dim = train_bags[0].dim
    if encoder is None:
        encoder = init_encoder(dim, config.encoder.hidden_dim, rng)
    if head is None:
        head = init_head(encoder.out_dim, config.head.hidden_dim, rng, config.head.nonneg, config.head.evidence_bias)

    graphs = build_graphs(list(train_bags) + list(val_bags), config)
    params = {**encoder.named(), **head.named()}
    opt = Adam(params, tc.lr_max)
    _register(optimizers, 1, opt)
    steps = _steps_per_epoch(len(pos), tc.bags_per_class)
    total = tc.epochs_warmup * steps
    ramp_steps = max(1.0, config.selection.ramp_fraction * total)
    keeper = _BestKeeper(encoder.named(), head.named())

    step = 0
    for _ in _epochs(tc.epochs_warmup, 1):
        for i in range(steps):
            lr = cosine_lr(step, total, tc.lr_max, tc.lr_min)
            terms = stage1_loss(
                _draw(pos, tc.bags_per_class, rng),
                _draw(neg, tc.bags_per_class, rng),
                encoder, head, config, graphs, rng,
                progress=step / ramp_steps,
            )
            opt.zero_grad()
            backward(terms.total)
            opt.step(lr)
            record = TrainRecord(
                stage=1, step=step, loss=terms.total.item(), mil=terms.mil.item(),
                triplet=terms.triplet.item(), omega=terms.omega, lr=lr,
            )
            step += 1
            if i == steps - 1:
                record.val_metric = _head_validation(val_bags, encoder, head, config, graphs)
                keeper.update(record.val_metric)
            _emit(on_record, record)
        if early_stop(keeper.history, tc.patience):
            logger.info("Stage 1 early stop after %d steps (best val %.4f)", step, keeper.best)
            break
    keeper.restore()
    return encoder, head


def _head_validation(
    val_bags: Sequence[Bag],
    encoder: EncoderParams,
    head: HeadParams,
    config: ExperimentConfig,
    graphs: Dict[str, BagGraph],
) -> Optional[float]:
    if not val_bags:
        return None
    scores = {b.id: score_video(b.instances, encoder, head, config, graphs.get(b.id)) for b in val_bags}
    return validation_metric(val_bags, scores)


def _emit(sink: Optional[RecordSink], record: TrainRecord) -> None:
    if sink is not None:
        sink(record)


def _register(optimizers: Optional[Dict[int, Adam]], stage: int, opt: Adam) -> None:
    if optimizers is not None:
        optimizers[stage] = opt


# -----------------------------------
# Stage 2: flow
# -----------------------------------
def _encode_all(bags: Sequence[Bag], encoder: EncoderParams, config: ExperimentConfig,
                graphs: Optional[Dict[str, BagGraph]] = None) -> Dict[str, np.ndarray]:
    graphs = graphs or {}
    return {
        b.id: encode_bag(graphs.get(b.id) or build_bag_graph(b.instances, config.graph), encoder, config.encoder.use_graphs)
        for b in bags
    }


def stage2_train_flow(
    train_bags: Sequence[Bag],
    encoder: EncoderParams,
    config: ExperimentConfig,
    rng: Optional[np.random.Generator] = None,
    val_bags: Sequence[Bag] = (),
    on_record: Optional[RecordSink] = None,
    optimizers: Optional[Dict[int, Adam]] = None,
) -> FlowModel:
    """Fits the flow on encoded instances of negative bags only; the encoder is read, never written."""
    neg = negatives(train_bags)
    if not neg:
        raise ConfigError("stage 2 needs at least one negative bag in the training set")
    rng = rng if rng is not None else stream(config.seed, "train")
    tc = config.training
    before = params_hash(encoder.named())

    encoded = _encode_all(neg, encoder, config)
    val_neg = negatives(val_bags)
    val_x = np.vstack(list(_encode_all(val_neg, encoder, config).values())) if val_neg else None

    fit_x = np.vstack(list(encoded.values()))
    flow = init_flow(encoder.out_dim, rng, config.flow, data=fit_x)
    opt = Adam(flow.named(), tc.flow_lr_max)
    _register(optimizers, 2, opt)
    steps = _steps_per_epoch(len(neg), tc.flow_bags_per_step)
    total = tc.epochs_flow * steps
    keeper = _BestKeeper(flow.named())

    step = 0
    for _ in _epochs(tc.epochs_flow, 2):
        for i in range(steps):
            lr = cosine_lr(step, total, tc.flow_lr_max, tc.flow_lr_min)
            batch = np.vstack([encoded[b.id] for b in _draw(neg, tc.flow_bags_per_step, rng)])
            loss = nf_loss(flow, batch)
            opt.zero_grad()
            backward(loss)
            opt.step(lr)
            record = TrainRecord(stage=2, step=step, loss=loss.item(), nf=loss.item(), lr=lr)
            step += 1
            if i == steps - 1 and val_x is not None:
                record.val_metric = -nf_loss(flow.detached(), val_x).item()
                keeper.update(record.val_metric)
            _emit(on_record, record)
        if early_stop(keeper.history, tc.patience):
            logger.info("Stage 2 early stop after %d steps", step)
            break
    keeper.restore()

    if params_hash(encoder.named()) != before:
        raise ContractError("encoder parameters changed during flow training")
    return flow


# -----------------------------------
# Stage 3: fine-tune
# -----------------------------------
@dataclass
class Stage3Terms:
    total: Tensor
    positive: Optional[Tensor]
    negative: Tensor
    omega: int
    pseudo: int


def draw_pseudo(flow: Optional[FlowModel], dim: int, config: ExperimentConfig, rng: np.random.Generator) -> Optional[np.ndarray]:
    pc = config.pseudo
    if pc.mode == "none":
        return None
    if pc.mode == "noise":
        return gaussian_noise_anomalies(retained_count(pc.pool_size, pc.keep_fraction), dim, pc.noise_std, rng)
    if flow is None:
        raise ContractError("flow pseudo anomalies need a trained flow")
    return generate_pseudo_anomalies(flow.detached(), pc.pool_size, pc.keep_fraction, rng).samples


def stage3_loss(
    pos_encoded: Sequence[np.ndarray],
    neg_encoded: Sequence[np.ndarray],
    head: HeadParams,
    config: ExperimentConfig,
    pseudo: Optional[np.ndarray] = None,
) -> Stage3Terms:
    """mean MIL over Omega and pseudo anomalies (anomaly) + mean MIL over negatives (normal)."""
    pos_rows: List[Tensor] = []
    omega_count = 0
    for h in pos_encoded:
        alpha = evidence_alpha(Tensor(h), head)
        omega = list(select_clean(outputs_from_alpha(alpha.values), thresholds_for_bag(h.shape[0], config.selection)).omega)
        if omega:
            pos_rows.append(mil_loss(alpha.take_rows(omega), targets(len(omega), ANOMALY)))
            omega_count += len(omega)
    n_pseudo = 0
    if pseudo is not None and len(pseudo):
        pos_rows.append(mil_loss(evidence_alpha(Tensor(pseudo), head), targets(len(pseudo), ANOMALY)))
        n_pseudo = len(pseudo)

    neg_x = np.vstack(list(neg_encoded))
    negative = mil_loss(evidence_alpha(Tensor(neg_x), head), targets(neg_x.shape[0], NORMAL)).mean()
    positive = concat(pos_rows, axis=0).mean() if pos_rows else None
    total = negative if positive is None else positive + negative
    return Stage3Terms(total=total, positive=positive, negative=negative, omega=omega_count, pseudo=n_pseudo)


def stage3_finetune(
    train_bags: Sequence[Bag],
    encoder: EncoderParams,
    head: HeadParams,
    flow: Optional[FlowModel],
    config: ExperimentConfig,
    rng: Optional[np.random.Generator] = None,
    val_bags: Sequence[Bag] = (),
    on_record: Optional[RecordSink] = None,
    optimizers: Optional[Dict[int, Adam]] = None,
) -> HeadParams:
    pos, neg = positives(train_bags), negatives(train_bags)
    if not neg:
        raise ConfigError("stage 3 needs at least one negative bag in the training set")
    rng = rng if rng is not None else stream(config.seed, "train")
    tc = config.training
    frozen = (params_hash(encoder.named()), None if flow is None else params_hash(flow.named()))

    encoded = _encode_all(list(train_bags) + list(val_bags), encoder, config)
    held_out = draw_pseudo(flow, encoder.out_dim, config, stream(config.seed, "validation")) if val_bags else None
    opt = Adam(head.named(), tc.head_lr_max)
    _register(optimizers, 3, opt)
    steps = _steps_per_epoch(max(len(pos), 1), tc.bags_per_class)
    total = tc.epochs_edl * steps
    keeper = _BestKeeper(head.named())

    step = 0
    for _ in _epochs(tc.epochs_edl, 3):
        for i in range(steps):
            lr = cosine_lr(step, total, tc.head_lr_max, tc.head_lr_min)
            batch_pos = _draw(pos, tc.bags_per_class, rng) if pos else []
            batch_neg = _draw(neg, tc.bags_per_class, rng)
            pseudo = draw_pseudo(flow, encoder.out_dim, config, rng)
            terms = stage3_loss(
                [encoded[b.id] for b in batch_pos], [encoded[b.id] for b in batch_neg], head, config, pseudo
            )
            if terms.positive is None:
                logger.warning("Stage 3 step %d: empty selection and no pseudo anomalies; positive term skipped", step)
            opt.zero_grad()
            backward(terms.total)
            opt.step(lr)
            record = TrainRecord(
                stage=3, step=step, loss=terms.total.item(),
                omega=terms.omega, pseudo=terms.pseudo, lr=lr,
            )
            step += 1
            if i == steps - 1 and val_bags:
                scores = {b.id: _head_scores(encoded[b.id], head) for b in val_bags}
                extra = None if held_out is None else _head_scores(held_out, head)
                record.val_metric = validation_metric(val_bags, scores, extra)
                keeper.update(record.val_metric)
            _emit(on_record, record)
        if early_stop(keeper.history, tc.patience):
            logger.info("Stage 3 early stop after %d steps (best val %.4f)", step, keeper.best)
            break
    keeper.restore()

    after = (params_hash(encoder.named()), None if flow is None else params_hash(flow.named()))
    if after != frozen:
        raise ContractError("encoder or flow parameters changed during head fine-tuning")
    return head


def _head_scores(encoded: np.ndarray, head: HeadParams) -> np.ndarray:
    alpha = evidence_alpha(Tensor(encoded), _detached_head(head)).values
    return alpha[:, 0] / alpha.sum(axis=1)


# -----------------------------------
# Experiment plumbing: split, checkpoints, full run
# -----------------------------------
@dataclass
class PreparedData:
    split: OpenSetSplit
    fit: List[Bag]
    val: List[Bag]


def prepare_experiment(bags: Sequence[Bag], config: ExperimentConfig) -> PreparedData:
    """Open split then a stratified validation hold-out, both from the seed's split stream."""
    rng = stream(config.seed, "split")
    split = split_from_config(bags, config.split, rng)
    fit, val = split_validation(split.train, config.split.validation_fraction, rng)
    return PreparedData(split=split, fit=fit, val=val)


def checkpoint_meta(stage: int, config: ExperimentConfig, detector: AnomalyDetector,
                    rng: np.random.Generator, split: Optional[OpenSetSplit] = None) -> Dict[str, object]:
    meta: Dict[str, object] = {
        "stage": stage,
        "config_hash": hash_of(config),
        "rng_state": rng_state(rng),
        "in_dim": detector.encoder.in_dim,
        "hashes": detector.hashes(),
    }
    if split is not None:
        meta["seen_classes"] = sorted(split.seen_classes)
        meta["test_ids"] = [b.id for b in split.test]
    return meta


OPTIM_PREFIX = "optim/"


def optimizer_arrays(stage: int, opt: Adam) -> Dict[str, np.ndarray]:
    return {f"{OPTIM_PREFIX}stage{stage}/{k}": v for k, v in opt.state_arrays().items()}


def optimizer_state(tensors: Dict[str, np.ndarray], stage: int) -> Dict[str, np.ndarray]:
    """The Adam.state_arrays() of one stage, as stored by save_stage; empty if absent."""
    prefix = f"{OPTIM_PREFIX}stage{stage}/"
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def save_stage(path: Path, stage: int, config: ExperimentConfig, detector: AnomalyDetector,
               rng: np.random.Generator, split: Optional[OpenSetSplit] = None,
               optimizer_states: Optional[Dict[str, np.ndarray]] = None) -> Path:
    """Model tensors plus the optimizer moments of every completed stage (keys from optimizer_arrays)."""
    tensors = detector.arrays()
    if optimizer_states:
        tensors.update(optimizer_states)
    return save_checkpoint(path, tensors, checkpoint_meta(stage, config, detector, rng, split))


def load_detector(path, config: ExperimentConfig, check_hash: bool = True) -> Tuple[AnomalyDetector, Dict[str, object]]:
    tensors, meta = load_checkpoint(path)
    if check_hash and meta.get("config_hash") != hash_of(config):
        raise ConfigError(
            f"checkpoint {path} was written with config hash {str(meta.get('config_hash'))[:12]}, "
            f"current config hashes to {hash_of(config)[:12]}; refusing to mix them"
        )
    encoder = EncoderParams.from_arrays(tensors)
    head = HeadParams.from_arrays(tensors, config.head.nonneg)
    flow = None
    if any(k.startswith("flow/") for k in tensors):
        flow = init_flow(encoder.out_dim, np.random.default_rng(0), config.flow)
        flow.load_arrays(tensors)
    return AnomalyDetector(encoder, head, flow, config.encoder.use_graphs), meta


@dataclass
class TrainingResult:
    detector: Optional[AnomalyDetector]
    data: PreparedData
    checkpoints: List[Path] = field(default_factory=list)
    completed_stage: int = 0


def run_training(
    bags: Sequence[Bag],
    config: ExperimentConfig,
    stages: str = "123",
    out_dir: Optional[Path] = None,
    resume: Optional[Path] = None,
    on_record: Optional[RecordSink] = None,
) -> TrainingResult:
    if stages not in STAGE_CHOICES:
        raise ConfigError(f"--stages must be one of {STAGE_CHOICES}, got {stages!r}")
    last = int(stages[-1])
    data = prepare_experiment(bags, config)
    rng = stream(config.seed, "train")
    detector: Optional[AnomalyDetector] = None
    done = 0
    optimizers: Dict[int, Adam] = {}
    optimizer_states: Dict[str, np.ndarray] = {}
    if resume is not None:
        detector, meta = load_detector(resume, config)
        done = int(meta["stage"])
        rng = restore_rng(meta["rng_state"])
        tensors, _ = load_checkpoint(resume)
        optimizer_states = {k: v for k, v in tensors.items() if k.startswith(OPTIM_PREFIX)}
        logger.info("Resuming after stage %d from %s", done, resume)
        if done >= last:
            logger.info("Checkpoint already covers the requested stages")
    result = TrainingResult(detector=detector, data=data, completed_stage=done)

    def finish(stage: int) -> None:
        result.detector = detector
        result.completed_stage = stage
        if stage in optimizers:
            optimizer_states.update(optimizer_arrays(stage, optimizers[stage]))
        if out_dir is not None:
            result.checkpoints.append(
                save_stage(
                    Path(out_dir) / f"stage{stage}.ckpt", stage, config, detector, rng, data.split, optimizer_states
                )
            )

    for stage in range(done + 1, last + 1):
        try:
            if stage == 1:
                encoder, head = stage1_warmup(data.fit, config, rng, data.val, on_record, optimizers=optimizers)
                detector = AnomalyDetector(encoder, head, None, config.encoder.use_graphs)
            elif stage == 2:
                detector.flow = stage2_train_flow(
                    data.fit, detector.encoder, config, rng, data.val, on_record, optimizers=optimizers
                )
            else:
                detector.head = stage3_finetune(
                    data.fit, detector.encoder, detector.head, detector.flow, config, rng, data.val, on_record,
                    optimizers=optimizers,
                )
        except VadError as e:
            raise type(e)(f"stage {stage}: {e}") from e
        logger.info("Stage %d done: %s", stage, {k: (v or "-")[:12] for k, v in detector.hashes().items()})
        finish(stage)
    return result


# -----------------------------------
# Evaluation on a bag set
# -----------------------------------
def flow_scores(bags: Sequence[Bag], detector: AnomalyDetector, config: ExperimentConfig) -> Dict[str, np.ndarray]:
    """Negative log-density per instance, rank-normalized over the whole bag set."""
    if detector.flow is None:
        raise ContractError("flow scoring needs a checkpoint that includes stage 2")
    flow = detector.flow.detached()
    raw = [score_with_flow(b.instances, detector.encoder, flow, config) for b in bags]
    pooled = rank_normalize(np.concatenate(raw)) if raw else np.zeros(0)
    out, start = {}, 0
    for bag, r in zip(bags, raw):
        out[bag.id] = pooled[start:start + r.size]
        start += r.size
    return out


def evaluate_detector(
    detector: AnomalyDetector,
    bags: Sequence[Bag],
    seen_classes: Sequence[str],
    config: ExperimentConfig,
    scorer: str = "head",
) -> OpenSetReport:
    if scorer == "flow":
        scores = flow_scores(bags, detector, config)
    else:
        scores = {k: v[0] for k, v in score_bags(bags, detector, config).items()}
    return open_set_report(scored_from_bags(bags, scores, seen_classes))
