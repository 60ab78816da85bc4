import math
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ---- Synthetic data ----
class SynthConfig(_Section):
    n_bags: int = Field(200, gt=0)
    bag_size: int = Field(32, gt=0, description="instances per bag (N)")
    feature_dim: int = Field(8, gt=0, description="feature dims (D)")
    n_classes: int = Field(4, gt=0, description="anomaly classes (K)")
    positive_fraction: float = Field(0.5, gt=0.0, lt=1.0)
    segment_min_fraction: float = Field(0.1, gt=0.0, le=1.0)
    segment_max_fraction: float = Field(0.4, gt=0.0, le=1.0)
    normal_ar: float = Field(0.8, ge=0.0, lt=1.0, description="AR(1) coefficient of the normal process")
    normal_scale: float = Field(1.0, gt=0.0)
    anomaly_shift: float = Field(4.0, gt=0.0, description="distance of class means from the origin")
    anomaly_scale: float = Field(0.5, gt=0.0, description="spread of anomaly and benign clusters along their axis")
    benign_rate: float = Field(0.5, ge=0.0, le=1.0, description="probability a bag holds one benign burst")
    benign_shift: float = Field(5.0, gt=0.0, description="distance of benign bursts from the origin")

    @model_validator(mode="after")
    def _segment_bounds(self):
        if self.segment_min_fraction > self.segment_max_fraction:
            raise ValueError("segment_min_fraction must not exceed segment_max_fraction")
        return self


# ---- Ingestion ----
class DataConfig(_Section):
    manifest: Optional[str] = Field(None, description="path to a manifest.json")
    bag_size: int = Field(32, gt=0, description="longer videos are subsampled to this size")


# ---- Open-set split ----
class SplitConfig(_Section):
    seen_classes: Optional[List[str]] = Field(None, description="explicit seen anomaly classes")
    n_seen: int = Field(2, ge=0, description="used when seen_classes is not given")
    normal_train_fraction: float = Field(0.7, gt=0.0, lt=1.0)
    anomaly_train_fraction: float = Field(0.7, gt=0.0, le=1.0)
    max_train_anomaly_bags: Optional[int] = Field(None, gt=0)
    validation_fraction: float = Field(0.15, ge=0.0, lt=1.0)


# ---- Models ----
class GraphConfig(_Section):
    similarity_threshold: float = Field(0.5, ge=0.0, lt=1.0)
    temporal_decay: float = Field(math.log(2.0), gt=0.0)


class EncoderConfig(_Section):
    hidden_dim: int = Field(8, gt=0, description="width of each branch; output is 2x this")
    use_graphs: bool = True


class HeadConfig(_Section):
    hidden_dim: int = Field(32, gt=0)
    nonneg: Literal["relu", "softplus"] = "relu"
    evidence_bias: float = Field(0.1, ge=0.0, description="initial evidence on both classes")


class SelectionConfig(_Section):
    mode: Literal["rank", "absolute", "topk", "all"] = "rank"
    p_rank: Optional[int] = Field(None, gt=0, description="fixed tau_p rank; default ceil(N/4)")
    u_rank: Optional[int] = Field(None, gt=0, description="fixed tau_u rank; default ceil(3N/4)")
    p_fraction: float = Field(0.25, gt=0.0, le=1.0)
    u_fraction: float = Field(0.75, gt=0.0, le=1.0)
    p_value: float = Field(0.5, ge=0.0, le=1.0, description="absolute mode tau_p")
    u_value: float = Field(2.0, ge=1.0, description="absolute mode tau_u")
    ramp_fraction: float = Field(0.5, gt=0.0, le=1.0, description="share of stage 1 spent ramping tau_p")


class FlowConfig(_Section):
    n_layers: int = Field(5, gt=0)
    hidden_factor: int = Field(4, gt=0, description="hidden width = factor * H")
    scale_clamp: float = Field(5.0, gt=0.0)
    min_scale: float = Field(1e-2, gt=0.0, le=1.0, description="floor on the per-dimension output scale")


class PseudoConfig(_Section):
    mode: Literal["flow", "noise", "none"] = "flow"
    pool_size: int = Field(5000, gt=0)
    keep_fraction: float = Field(0.05, gt=0.0, le=1.0)
    noise_std: float = Field(1.0, gt=0.0)


class TrainingConfig(_Section):
    margin: float = Field(0.3, ge=0.0, description="triplet margin m")
    beta: float = Field(1e-3, ge=0.0, description="triplet loss weight")
    triplets_per_step: int = Field(64, ge=0)
    bags_per_class: int = Field(4, gt=0, description="positive and negative bags per iteration")
    flow_bags_per_step: int = Field(4, gt=0)
    epochs_warmup: int = Field(30, gt=0)
    epochs_flow: int = Field(40, gt=0)
    epochs_edl: int = Field(30, gt=0)
    lr_max: float = Field(1e-2, gt=0.0)
    lr_min: float = Field(1e-4, ge=0.0)
    flow_lr_max: float = Field(5e-3, gt=0.0)
    flow_lr_min: float = Field(1e-4, ge=0.0)
    head_lr_max: float = Field(1e-2, gt=0.0)
    head_lr_min: float = Field(1e-4, ge=0.0)
    patience: int = Field(5, gt=0)


class ExperimentConfig(_Section):
    seed: int = 0
    preset: Literal["synthetic", "xd_violence", "ucf_crime", "shanghaitech"] = "synthetic"
    synth: SynthConfig = Field(default_factory=SynthConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    split: SplitConfig = Field(default_factory=SplitConfig)
    graph: GraphConfig = Field(default_factory=GraphConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    head: HeadConfig = Field(default_factory=HeadConfig)
    selection: SelectionConfig = Field(default_factory=SelectionConfig)
    flow: FlowConfig = Field(default_factory=FlowConfig)
    pseudo: PseudoConfig = Field(default_factory=PseudoConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)


# ---- Presets (per-dataset hyperparameters) ----
PRESETS: Dict[str, Dict[str, Dict[str, object]]] = {
    "synthetic": {},
    "xd_violence": {
        "data": {"bag_size": 200},
        "training": {"beta": 1e-3},
        "selection": {"p_rank": 50, "u_rank": 150},
    },
    "ucf_crime": {
        "data": {"bag_size": 200},
        "training": {"beta": 1e-4},
        "selection": {"p_rank": 30, "u_rank": 150},
    },
    "shanghaitech": {
        "data": {"bag_size": 32},
        "training": {"beta": 1e-4},
        "selection": {"p_rank": 3, "u_rank": 24},
    },
}


# ---- CLI ----
class RunSpec(BaseModel):
    command: Literal["synth", "train", "eval", "score", "ablate", "curves"]
    config_path: Optional[str] = None
    seed: Optional[int] = None
    output_dir: str


# ---- Reports / records ----
class TrainRecord(BaseModel):
    stage: int
    step: int
    loss: float
    mil: Optional[float] = None
    triplet: Optional[float] = None
    nf: Optional[float] = None
    omega: Optional[int] = None
    pseudo: Optional[int] = None
    lr: Optional[float] = None
    val_metric: Optional[float] = None
    ts: Optional[str] = Field(None, description="wall clock; the only non-reproducible field")


class MetricPair(BaseModel):
    auc_roc: float
    auc_pr: float
    n_pos: int
    n_neg: int


class OpenSetSummary(BaseModel):
    overall: MetricPair
    unseen: Optional[MetricPair] = None
    seen: Optional[MetricPair] = None
    notes: List[str] = Field(default_factory=list)
