# services/data_service.py
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ConfigError, ContractError, IngestionError
from schemas import SplitConfig, SynthConfig
from storage import read_feature_file, read_manifest, write_feature_file, write_manifest

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


# -----------------------------------
# Bag
# -----------------------------------
@dataclass
class Bag:
    id: str
    instances: np.ndarray
    bag_label: int
    instance_labels: Optional[np.ndarray] = None
    anomaly_class: Optional[str] = None

    def __post_init__(self):
        self.instances = np.asarray(self.instances, dtype=np.float64)
        if self.instances.ndim != 2 or self.instances.shape[0] < 1:
            raise ContractError(f"bag {self.id}: instances must be N x D with N >= 1, got {self.instances.shape}")
        if self.bag_label not in (0, 1):
            raise ContractError(f"bag {self.id}: bag_label must be 0 or 1, got {self.bag_label}")
        self.bag_label = int(self.bag_label)
        if self.instance_labels is None:
            return
        labels = np.asarray(self.instance_labels).astype(np.int64).ravel()
        if labels.shape[0] != self.n:
            raise ContractError(f"bag {self.id}: {labels.shape[0]} instance labels for {self.n} instances")
        if not np.isin(labels, (0, 1)).all():
            raise ContractError(f"bag {self.id}: instance labels must be 0 or 1")
        if self.bag_label == 1 and labels.sum() == 0:
            raise ContractError(f"bag {self.id}: positive bag without a positive instance")
        if self.bag_label == 0 and labels.sum() > 0:
            raise ContractError(f"bag {self.id}: negative bag with positive instances")
        self.instance_labels = labels

    @property
    def n(self) -> int:
        return self.instances.shape[0]

    @property
    def dim(self) -> int:
        return self.instances.shape[1]

    @property
    def is_positive(self) -> bool:
        return self.bag_label == 1


def anomaly_classes(bags: Iterable[Bag]) -> List[str]:
    return sorted({b.anomaly_class for b in bags if b.is_positive and b.anomaly_class is not None})


def positives(bags: Iterable[Bag]) -> List[Bag]:
    return [b for b in bags if b.is_positive]


def negatives(bags: Iterable[Bag]) -> List[Bag]:
    return [b for b in bags if not b.is_positive]


# -----------------------------------
# Synthetic generator
# -----------------------------------
def class_name(k: int) -> str:
    return f"class_{k}"


def class_means(cfg: SynthConfig) -> np.ndarray:
    """
    Mean of class k sits anomaly_shift along axis k % D, on the positive side for
    the first D classes and the negative side for the next D.
    """
    d, k = cfg.feature_dim, cfg.n_classes
    if k > 2 * d:
        raise ConfigError(f"synth: {k} classes need feature_dim >= {math.ceil(k / 2)}, got {d}")
    means = np.zeros((k, d))
    for c in range(k):
        means[c, c % d] = cfg.anomaly_shift if c < d else -cfg.anomaly_shift
    return means


def benign_mean(cfg: SynthConfig) -> np.ndarray:
    """
    Benign bursts sit benign_shift along the negative side of the last axis, a
    direction no anomaly class uses unless n_classes == 2 * feature_dim.
    """
    d = cfg.feature_dim
    if cfg.benign_rate > 0 and cfg.n_classes >= 2 * d:
        raise ConfigError(
            f"synth: benign bursts need a free axis; {cfg.n_classes} classes use every side of {d} dims"
        )
    mean = np.zeros(d)
    mean[d - 1] = -cfg.benign_shift
    return mean


def normal_process(n: int, d: int, rho: float, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Stationary AR(1) around the origin: x_t = rho x_{t-1} + sqrt(1 - rho^2) scale e_t."""
    noise = rng.standard_normal(size=(n, d))
    out = np.empty((n, d))
    out[0] = scale * noise[0]
    innovation = math.sqrt(1.0 - rho * rho) * scale
    for t in range(1, n):
        out[t] = rho * out[t - 1] + innovation * noise[t]
    return out


def segment_bounds(n: int, cfg: SynthConfig) -> Tuple[int, int]:
    lo = max(1, math.ceil(cfg.segment_min_fraction * n))
    hi = max(lo, min(n, math.floor(cfg.segment_max_fraction * n)))
    return lo, hi


def _shift_rows(x: np.ndarray, start: int, length: int, mean: np.ndarray, scale: float,
                rng: np.random.Generator) -> np.ndarray:
    axes = np.flatnonzero(mean)
    out = x.copy()
    out[start:start + length, axes] = mean[axes] + scale * rng.standard_normal(size=(length, axes.size))
    return out


def embed_benign_event(
    normal: np.ndarray,
    start: int,
    length: int,
    mean: np.ndarray,
    scale: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """A burst of unusual but normal activity; instance labels are untouched."""
    if length < 1 or start < 0 or start + length > normal.shape[0]:
        raise ConfigError(f"benign burst [{start}, {start + length}) does not fit in a bag of {normal.shape[0]}")
    return _shift_rows(normal, start, length, mean, scale, rng)


def embed_anomaly_segment(
    normal: np.ndarray,
    start: int,
    length: int,
    mean: np.ndarray,
    scale: float,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Rows [start, start + length) move onto the class cluster along the axes the
    class mean occupies (its non-zero entries); every other coordinate keeps the
    normal process.
    """
    n = normal.shape[0]
    if length < 1:
        raise ConfigError("a positive bag needs an anomaly segment of length >= 1")
    if start < 0 or start + length > n:
        raise ConfigError(f"segment [{start}, {start + length}) does not fit in a bag of {n}")
    out = _shift_rows(normal, start, length, mean, scale, rng)
    labels = np.zeros(n, dtype=np.int64)
    labels[start:start + length] = 1
    return out, labels


def generate_synthetic(cfg: SynthConfig, rng: np.random.Generator) -> List[Bag]:
    if cfg.n_classes < 1 or cfg.feature_dim < 1 or cfg.bag_size < 1 or cfg.n_bags < 1:
        raise ConfigError("synth: class count, dims, bag size and bag count must all be positive")
    means = class_means(cfg)
    benign = benign_mean(cfg)
    n_pos = int(round(cfg.n_bags * cfg.positive_fraction))
    labels = np.array([1] * n_pos + [0] * (cfg.n_bags - n_pos))
    labels = labels[rng.permutation(cfg.n_bags)]
    lo, hi = segment_bounds(cfg.bag_size, cfg)

    bags: List[Bag] = []
    pos_seen = 0
    for i, label in enumerate(labels):
        x = normal_process(cfg.bag_size, cfg.feature_dim, cfg.normal_ar, cfg.normal_scale, rng)
        if rng.random() < cfg.benign_rate:
            length = int(rng.integers(lo, hi + 1))
            start = int(rng.integers(0, cfg.bag_size - length + 1))
            x = embed_benign_event(x, start, length, benign, cfg.anomaly_scale, rng)
        if label == 0:
            bags.append(Bag(f"bag_{i:04d}", x, 0, np.zeros(cfg.bag_size, dtype=np.int64)))
            continue
        k = pos_seen % cfg.n_classes
        pos_seen += 1
        length = int(rng.integers(lo, hi + 1))
        start = int(rng.integers(0, cfg.bag_size - length + 1))
        x, inst = embed_anomaly_segment(x, start, length, means[k], cfg.anomaly_scale, rng)
        bags.append(Bag(f"bag_{i:04d}", x, 1, inst, class_name(k)))
    logger.info("Generated %d synthetic bags (%d positive, %d classes)", len(bags), n_pos, cfg.n_classes)
    return bags


# -----------------------------------
# Open-set split
# -----------------------------------
@dataclass
class OpenSetSplit:
    seen_classes: FrozenSet[str]
    unseen_classes: FrozenSet[str]
    train: List[Bag] = field(default_factory=list)
    test: List[Bag] = field(default_factory=list)

    @property
    def closed_set(self) -> bool:
        return not self.unseen_classes

    def check_leakage(self) -> None:
        leaked = {b.anomaly_class for b in self.train if b.is_positive} & set(self.unseen_classes)
        if leaked:
            raise ContractError(f"unseen classes leaked into train: {sorted(leaked)}")
        if self.unseen_classes and not any(b.anomaly_class in self.unseen_classes for b in self.test):
            raise ContractError("open split has no unseen-class bag in test")


def _take(items: List[Bag], fraction: float, rng: np.random.Generator) -> Tuple[List[Bag], List[Bag]]:
    order = rng.permutation(len(items))
    k = int(round(fraction * len(items)))
    if len(items) >= 2:
        k = min(max(k, 1), len(items) - 1) if fraction < 1.0 else len(items)
    shuffled = [items[i] for i in order]
    return shuffled[:k], shuffled[k:]


def make_open_split(
    bags: Sequence[Bag],
    seen: Iterable[str],
    rng: np.random.Generator,
    normal_train_fraction: float = 0.7,
    anomaly_train_fraction: float = 0.7,
    max_train_anomaly_bags: Optional[int] = None,
) -> OpenSetSplit:
    available = anomaly_classes(bags)
    seen_set = frozenset(seen)
    unknown = sorted(seen_set - set(available))
    if unknown:
        raise ConfigError(f"unknown seen classes {unknown}; available: {available}")
    unseen_set = frozenset(available) - seen_set

    normal_train, normal_test = _take(negatives(bags), normal_train_fraction, rng)
    anomaly_train: List[Bag] = []
    anomaly_test: List[Bag] = []
    for cls in sorted(seen_set):
        members = [b for b in bags if b.is_positive and b.anomaly_class == cls]
        tr, te = _take(members, anomaly_train_fraction, rng)
        anomaly_train += tr
        anomaly_test += te
    if max_train_anomaly_bags is not None and len(anomaly_train) > max_train_anomaly_bags:
        order = rng.permutation(len(anomaly_train))
        keep = {int(i) for i in order[:max_train_anomaly_bags]}
        anomaly_test += [b for i, b in enumerate(anomaly_train) if i not in keep]
        anomaly_train = [b for i, b in enumerate(anomaly_train) if i in keep]
    anomaly_test += [b for b in bags if b.is_positive and b.anomaly_class not in seen_set]

    split = OpenSetSplit(
        seen_classes=seen_set,
        unseen_classes=unseen_set,
        train=sorted(normal_train + anomaly_train, key=lambda b: b.id),
        test=sorted(normal_test + anomaly_test, key=lambda b: b.id),
    )
    split.check_leakage()
    logger.info(
        "Open split: seen=%s unseen=%s train=%d test=%d",
        sorted(seen_set), sorted(unseen_set), len(split.train), len(split.test),
    )
    return split


def split_from_config(bags: Sequence[Bag], cfg: SplitConfig, rng: np.random.Generator) -> OpenSetSplit:
    seen = cfg.seen_classes
    if seen is None:
        seen = choose_seen_classes(anomaly_classes(bags), cfg.n_seen, rng)
    return make_open_split(
        bags,
        seen,
        rng,
        normal_train_fraction=cfg.normal_train_fraction,
        anomaly_train_fraction=cfg.anomaly_train_fraction,
        max_train_anomaly_bags=cfg.max_train_anomaly_bags,
    )


def choose_seen_classes(classes: Sequence[str], n_seen: int, rng: np.random.Generator) -> Tuple[str, ...]:
    pool = sorted(classes)
    if n_seen > len(pool):
        raise ConfigError(f"cannot keep {n_seen} seen classes out of {len(pool)}")
    picked = rng.choice(len(pool), size=n_seen, replace=False) if n_seen else []
    return tuple(sorted(pool[int(i)] for i in picked))


def repeat_class_removals(
    classes: Sequence[str],
    n_seen: int,
    repeats: int,
    rng: np.random.Generator,
) -> List[Tuple[str, ...]]:
    """`repeats` distinct seen-class draws (each a different set of removed classes)."""
    pool = sorted(classes)
    if n_seen > len(pool):
        raise ConfigError(f"cannot keep {n_seen} seen classes out of {len(pool)}")
    combos = list(itertools.combinations(pool, n_seen))
    if repeats > len(combos):
        raise ConfigError(f"only {len(combos)} distinct class removals exist, {repeats} requested")
    picked = rng.choice(len(combos), size=repeats, replace=False)
    return [combos[int(i)] for i in picked]


def split_validation(
    bags: Sequence[Bag],
    fraction: float,
    rng: np.random.Generator,
) -> Tuple[List[Bag], List[Bag]]:
    """Stratified by bag label; every label keeps at least one bag in train."""
    if fraction <= 0.0:
        return list(bags), []
    train: List[Bag] = []
    val: List[Bag] = []
    for label in (0, 1):
        members = [b for b in bags if b.bag_label == label]
        order = rng.permutation(len(members))
        k = min(int(round(fraction * len(members))), max(len(members) - 1, 0))
        val += [members[int(i)] for i in order[:k]]
        train += [members[int(i)] for i in order[k:]]
    return sorted(train, key=lambda b: b.id), sorted(val, key=lambda b: b.id)


# -----------------------------------
# Feature files + manifest
# -----------------------------------
def write_dataset(bags: Sequence[Bag], out_dir: PathLike) -> Path:
    """Write one feature file per bag (plus instance labels when known) and manifest.json."""
    out_dir = Path(out_dir)
    entries: List[Dict[str, object]] = []
    for bag in bags:
        rel = Path("features") / f"{bag.id}.vadf"
        write_feature_file(out_dir / rel, bag.instances)
        entry: Dict[str, object] = {"id": bag.id, "path": rel.as_posix(), "bag_label": bag.bag_label}
        if bag.anomaly_class is not None:
            entry["anomaly_class"] = bag.anomaly_class
        if bag.instance_labels is not None:
            lab = Path("labels") / f"{bag.id}.vadf"
            write_feature_file(out_dir / lab, bag.instance_labels.reshape(-1, 1).astype(np.float64))
            entry["instance_labels_path"] = lab.as_posix()
        entries.append(entry)
    manifest = out_dir / "manifest.json"
    write_manifest(manifest, entries)
    logger.info("Dataset written: %s (%d bags)", manifest, len(entries))
    return manifest


def subsample_indices(n: int, bag_size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw without replacement, sorted so temporal order is kept."""
    if n <= bag_size:
        return np.arange(n)
    return np.sort(rng.choice(n, size=bag_size, replace=False))


def load_feature_bags(
    manifest_path: PathLike,
    bag_size: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> List[Bag]:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    rng = rng or np.random.default_rng(0)
    bags: List[Bag] = []
    dim: Optional[int] = None
    for entry in read_manifest(manifest_path):
        path = root / entry["path"]
        x = read_feature_file(path)
        if dim is None:
            dim = x.shape[1]
        elif x.shape[1] != dim:
            raise IngestionError(f"{path}: feature dim {x.shape[1]} differs from {dim} in earlier files")
        labels = None
        if entry.get("instance_labels_path"):
            lab_path = root / entry["instance_labels_path"]
            lab = read_feature_file(lab_path)
            if lab.shape != (x.shape[0], 1):
                raise IngestionError(f"{lab_path}: expected {x.shape[0]}x1 labels, got {lab.shape[0]}x{lab.shape[1]}")
            labels = lab[:, 0]
        if bag_size is not None:
            idx = subsample_indices(x.shape[0], bag_size, rng)
            x = x[idx]
            labels = None if labels is None else labels[idx]
            if labels is not None and entry["bag_label"] == 1 and labels.sum() == 0:
                logger.warning("%s: subsampling dropped every labelled anomaly; instance labels discarded", path)
                labels = None
        try:
            bags.append(Bag(str(entry["id"]), x, int(entry["bag_label"]), labels, entry.get("anomaly_class")))
        except (TypeError, ValueError, ContractError) as e:
            raise IngestionError(f"{path}: {e}") from e
    logger.info("Loaded %d bags from %s", len(bags), manifest_path)
    return bags
