# services/eval_service.py
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.metrics import average_precision_score, precision_recall_curve, roc_auc_score, roc_curve

from errors import ContractError, StorageError, UndefinedMetricError
from schemas import MetricPair, OpenSetSummary

logger = logging.getLogger(__name__)

NORMAL = "normal"
SEEN = "seen"
UNSEEN = "unseen"
GROUPS = (NORMAL, SEEN, UNSEEN)


# -----------------------------------
# Scored instances
# -----------------------------------
@dataclass
class ScoredInstances:
    scores: np.ndarray
    labels: np.ndarray
    groups: Optional[np.ndarray] = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).astype(np.int64).ravel()
        if self.scores.shape != self.labels.shape:
            raise ContractError(f"{self.scores.size} scores vs {self.labels.size} labels")
        if not np.isin(self.labels, (0, 1)).all():
            raise ContractError("labels must be 0 or 1")
        if self.groups is not None:
            self.groups = np.asarray(self.groups, dtype=object).ravel()
            if self.groups.shape != self.labels.shape:
                raise ContractError(f"{self.groups.size} group tags vs {self.labels.size} labels")

    def __len__(self) -> int:
        return int(self.scores.size)

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return len(self) - self.n_pos

    def restrict(self, group: str) -> "ScoredInstances":
        """Positives of one anomaly group against every normal instance."""
        if self.groups is None:
            raise ContractError("no group tags to restrict on")
        mask = (self.groups == group) | (self.labels == 0)
        return ScoredInstances(self.scores[mask], self.labels[mask], self.groups[mask])


def scored_from_bags(bags: Iterable, scores: Dict[str, np.ndarray], seen_classes: Iterable[str]) -> ScoredInstances:
    """
    Flatten per-bag instance scores. Negative bags count as all-normal even without
    ground truth; positive bags without instance labels are skipped.
    """
    seen = set(seen_classes)
    s: List[np.ndarray] = []
    y: List[np.ndarray] = []
    g: List[np.ndarray] = []
    skipped = 0
    for bag in bags:
        labels = bag.instance_labels
        if labels is None:
            if bag.is_positive:
                skipped += 1
                continue
            labels = np.zeros(bag.n, dtype=np.int64)
        tag = SEEN if bag.anomaly_class in seen else UNSEEN
        s.append(np.asarray(scores[bag.id], dtype=np.float64))
        y.append(labels)
        g.append(np.where(labels == 1, tag, NORMAL).astype(object))
    if skipped:
        logger.warning("Skipped %d positive bags without instance labels", skipped)
    if not s:
        raise UndefinedMetricError("no bag carries instance-level ground truth")
    return ScoredInstances(np.concatenate(s), np.concatenate(y), np.concatenate(g))


# -----------------------------------
# Metrics
# -----------------------------------
def _require_both(scored: ScoredInstances, metric: str) -> None:
    if scored.n_pos == 0 or scored.n_neg == 0:
        raise UndefinedMetricError(
            f"{metric} needs both classes, got {scored.n_pos} positives and {scored.n_neg} negatives"
        )


def auc_roc(scored: ScoredInstances) -> float:
    """P(random positive outranks random negative), ties count 1/2."""
    _require_both(scored, "AUC-ROC")
    return float(roc_auc_score(scored.labels, scored.scores))


def auc_pr(scored: ScoredInstances) -> float:
    """Step-curve area sum_n (R_n - R_{n-1}) P_n, one threshold per distinct score."""
    if scored.n_pos == 0:
        raise UndefinedMetricError("AUC-PR needs at least one positive")
    if scored.n_neg == 0:
        return 1.0
    return float(average_precision_score(scored.labels, scored.scores))


def roc_points(scored: ScoredInstances) -> pd.DataFrame:
    _require_both(scored, "ROC curve")
    fpr, tpr, thresholds = roc_curve(scored.labels, scored.scores, drop_intermediate=False)
    return pd.DataFrame({"threshold": thresholds, "x": fpr, "y": tpr})


def pr_points(scored: ScoredInstances) -> pd.DataFrame:
    """x = recall, y = precision. The final (recall 0, precision 1) point has threshold inf."""
    if scored.n_pos == 0:
        raise UndefinedMetricError("PR curve needs at least one positive")
    precision, recall, thresholds = precision_recall_curve(scored.labels, scored.scores)
    return pd.DataFrame({"threshold": np.append(thresholds, np.inf), "x": recall, "y": precision})


def metric_pair(scored: ScoredInstances) -> MetricPair:
    return MetricPair(auc_roc=auc_roc(scored), auc_pr=auc_pr(scored), n_pos=scored.n_pos, n_neg=scored.n_neg)


# -----------------------------------
# Open-set report
# -----------------------------------
@dataclass
class OpenSetReport:
    summary: OpenSetSummary
    curves: Dict[str, pd.DataFrame] = field(default_factory=dict)

    def metric(self, group: str, name: str = "auc_roc") -> Optional[float]:
        pair = getattr(self.summary, group)
        return None if pair is None else getattr(pair, name)


def open_set_report(scored: ScoredInstances) -> OpenSetReport:
    if scored.groups is None:
        raise ContractError("open_set_report needs group tags")
    overall = metric_pair(scored)
    curves = {"overall_roc": roc_points(scored), "overall_pr": pr_points(scored)}
    notes: List[str] = []
    subs: Dict[str, Optional[MetricPair]] = {}
    for group in (UNSEEN, SEEN):
        part = scored.restrict(group)
        if part.n_pos == 0:
            notes.append(f"no {group} anomalies in the scored set; {group} metrics omitted")
            subs[group] = None
            continue
        subs[group] = metric_pair(part)
        curves[f"{group}_roc"] = roc_points(part)
        curves[f"{group}_pr"] = pr_points(part)
    summary = OpenSetSummary(overall=overall, unseen=subs[UNSEEN], seen=subs[SEEN], notes=notes)
    return OpenSetReport(summary=summary, curves=curves)


def write_report(report: OpenSetReport, out_dir: Path) -> Path:
    out = Path(out_dir) / "report.json"
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report.summary.model_dump_json(indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise StorageError(f"Cannot write report {out}: {e}") from e
    return out


def write_curves(report: OpenSetReport, out_dir: Path) -> List[Path]:
    """One CSV per curve: threshold,x,y."""
    out_dir = Path(out_dir)
    written = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, df in report.curves.items():
            path = out_dir / f"{name}.csv"
            df.to_csv(path, index=False)
            written.append(path)
    except OSError as e:
        raise StorageError(f"Cannot write curves to {out_dir}: {e}") from e
    return written


def plot_curves(report: OpenSetReport, out_dir: Path) -> List[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for kind, xlabel, ylabel in (("roc", "False Positive Rate", "True Positive Rate"), ("pr", "Recall", "Precision")):
        plt.figure(figsize=(8, 6))
        for group in ("overall",) + (UNSEEN, SEEN):
            df = report.curves.get(f"{group}_{kind}")
            if df is None:
                continue
            pair = getattr(report.summary, group)
            value = pair.auc_roc if kind == "roc" else pair.auc_pr
            plt.plot(df["x"], df["y"], lw=2, label=f"{group} (AUC = {value:.4f})")
        if kind == "roc":
            plt.plot([0, 1], [0, 1], color="navy", lw=1, linestyle="--")
        plt.xlim([0.0, 1.0])
        plt.ylim([0.0, 1.05])
        plt.xlabel(xlabel)
        plt.ylabel(ylabel)
        plt.legend(loc="lower right" if kind == "roc" else "lower left")
        plt.grid(alpha=0.3)
        path = out_dir / f"{kind}.png"
        try:
            plt.savefig(path, dpi=150, bbox_inches="tight")
        except OSError as e:
            raise StorageError(f"Cannot write plot {path}: {e}") from e
        finally:
            plt.close()
        written.append(path)
    return written


def rank_normalize(values: Sequence[float]) -> np.ndarray:
    """Percentile ranks in (0, 1]; ties share their average rank."""
    return pd.Series(np.asarray(values, dtype=np.float64)).rank(pct=True, method="average").to_numpy()
