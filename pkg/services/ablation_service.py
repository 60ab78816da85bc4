# services/ablation_service.py
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from errors import ConfigError, StorageError
from services.data_service import Bag
from services.pipeline_service import evaluate_detector, run_training
from settings import build_config, deep_merge

logger = logging.getLogger(__name__)


# -----------------------------------
# Grid cells
# -----------------------------------
@dataclass(frozen=True)
class AblationCell:
    name: str
    overrides: Dict[str, Any] = field(default_factory=dict)
    stages: str = "123"
    scorer: str = "head"


_NO_TRIPLET = {"training": {"beta": 0.0}}
_NO_EVIDENCE = {"training": {"beta": 0.0}, "selection": {"mode": "all"}}
_NO_ALL = {"training": {"beta": 0.0}, "selection": {"mode": "all"}, "pseudo": {"mode": "noise"}}

CELLS: Dict[str, AblationCell] = {
    "full": AblationCell("full"),
    "no_triplet": AblationCell("no_triplet", _NO_TRIPLET),
    "no_evidence": AblationCell("no_evidence", _NO_EVIDENCE),
    "no_all": AblationCell("no_all", _NO_ALL),
    "topk": AblationCell("topk", {"selection": {"mode": "topk"}}),
    # optional cells
    "nf_scorer": AblationCell("nf_scorer", stages="12", scorer="flow"),
    "nf_scorer_no_triplet": AblationCell("nf_scorer_no_triplet", _NO_TRIPLET, stages="12", scorer="flow"),
    "no_gcn": AblationCell("no_gcn", {"encoder": {"use_graphs": False}}),
}

DEFAULT_CELLS = ("full", "no_triplet", "no_evidence", "no_all", "topk")

METRIC_COLUMNS = [
    "overall_auc_roc", "overall_auc_pr",
    "unseen_auc_roc", "unseen_auc_pr",
    "seen_auc_roc", "seen_auc_pr",
]


def resolve_cells(names: Optional[Sequence[str]]) -> List[AblationCell]:
    names = list(names) if names else list(DEFAULT_CELLS)
    unknown = [n for n in names if n not in CELLS]
    if unknown:
        raise ConfigError(f"unknown ablation cells {unknown}; choose from {sorted(CELLS)}")
    return [CELLS[n] for n in names]


# -----------------------------------
# Runs
# -----------------------------------
def run_cell(bags: Sequence[Bag], raw_config: Dict[str, Any], cell: AblationCell, seed: int) -> Dict[str, Any]:
    """
    Train and evaluate one (cell, seed). The split comes only from the seed and the
    split section, so every cell sees the same train/test bags for a given seed.
    """
    config = build_config(deep_merge(raw_config, cell.overrides), seed)
    result = run_training(bags, config, stages=cell.stages)
    seen = sorted(result.data.split.seen_classes)
    report = evaluate_detector(result.detector, result.data.split.test, seen, config, cell.scorer)
    row: Dict[str, Any] = {"cell": cell.name, "seed": seed}
    for group in ("overall", "unseen", "seen"):
        pair = getattr(report.summary, group)
        row[f"{group}_auc_roc"] = np.nan if pair is None else pair.auc_roc
        row[f"{group}_auc_pr"] = np.nan if pair is None else pair.auc_pr
    logger.info("Ablation %s seed %d: overall AUC-ROC %.4f", cell.name, seed, row["overall_auc_roc"])
    return row


def run_ablation(
    bags: Sequence[Bag],
    raw_config: Dict[str, Any],
    seeds: Sequence[int],
    cells: Optional[Sequence[str]] = None,
    jobs: int = 1,
) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Returns (one row per cell and seed, per-cell medians in grid order)."""
    grid = resolve_cells(cells)
    tasks = [(cell, seed) for cell in grid for seed in seeds]
    rows = Parallel(n_jobs=jobs)(delayed(run_cell)(bags, raw_config, cell, seed) for cell, seed in tasks)
    runs = pd.DataFrame(rows, columns=["cell", "seed"] + METRIC_COLUMNS)
    summary = (
        runs.groupby("cell", sort=False)[METRIC_COLUMNS]
        .median()
        .reindex([c.name for c in grid])
        .reset_index()
    )
    summary.insert(1, "n_seeds", len(seeds))
    return runs, summary


def write_ablation(runs: pd.DataFrame, summary: pd.DataFrame, out_dir: Path) -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        runs_path = out_dir / "ablation_runs.csv"
        summary_path = out_dir / "ablation.csv"
        runs.to_csv(runs_path, index=False)
        summary.to_csv(summary_path, index=False)
    except OSError as e:
        raise StorageError(f"Cannot write ablation tables to {out_dir}: {e}") from e
    return runs_path, summary_path
