# commands/evaluate.py
from typing import List

import click
import pandas as pd

from commands.common import data_option, load_bags, prepare_run, run_options
from errors import ContractError, StorageError
from services.data_service import Bag
from services.eval_service import plot_curves, write_curves, write_report
from services.pipeline_service import evaluate_detector, load_detector, prepare_experiment, score_bags

SPLITS = ("test", "train", "all")


def _checkpoint_option(fn):
    return click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True,
                        help="stage<k>.ckpt written by `train` with the same config.")(fn)


def _split_option(default: str):
    return click.option("--split", "which", type=click.Choice(SPLITS), default=default, show_default=True)


def _scorer_option(fn):
    return click.option("--scorer", type=click.Choice(["head", "flow"]), default="head", show_default=True,
                        help="Evidential head (default) or negative flow log-density.")(fn)


def _load(command, config_path, seed, out_dir, manifest, checkpoint, which):
    config, out, _ = prepare_run(command, config_path, seed, out_dir, manifest)
    detector, meta = load_detector(checkpoint, config)
    bags = load_bags(config)
    data = prepare_experiment(bags, config)
    test_ids = [b.id for b in data.split.test]
    if "test_ids" in meta and meta["test_ids"] != test_ids:
        raise ContractError(f"{checkpoint}: the dataset splits differently from the one it was trained on")
    chosen: List[Bag] = {"test": data.split.test, "train": data.split.train, "all": bags}[which]
    seen = meta.get("seen_classes", sorted(data.split.seen_classes))
    return config, out, detector, chosen, seen


@click.command("eval")
@run_options
@data_option
@_checkpoint_option
@_split_option("test")
@_scorer_option
def eval_command(config_path, seed, out_dir, manifest, checkpoint, which, scorer):
    """Open-set report: overall, unseen-vs-normal and seen-vs-normal AUC-ROC / AUC-PR."""
    config, out, detector, bags, seen = _load("eval", config_path, seed, out_dir, manifest, checkpoint, which)
    report = evaluate_detector(detector, bags, seen, config, scorer)
    path = write_report(report, out)
    click.echo(report.summary.model_dump_json(indent=2))
    click.echo(f"report: {path}")


@click.command("score")
@run_options
@data_option
@_checkpoint_option
@_split_option("all")
def score_command(config_path, seed, out_dir, manifest, checkpoint, which):
    """Per-instance anomaly score and vacuity for every bag -> scores.csv."""
    config, out, detector, bags, _ = _load("score", config_path, seed, out_dir, manifest, checkpoint, which)
    frames = [
        pd.DataFrame({"bag_id": bag_id, "instance": range(len(s)), "score": s, "u": u})
        for bag_id, (s, u) in score_bags(bags, detector, config).items()
    ]
    table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=["bag_id", "instance", "score", "u"])
    path = out / "scores.csv"
    try:
        table.to_csv(path, index=False)
    except OSError as e:
        raise StorageError(f"Cannot write {path}: {e}") from e
    click.echo(f"{len(table)} instance scores -> {path}")


@click.command("curves")
@run_options
@data_option
@_checkpoint_option
@_split_option("test")
@_scorer_option
@click.option("--plot", is_flag=True, help="Also render roc.png and pr.png.")
def curves_command(config_path, seed, out_dir, manifest, checkpoint, which, scorer, plot):
    """ROC and PR curve points (threshold,x,y) as CSV."""
    config, out, detector, bags, seen = _load("curves", config_path, seed, out_dir, manifest, checkpoint, which)
    report = evaluate_detector(detector, bags, seen, config, scorer)
    for path in write_curves(report, out):
        click.echo(f"curve: {path}")
    if plot:
        for path in plot_curves(report, out):
            click.echo(f"plot: {path}")
