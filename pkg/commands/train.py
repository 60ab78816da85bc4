# commands/train.py
import click

from commands.common import data_option, load_bags, prepare_run, run_options
from commands.run_logger import RunLogger
from services.pipeline_service import STAGE_CHOICES, run_training


@click.command("train")
@run_options
@data_option
@click.option("--stages", type=click.Choice(STAGE_CHOICES), default="123", show_default=True,
              help="Run stage 1, stages 1-2, or all three.")
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Stage checkpoint to continue from.")
def train_command(config_path, seed, out_dir, manifest, stages, resume):
    """Three-stage training; writes stage<k>.ckpt and train_log.jsonl."""
    config, out, _ = prepare_run("train", config_path, seed, out_dir, manifest)
    bags = load_bags(config)
    sink = RunLogger(out / "train_log.jsonl", append=resume is not None)
    result = run_training(bags, config, stages=stages, out_dir=out, resume=resume, on_record=sink)
    split = result.data.split
    click.echo(
        f"stages done: {result.completed_stage}  seen={sorted(split.seen_classes)} "
        f"unseen={sorted(split.unseen_classes)}  train={len(result.data.fit)} val={len(result.data.val)} "
        f"test={len(split.test)}  records={sink.count}"
    )
    for path in result.checkpoints:
        click.echo(f"checkpoint: {path}")
