# commands/ablate.py
import click

from commands.common import data_option, load_bags, prepare_run, run_options
from services.ablation_service import CELLS, DEFAULT_CELLS, run_ablation, write_ablation


@click.command("ablate")
@run_options
@data_option
@click.option("--seeds", type=click.IntRange(min=1), default=5, show_default=True,
              help="Number of seeds, counted up from the config seed.")
@click.option("--jobs", type=int, default=1, show_default=True, help="Parallel cells (joblib).")
@click.option("--cells", default=",".join(DEFAULT_CELLS), show_default=True,
              help=f"Comma-separated subset of: {', '.join(CELLS)}.")
def ablate_command(config_path, seed, out_dir, manifest, seeds, jobs, cells):
    """Component ablation grid; writes per-run and median tables as CSV."""
    config, out, raw = prepare_run("ablate", config_path, seed, out_dir, manifest)
    bags = load_bags(config)
    seed_list = [config.seed + i for i in range(seeds)]
    names = [c.strip() for c in cells.split(",") if c.strip()]
    runs, summary = run_ablation(bags, raw, seed_list, names, jobs)
    runs_path, summary_path = write_ablation(runs, summary, out)
    click.echo(summary.to_string(index=False))
    click.echo(f"table: {summary_path}\nruns: {runs_path}")
