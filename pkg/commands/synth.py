# commands/synth.py
import click

from commands.common import prepare_run, run_options
from services.data_service import generate_synthetic, write_dataset
from utils.seeding import stream


@click.command("synth")
@run_options
def synth_command(config_path, seed, out_dir):
    """Generate a synthetic bag dataset (feature files + manifest.json)."""
    config, out, _ = prepare_run("synth", config_path, seed, out_dir)
    bags = generate_synthetic(config.synth, stream(config.seed, "synth"))
    manifest = write_dataset(bags, out)
    n_pos = sum(b.bag_label for b in bags)
    click.echo(f"{len(bags)} bags ({n_pos} positive) -> {manifest}")
