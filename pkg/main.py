import logging
import os

import click
from dotenv import load_dotenv

from commands.ablate import ablate_command
from commands.evaluate import curves_command, eval_command, score_command
from commands.synth import synth_command
from commands.train import train_command
from errors import VadError, exit_code_for

load_dotenv()
logging.basicConfig(
    level=os.getenv("VAD_LOG_LEVEL", "INFO").upper(),
    format="%(asctime)s %(levelname)s %(name)s: %(message)s",
)


class VadGroup(click.Group):
    """Turns package errors into a one-line message and a distinct exit code."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (VadError, OSError) as e:
            logging.getLogger("vad").debug("command failed", exc_info=True)
            click.echo(f"Error: {e}", err=True)
            ctx.exit(exit_code_for(e))


@click.group(cls=VadGroup)
@click.version_option("0.1.0", prog_name="vad")
def cli():
    """Open-set weakly supervised video anomaly detection."""


# ----------------------------------------------------------
# Commands
# ----------------------------------------------------------
cli.add_command(synth_command)
cli.add_command(train_command)
cli.add_command(eval_command)
cli.add_command(score_command)
cli.add_command(ablate_command)
cli.add_command(curves_command)


if __name__ == "__main__":
    cli()
