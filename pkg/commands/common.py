# commands/common.py
import functools
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import click

from errors import ConfigError
from schemas import ExperimentConfig, RunSpec
from services.data_service import Bag, load_feature_bags
from settings import build_config, deep_merge, load_raw_config, output_root, write_resolved_config
from utils.seeding import stream

logger = logging.getLogger(__name__)


def run_options(fn):
    """--config / --seed / --out, shared by every command."""

    @click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                  help="TOML config file; omitted sections take their defaults.")
    @click.option("--seed", type=int, default=None, help="Overrides the config seed.")
    @click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
                  help="Output directory (default: $VAD_OUTPUT_ROOT/<command>).")
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        return fn(*args, **kwargs)

    return wrapper


def data_option(fn):
    return click.option("--data", "manifest", type=click.Path(dir_okay=False), default=None,
                        help="Dataset manifest.json (overrides [data].manifest).")(fn)


def prepare_run(
    command: str,
    config_path: Optional[str],
    seed: Optional[int],
    out_dir: Optional[str],
    manifest: Optional[str] = None,
) -> Tuple[ExperimentConfig, Path, Dict[str, Any]]:
    """Resolve the config (flags win over the file), create the output dir, echo the config there."""
    raw = load_raw_config(config_path)
    if manifest is not None:
        raw = deep_merge(raw, {"data": {"manifest": manifest}})
    config = build_config(raw, seed)
    spec = RunSpec(
        command=command,
        config_path=config_path,
        seed=config.seed,
        output_dir=str(out_dir or output_root() / command),
    )
    out = Path(spec.output_dir)
    write_resolved_config(config, out)
    logger.info("%s: seed=%d preset=%s out=%s", command, config.seed, config.preset, out)
    return config, out, raw


def load_bags(config: ExperimentConfig) -> List[Bag]:
    if not config.data.manifest:
        raise ConfigError("no dataset: pass --data or set [data].manifest")
    return load_feature_bags(config.data.manifest, config.data.bag_size, stream(config.seed, "ingest"))
