import copy
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, Optional

from pydantic import ValidationError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from errors import ConfigError, StorageError
from schemas import PRESETS, ExperimentConfig
from utils.hashing import config_hash

logger = logging.getLogger(__name__)

# ----------------------------------------------------------
# Environment
# ----------------------------------------------------------
def output_root() -> Path:
    return Path(os.getenv("VAD_OUTPUT_ROOT", "runs"))


def progress_enabled() -> bool:
    return os.getenv("VAD_PROGRESS", "1").strip().lower() not in ("0", "false", "no", "off")


# ----------------------------------------------------------
# Config files (TOML, sections mirror the service modules)
# ----------------------------------------------------------
def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def build_config(raw: Optional[Dict[str, Any]] = None, seed: Optional[int] = None) -> ExperimentConfig:
    """
    Resolve a raw mapping into an ExperimentConfig.
    Preset values act as defaults; explicit keys in `raw` win; `seed` wins over both.
    """
    raw = dict(raw or {})
    preset = raw.get("preset", "synthetic")
    if preset not in PRESETS:
        raise ConfigError(f"Unknown preset {preset!r}. Choose one of {sorted(PRESETS)}.")
    merged = deep_merge(PRESETS[preset], raw)
    if seed is not None:
        merged["seed"] = int(seed)
    try:
        return ExperimentConfig.model_validate(merged)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first.get("loc", ()))
        raise ConfigError(f"Invalid config at '{where}': {first.get('msg')}") from e


def load_raw_config(path: Optional[str]) -> Dict[str, Any]:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"Config file not found: {p}")
    try:
        with p.open("rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Config file {p} is not valid TOML: {e}") from e
    return raw


def load_config(path: Optional[str], seed: Optional[int] = None) -> ExperimentConfig:
    return build_config(load_raw_config(path), seed)


def hash_of(config: ExperimentConfig) -> str:
    return config_hash(config.model_dump(mode="json"))


def write_resolved_config(config: ExperimentConfig, out_dir: Path) -> Path:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        out = out_dir / "resolved_config.json"
        out.write_text(config.model_dump_json(indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise StorageError(f"Cannot write to output directory {out_dir}: {e}") from e
    logger.info("Resolved config written to %s", out)
    return out
