# commands/run_logger.py
import logging
from datetime import datetime
from pathlib import Path

from schemas import TrainRecord


class RunLogger:
    """
    Appends one JSON line per TrainRecord. Only `ts` is wall-clock; everything
    else is reproducible from the config and seed.
    """

    def __init__(self, path: Path, append: bool = False):
        self.path = Path(path)
        self.count = 0
        if not append:
            try:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                self.path.write_text("", encoding="utf-8")
            except OSError as e:
                logging.exception("Failed to reset training log %s: %s", self.path, e)

    def __call__(self, record: TrainRecord) -> None:
        line = record.model_copy(update={"ts": datetime.now().isoformat(timespec="seconds")})
        try:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(line.model_dump_json() + "\n")
            self.count += 1
        except Exception as e:
            logging.exception("Failed to log training record: %s", e)


def read_log(path: Path) -> list:
    return [
        TrainRecord.model_validate_json(line)
        for line in Path(path).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
