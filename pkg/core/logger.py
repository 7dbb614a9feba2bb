import logging
import os
from contextlib import contextmanager
from logging.handlers import RotatingFileHandler
from pathlib import Path

LOG_DIR = Path(os.environ.get("SMR_LOG_DIR") or Path(__file__).resolve().parent.parent / "logs")
LOG_DIR.mkdir(parents=True, exist_ok=True)
LOG_FILE = LOG_DIR / "app.log"

_level = getattr(logging, os.environ.get("SMR_LOG_LEVEL", "INFO").upper(), logging.INFO)

_formatter = logging.Formatter(
    fmt="%(asctime)s [%(levelname)s] %(name)s:%(lineno)d | %(message)s",
    datefmt="%Y-%m-%d %H:%M:%S"
)

_file = RotatingFileHandler(LOG_FILE, maxBytes=5_000_000, backupCount=5, encoding="utf-8")
_file.setFormatter(_formatter)
_file.setLevel(_level)

_console = logging.StreamHandler()
_console.setFormatter(_formatter)
_console.setLevel(_level)

logger = logging.getLogger("smrecovery")
logger.setLevel(_level)
if not logger.handlers:
    logger.addHandler(_file)
    logger.addHandler(_console)
logger.propagate = False


@contextmanager
def run_log(run_dir):
    """Mirror everything logged inside the block into <run_dir>/run.log."""
    handler = logging.FileHandler(Path(run_dir) / "run.log", encoding="utf-8")
    handler.setFormatter(_formatter)
    handler.setLevel(_level)
    logger.addHandler(handler)
    try:
        yield handler
    finally:
        logger.removeHandler(handler)
        handler.close()
