import logging
import os

from dotenv import load_dotenv

load_dotenv(override=True)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def max_workers() -> int:
    """Worker-process cap for sweep, surface and tensor fan-out."""
    raw = os.environ.get("ABMLENS_MAX_WORKERS", "1")
    try:
        workers = int(raw)
    except ValueError:
        raise RuntimeError(f"ABMLENS_MAX_WORKERS must be an integer, got {raw!r}")
    if workers < 1:
        raise RuntimeError(f"ABMLENS_MAX_WORKERS must be >= 1, got {workers}")
    return workers


def configure_logging() -> None:
    level = os.environ.get("ABMLENS_LOG_LEVEL", "INFO").upper()
    if level not in logging.getLevelNamesMapping():
        raise RuntimeError(f"ABMLENS_LOG_LEVEL is not a logging level: {level!r}")

    handlers: list[logging.Handler] = [logging.StreamHandler()]
    log_file = os.environ.get("ABMLENS_LOG_FILE", "abmlens.log")
    if log_file:
        handlers.insert(0, logging.FileHandler(log_file))

    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)
