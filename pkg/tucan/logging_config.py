"""Logging for tucan runs: a detailed run log plus short progress lines on the console."""
from __future__ import annotations

import logging
import sys
from pathlib import Path
from typing import Mapping, Optional

# Between INFO (20) and WARNING (30)
PROGRESS = 25
logging.addLevelName(PROGRESS, "PROGRESS")

RUN_LOG_FORMAT = "%(asctime)s | %(levelname)-8s | %(name)s | %(message)s"
CONSOLE_FORMAT = "[TUCaN] %(message)s"
BANNER_WIDTH = 80


class _ProgressOnly(logging.Filter):
    """Pass PROGRESS records when ``keep`` is true, everything else otherwise."""

    def __init__(self, keep: bool) -> None:
        super().__init__()
        self._keep = keep

    def filter(self, record: logging.LogRecord) -> bool:
        return (record.levelno == PROGRESS) == self._keep


def _progress(self: logging.Logger, message: str, *args, **kwargs) -> None:
    if self.isEnabledFor(PROGRESS):
        self._log(PROGRESS, message, args, **kwargs)


logging.Logger.progress = _progress  # type: ignore[attr-defined]


def setup_logging(log_file_path: Optional[Path] = None, console_level: int = PROGRESS) -> None:
    """Route INFO and above to ``log_file_path`` and PROGRESS lines to stdout.

    Calling it again replaces the handlers of the previous call, so each CLI
    run writes to its own ``logs/run.log``.
    """
    root = logging.getLogger()
    root.setLevel(logging.DEBUG)
    for handler in list(root.handlers):
        handler.close()
        root.removeHandler(handler)

    if log_file_path is not None:
        log_file_path.parent.mkdir(parents=True, exist_ok=True)
        run_log = logging.FileHandler(log_file_path, mode="a", encoding="utf-8")
        run_log.setLevel(logging.INFO)
        run_log.setFormatter(logging.Formatter(RUN_LOG_FORMAT, datefmt="%Y-%m-%d %H:%M:%S"))
        run_log.addFilter(_ProgressOnly(keep=False))
        root.addHandler(run_log)

    console = logging.StreamHandler(sys.stdout)
    console.setLevel(console_level)
    console.setFormatter(logging.Formatter(CONSOLE_FORMAT))
    console.addFilter(_ProgressOnly(keep=True))
    root.addHandler(console)


def get_logger(name: str) -> logging.Logger:
    return logging.getLogger(name)


def log_section(logger: logging.Logger, title: str, fields: Optional[Mapping[str, object]] = None) -> None:
    """Banner block with one aligned line per field."""
    logger.info("=" * BANNER_WIDTH)
    logger.info(title)
    if fields:
        logger.info("-" * BANNER_WIDTH)
        width = max(len(name) for name in fields)
        for name, value in fields.items():
            logger.info("  %-*s %s", width, f"{name}:", value)
    logger.info("=" * BANNER_WIDTH)
