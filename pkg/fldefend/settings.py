"""
Process settings for the simulator.

Values come from the environment (optionally a .env file). Experiment
parameters live in YAML config files instead, see fldefend.config.
"""

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


@dataclass(frozen=True)
class Settings:
    output_dir: Path
    log_level: str
    workers: int


def load_settings(env_file: Optional[str] = None) -> Settings:
    """Load settings from the environment, reading .env first if present."""
    load_dotenv(env_file)

    output_dir = Path(os.getenv("FLDEFEND_OUTPUT_DIR", "runs"))
    log_level = os.getenv("FLDEFEND_LOG_LEVEL", "INFO").upper()
    workers_raw = os.getenv("FLDEFEND_WORKERS", "1")
    try:
        workers = int(workers_raw)
    except ValueError:
        print(f"Warning: FLDEFEND_WORKERS={workers_raw!r} is not an integer, using 1")
        workers = 1
    return Settings(output_dir=output_dir, log_level=log_level, workers=max(1, workers))


def configure_logging(level: str = "INFO") -> None:
    """Attach a single stream handler to the package logger."""
    package = logging.getLogger("fldefend")
    for handler in list(package.handlers):
        package.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    package.addHandler(handler)
    package.setLevel(getattr(logging, level.upper(), logging.INFO))
