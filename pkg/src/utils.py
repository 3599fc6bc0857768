import logging
import sys
from pathlib import Path
from typing import Union

import structlog

from src.core import Dataset, validate_dataset
from src.errors import DatasetError


def configure_logging(verbose: bool = False) -> None:
    """Render structlog events to stderr; DEBUG when ``verbose``."""
    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.dev.ConsoleRenderer(colors=False),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(logging.DEBUG if verbose else logging.INFO),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )


def load_dataset_file(path: Union[str, Path]) -> Dataset:
    """Read and validate a JSONL dataset; the file stem becomes its name."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc.strerror or exc}") from exc
    return validate_dataset(raw, name=path.stem)
