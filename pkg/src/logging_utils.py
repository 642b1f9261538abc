"""
Logging setup for the command-line entry point
"""

import logging
import os
from typing import Optional

from dotenv import load_dotenv

LOG_LEVEL_ENV = "VIOLENCE_SENTINEL_LOG_LEVEL"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: Optional[str] = None) -> int:
    """
    Configure the root logger once.

    Args:
        level: Explicit level name; falls back to the environment (and `.env`), then INFO

    Returns:
        The numeric level that was applied
    """
    load_dotenv()
    name = (level or os.getenv(LOG_LEVEL_ENV) or "INFO").upper()
    numeric = logging.getLevelName(name)
    if not isinstance(numeric, int):
        numeric = logging.INFO

    root = logging.getLogger()
    if not any(getattr(h, "_sentinel", False) for h in root.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._sentinel = True
        root.addHandler(handler)
    root.setLevel(numeric)
    return numeric
