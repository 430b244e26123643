"""
Shared utility functions for the segmentation kit.
"""

import hashlib
import logging
import os

import numpy as np

logger = logging.getLogger(__name__)

IGNORE_INDEX = 255
THREADS_ENV = "MSF_THREADS"


def setup_logging(verbose: bool = False):
    """Configure logging for a CLI run."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s [%(levelname)s] %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )


def worker_threads() -> int:
    """Number of data-loading threads allowed by MSF_THREADS (default 1)."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        logger.warning(f"Ignoring {THREADS_ENV}={raw!r}: not an integer, using 1")
        return 1
    return max(1, n)


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for a (seed, key...) tuple, stable across runs and threads."""
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def file_digest(path) -> str:
    """Short sha256 of a file's bytes, used to compare artifacts across runs."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def format_count(n: int) -> str:
    """Format large op/parameter counts with K/M/G suffixes."""
    if n >= 1_000_000_000:
        return f"{n / 1_000_000_000:.1f}G"
    if n >= 1_000_000:
        return f"{n / 1_000_000:.1f}M"
    if n >= 1_000:
        return f"{n / 1_000:.1f}K"
    return str(n)


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0
