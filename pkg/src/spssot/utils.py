"""Utility functions shared by the graphs and the command line.

Functions:
    configure_logging: Set up the root logger once.
    mean_and_std: Mean and sample standard deviation of run metrics.
    format_table: Render rows as an aligned text table.
"""

import logging
import math
from typing import Optional, Sequence

import numpy as np

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: str = "INFO") -> None:
    """Configure the root logger.

    Args:
        level (str): A logging level name such as "DEBUG" or "INFO".
    """
    numeric = logging.getLevelName(level.upper())
    if not isinstance(numeric, int):
        raise ValueError(f"Unknown log level {level!r}")
    logging.basicConfig(level=numeric, format=LOG_FORMAT, force=True)


def mean_and_std(values: Sequence[float]) -> tuple[Optional[float], Optional[float]]:
    """Return the mean and the unbiased (n - 1) standard deviation.

    A single value has standard deviation 0; no values give (None, None).

    Examples:
        >>> mean_and_std([1.0, 3.0])
        (2.0, 1.4142135623730951)
        >>> mean_and_std([0.8])
        (0.8, 0.0)
        >>> mean_and_std([])
        (None, None)
    """
    if not values:
        return None, None
    array = np.asarray(values, dtype=np.float64)
    mean = float(array.mean())
    std = float(array.std(ddof=1)) if len(array) > 1 else 0.0
    if not math.isfinite(mean):
        return None, None
    return mean, std


def format_table(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """Render rows as a left-aligned text table with a header rule.

    Examples:
        >>> print(format_table(["method", "auc"], [["spssot", "0.81"]]), end="")
        method  auc
        ------  ----
        spssot  0.81
    """
    widths = [len(h) for h in headers]
    for row in rows:
        widths = [max(w, len(cell)) for w, cell in zip(widths, row)]

    def line(cells: Sequence[str]) -> str:
        return "  ".join(cell.ljust(w) for cell, w in zip(cells, widths)).rstrip()

    rule = ["-" * w for w in widths]
    return "\n".join([line(headers), line(rule), *(line(r) for r in rows)]) + "\n"
