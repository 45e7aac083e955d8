"""Exception types raised across the package.

Every error derives from `SPSSOTError`. Validation problems also derive from
`ValueError` and numerical/training failures from `RuntimeError`, so callers can
catch them either way.
"""

from __future__ import annotations

from typing import Any, Optional


class SPSSOTError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SPSSOTError, ValueError):
    """A configuration key is unknown or its value cannot be parsed."""

    def __init__(self, key: str, message: str) -> None:
        super().__init__(f"{key}: {message}")
        self.key = key


class SchemaError(SPSSOTError, ValueError):
    """A CSV header does not match the declared schema."""


class ParseError(SPSSOTError, ValueError):
    """A CSV row could not be parsed."""

    def __init__(self, line: int, message: str) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


class LabelValidationError(SPSSOTError, ValueError):
    """A label is outside {0, 1}."""


class OrderingError(SPSSOTError, ValueError):
    """Timestamps of a record series are not strictly ascending."""


class StratificationError(SPSSOTError, ValueError):
    """A stratified split could not keep both classes in every part."""


class DimensionError(SPSSOTError, ValueError):
    """Array shapes are inconsistent."""


class ProbabilityRangeError(SPSSOTError, ValueError):
    """A probability lies outside [0, 1]."""


class NormalizationError(SPSSOTError, ValueError):
    """Marginals do not sum to one."""


class DegenerateClassError(SPSSOTError, ValueError):
    """A class has no members where at least one is required."""


class SamplingInfeasibleError(SPSSOTError, ValueError):
    """More samples were requested than the population holds."""


class DegeneratePoolError(SPSSOTError, ValueError):
    """A labeled pool contains a single class."""


class UndefinedMetricError(SPSSOTError, ValueError):
    """A metric is undefined for the given labels."""


class CheckpointFormatError(SPSSOTError, ValueError):
    """A checkpoint file is malformed or of an unsupported version."""


class StaleCacheError(SPSSOTError, RuntimeError):
    """A forward cache was produced by different parameters than the ones given."""


class IterationLimitError(SPSSOTError, RuntimeError):
    """An iterative solver did not reach its tolerance."""

    def __init__(self, iterations: int, residual: float) -> None:
        super().__init__(
            f"no convergence after {iterations} iterations (marginal residual {residual:.3e})"
        )
        self.iterations = iterations
        self.residual = residual


class DiagnosticsError(SPSSOTError, RuntimeError):
    """A loss term evaluated to a non-finite value."""

    def __init__(self, term: str, value: float) -> None:
        super().__init__(f"loss term {term!r} is not finite ({value})")
        self.term = term
        self.value = value


class TrainingDivergenceError(SPSSOTError, RuntimeError):
    """Training produced non-finite gradients or losses.

    `last_good` holds the most recent parameters that were still finite, when known.
    """

    def __init__(
        self, message: str, *, term: Optional[str] = None, last_good: Any = None
    ) -> None:
        super().__init__(message)
        self.term = term
        self.last_good = last_good
