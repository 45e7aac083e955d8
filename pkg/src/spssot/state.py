"""State management for the experiment and preprocessing graphs.

Classes:
    PreprocessState: Paths and intermediate results of raw-record aggregation.
    InputState: The narrow input of the experiment graph.
    ExperimentState: Loaded domains, the planned cells and their merged results.
    CellState: The payload sent to each (method, labeled fraction, seed) run.

Functions:
    add_results: Merge cell results produced by parallel runs.
"""

from dataclasses import dataclass, field
from typing import Annotated, Optional, Sequence

from spssot.data import DomainTag, RawRecordSeries, WindowSample
from spssot.evaluation import CellResult, DomainPair, ExperimentReport

############################  Preprocessing State  ############################


@dataclass(kw_only=True)
class PreprocessState:
    """Represents the state of raw-record aggregation."""

    records_path: str
    """Long-format record CSV to read."""

    out_path: str
    """Where the windowed tabular CSV is written."""

    domain_tag: DomainTag = "source"
    """Tag of the written dataset; `target_unlabeled` drops labels."""

    series: list[RawRecordSeries] = field(default_factory=list)
    """Patients that passed the missing-ratio filter."""

    samples: list[WindowSample] = field(default_factory=list)
    feature_names: list[str] = field(default_factory=list)

    rows_written: int = 0


############################  Experiment State  ###############################


def add_results(existing: Sequence[CellResult], new: Sequence[CellResult]) -> list[CellResult]:
    """Combine existing cell results with new ones.

    Args:
        existing (Sequence[CellResult]): The results already in the state.
        new (Sequence[CellResult]): Results returned by a finished run.

    Returns:
        list[CellResult]: All results; ordering is fixed later by `summarize`.
    """
    return list(existing) + list(new)


@dataclass(kw_only=True)
class InputState:
    """Represents the input of the experiment graph.

    Everything else comes from the `configurable` section of the run config.
    """

    out_dir: str = ""
    """Directory for the report; empty means the configured `out_dir`."""


@dataclass(kw_only=True)
class ExperimentState(InputState):
    """The state of the experiment graph."""

    domains: Optional[DomainPair] = None
    """Full source and target domains, loaded once and shared read-only by every run."""

    cells: list[tuple[str, float, int]] = field(default_factory=list)
    """Planned (method, labeled fraction, seed) runs."""

    results: Annotated[list[CellResult], add_results] = field(default_factory=list)

    report: Optional[ExperimentReport] = None
    report_path: str = ""


@dataclass(kw_only=True)
class CellState:
    """One run sent to `run_cell`."""

    method: str
    labeled_fraction: float
    seed: int
    domains: DomainPair
