"""This "graph" turns a long-format ICU record file into a windowed tabular CSV."""

from typing import Any, Optional

from langchain_core.runnables import RunnableConfig
from langgraph.graph import StateGraph

from spssot import data
from spssot.configuration import PreprocessConfiguration
from spssot.errors import DimensionError
from spssot.state import PreprocessState


async def load_records(
    state: PreprocessState, *, config: Optional[RunnableConfig] = None
) -> dict[str, Any]:
    """Read the record file and drop patients with too many missing cells.

    Args:
        state (PreprocessState): Holds the record file path.
        config (Optional[RunnableConfig]): Carries the `PreprocessConfiguration`.
    """
    configuration = PreprocessConfiguration.from_runnable_config(config)
    series = data.load_records(
        state.records_path,
        configuration.parse_indicator_names(),
        configuration.parse_demographic_names(),
    )
    return {"series": data.filter_patients(series, configuration.max_missing_ratio)}


async def aggregate_records(
    state: PreprocessState, *, config: Optional[RunnableConfig] = None
) -> dict[str, Any]:
    """Aggregate every kept patient into window samples."""
    configuration = PreprocessConfiguration.from_runnable_config(config)
    if not state.series:
        raise DimensionError(f"{state.records_path}: no patient passed the missing-ratio filter")
    first = state.series[0]
    samples = [
        sample
        for series in state.series
        for sample in data.aggregate_windows(
            series,
            window_hours=configuration.window_hours,
            horizon_hours=configuration.horizon_hours,
            max_hours=configuration.max_hours,
        )
    ]
    names = data.window_feature_names(first.indicator_names, first.demographic_names)
    return {"samples": samples, "feature_names": names}


async def write_dataset(
    state: PreprocessState, *, config: Optional[RunnableConfig] = None
) -> dict[str, Any]:
    """Assemble and write the dataset, then clear the intermediates from the state."""
    dataset = data.windows_to_dataset(state.samples, state.feature_names, state.domain_tag)
    data.write_csv(dataset, state.out_path)
    return {"rows_written": len(dataset), "series": [], "samples": []}


builder = StateGraph(PreprocessState, config_schema=PreprocessConfiguration)
builder.add_node(load_records)
builder.add_node(aggregate_records)
builder.add_node(write_dataset)
builder.add_edge("__start__", "load_records")
builder.add_edge("load_records", "aggregate_records")
builder.add_edge("aggregate_records", "write_dataset")

graph = builder.compile()
graph.name = "PreprocessGraph"
