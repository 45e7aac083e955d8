"""Main entrypoint for the experiment graph.

The graph loads both domains once, fans out one run per (method, labeled
fraction, seed), merges the scored results and writes the report.
"""

import asyncio
from pathlib import Path
from typing import Any, Union

from langchain_core.runnables import RunnableConfig
from langgraph.graph import StateGraph
from langgraph.types import Send

from spssot import evaluation
from spssot.configuration import Configuration, SyntheticSpec, read_config_file
from spssot.evaluation import CellResult, ExperimentReport
from spssot.state import CellState, ExperimentState, InputState


async def prepare_data(state: ExperimentState, *, config: RunnableConfig) -> dict[str, Any]:
    """Load the configured domains and plan the runs.

    Args:
        state (ExperimentState): The current state.
        config (RunnableConfig): Carries the experiment configuration under `configurable`.

    Returns:
        dict[str, Any]: The loaded domains and the planned (method, fraction, seed) cells.
    """
    configuration = Configuration.from_runnable_config(config)
    synthetic = SyntheticSpec.from_runnable_config(config)
    domains = await asyncio.to_thread(evaluation.load_domains, configuration, synthetic)
    cells = [
        (method, fraction, seed)
        for fraction in configuration.parse_label_fractions()
        for method in configuration.parse_methods()
        for seed in configuration.parse_seeds()
    ]
    return {"domains": domains, "cells": cells}


def fan_out(state: ExperimentState) -> list[Send]:
    """Send every planned cell to its own `run_cell` invocation."""
    assert state.domains is not None
    return [
        Send(
            "run_cell",
            CellState(method=method, labeled_fraction=fraction, seed=seed, domains=state.domains),
        )
        for method, fraction, seed in state.cells
    ]


async def run_cell(state: CellState, *, config: RunnableConfig) -> dict[str, list[CellResult]]:
    """Train and score one method for one seed in a worker thread."""
    configuration = Configuration.from_runnable_config(config)
    result = await asyncio.to_thread(
        evaluation.run_cell,
        state.method,
        state.labeled_fraction,
        state.seed,
        state.domains,
        configuration,
    )
    return {"results": [result]}


async def summarize(state: ExperimentState, *, config: RunnableConfig) -> dict[str, ExperimentReport]:
    """Aggregate the merged cell results into the report."""
    configuration = Configuration.from_runnable_config(config)
    report = evaluation.summarize(state.results, configuration, configuration.parse_methods())
    return {"report": report}


async def write_report(state: ExperimentState, *, config: RunnableConfig) -> dict[str, str]:
    """Write the JSON report and its text table."""
    configuration = Configuration.from_runnable_config(config)
    assert state.report is not None
    path = state.report.write(state.out_dir or configuration.out_dir)
    return {"report_path": str(path)}


builder = StateGraph(ExperimentState, input=InputState, config_schema=Configuration)

builder.add_node(prepare_data)
builder.add_node(run_cell)
builder.add_node(summarize)
builder.add_node(write_report)
builder.add_edge("__start__", "prepare_data")
builder.add_conditional_edges("prepare_data", fan_out, ["run_cell"])
builder.add_edge("run_cell", "summarize")
builder.add_edge("summarize", "write_report")

graph = builder.compile()
graph.name = "ExperimentGraph"


async def arun_experiment(
    config_path: Union[str, Path, None] = None, **overrides: Any
) -> ExperimentReport:
    """Run the experiment graph on a configuration file plus overrides.

    Args:
        config_path: A `key=value` configuration file, or None for the defaults.
        **overrides: Configuration values that take precedence over the file.

    Returns:
        ExperimentReport: The report, also written to the configured `out_dir`.
    """
    values: dict[str, Any] = read_config_file(config_path) if config_path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    configuration = Configuration.from_mapping(values)
    result = await graph.ainvoke(
        {"out_dir": configuration.out_dir}, {"configurable": values}
    )
    return result["report"]


def run_experiment(config_path: Union[str, Path, None] = None, **overrides: Any) -> ExperimentReport:
    """Blocking wrapper around `arun_experiment`."""
    return asyncio.run(arun_experiment(config_path, **overrides))
