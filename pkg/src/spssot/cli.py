"""Command-line interface.

Subcommands:
    generate: Write synthetic source and target domains as CSV.
    aggregate: Turn a long-format ICU record file into a windowed tabular CSV.
    train: Train and score one method for one seed.
    experiment: Run the full method x seed grid and write the report.
    report: Re-render a written report as a text table.
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from spssot import data, evaluation
from spssot.configuration import Configuration, SyntheticSpec, read_config_file
from spssot.errors import SPSSOTError
from spssot.graph import run_experiment
from spssot.preprocess_graph import graph as preprocess_graph
from spssot.utils import configure_logging

logger = logging.getLogger(__name__)

# flag dest -> configuration key
_OVERRIDES = {
    "labeled_frac": "labeled_fraction",
    "alpha": "alpha",
    "beta": "beta",
    "lam": "lam",
    "theta_s": "theta_s",
    "members": "n_members",
    "bins": "n_bins",
    "iters": "iterations",
    "solver": "solver",
    "methods": "methods",
    "dump_plans": "dump_plans",
    "out": "out_dir",
}


def _add_training_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="key=value configuration file")
    parser.add_argument("--seed", type=int, help="run seed")
    parser.add_argument("--labeled-frac", type=float, help="labeled fraction of the target")
    parser.add_argument("--alpha", type=float, help="OT alignment weight")
    parser.add_argument("--beta", type=float, help="centroid loss weight")
    parser.add_argument("--lambda", dest="lam", type=float, help="group entropic loss weight")
    parser.add_argument("--theta-s", type=float, help="source cross-entropy weight")
    parser.add_argument("--members", type=int, help="ensemble members")
    parser.add_argument("--bins", type=int, help="hardness bins")
    parser.add_argument("--iters", type=int, help="iterations per member")
    parser.add_argument("--solver", choices=["exact", "sinkhorn"], help="coupling solver")
    parser.add_argument("--dump-plans", help="directory for coupling TSV dumps")
    parser.add_argument("--out", help="output directory")


def _config_values(args: argparse.Namespace, **extra: Any) -> dict[str, Any]:
    """Merge the configuration file with the flags that were given."""
    values: dict[str, Any] = read_config_file(args.config) if args.config else {}
    for dest, key in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            values[key] = value
    if args.seed is not None:
        values["seed"] = args.seed
        values["seeds"] = str(args.seed)
    values.update({k: v for k, v in extra.items() if v is not None})
    return values


def build_parser() -> argparse.ArgumentParser:
    """Build the argument parser with all subcommands."""
    parser = argparse.ArgumentParser(
        prog="spssot",
        description="Semi-supervised optimal transport with a self-paced ensemble.",
    )
    parser.add_argument("--log-level", default="INFO", help="logging level (default INFO)")
    commands = parser.add_subparsers(dest="command", required=True)

    generate = commands.add_parser("generate", help="write synthetic domains as CSV")
    generate.add_argument("--config", type=Path, help="file with synthetic keys")
    generate.add_argument("--seed", type=int, help="generator seed")
    generate.add_argument("--out", type=Path, required=True, help="output directory")

    aggregate = commands.add_parser("aggregate", help="window raw ICU records into a CSV")
    aggregate.add_argument("records", type=Path, help="long-format record CSV")
    aggregate.add_argument("--out", type=Path, required=True, help="output CSV")
    aggregate.add_argument("--window-hours", type=float, help="window length in hours")
    aggregate.add_argument("--horizon-hours", type=float, help="prediction horizon in hours")
    aggregate.add_argument("--max-missing-ratio", type=float, help="patient missing-ratio filter")
    aggregate.add_argument(
        "--unlabeled", action="store_true", help="write the dataset without labels"
    )

    train = commands.add_parser("train", help="train and score one method")
    _add_training_flags(train)
    train.add_argument("--method", default="spssot", help="method name (default spssot)")

    experiment = commands.add_parser("experiment", help="run the method x seed grid")
    _add_training_flags(experiment)
    experiment.add_argument("--methods", help="comma-separated methods")

    report = commands.add_parser("report", help="re-render a report.json as a table")
    report.add_argument("path", type=Path, help="report.json to render")
    return parser


def _generate(args: argparse.Namespace) -> int:
    values: dict[str, Any] = read_config_file(args.config) if args.config else {}
    if args.seed is not None:
        values["seed"] = args.seed
    source, target = data.generate_synthetic(SyntheticSpec.from_mapping(values))
    data.write_csv(source, args.out / "source.csv")
    data.write_csv(target, args.out / "target.csv")
    logger.info("Wrote %d source and %d target samples to %s", len(source), len(target), args.out)
    return 0


def _aggregate(args: argparse.Namespace) -> int:
    configurable = {
        "window_hours": args.window_hours,
        "horizon_hours": args.horizon_hours,
        "max_missing_ratio": args.max_missing_ratio,
    }
    result = asyncio.run(
        preprocess_graph.ainvoke(
            {
                "records_path": str(args.records),
                "out_path": str(args.out),
                "domain_tag": "target_unlabeled" if args.unlabeled else "source",
            },
            {"configurable": {k: v for k, v in configurable.items() if v is not None}},
        )
    )
    logger.info("Wrote %d windows to %s", result["rows_written"], args.out)
    return 0


def _train(args: argparse.Namespace) -> int:
    values = _config_values(args, methods=args.method)
    configuration = Configuration.from_mapping(values)
    domains = evaluation.load_domains(configuration, SyntheticSpec.from_mapping(values))
    result = evaluation.run_cell(
        args.method,
        configuration.parse_label_fractions()[0],
        configuration.parse_seeds()[0],
        domains,
        configuration,
    )
    report = evaluation.summarize([result], configuration, [args.method])
    report.write(configuration.out_dir)
    sys.stdout.write(report.render_table())
    return 0 if result.error is None else 1


def _experiment(args: argparse.Namespace) -> int:
    values = _config_values(args)
    report = run_experiment(None, **values)
    sys.stdout.write(report.render_table())
    if report.failures:
        logger.error("%d of %d runs failed", len(report.failures), len(report.cells))
        return 1
    return 0


def _report(args: argparse.Namespace) -> int:
    sys.stdout.write(evaluation.ExperimentReport.read(args.path).render_table())
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the command line and return its exit status."""
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    handlers = {
        "generate": _generate,
        "aggregate": _aggregate,
        "train": _train,
        "experiment": _experiment,
        "report": _report,
    }
    try:
        return handlers[args.command](args)
    except (SPSSOTError, OSError) as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
