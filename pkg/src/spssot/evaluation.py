"""Metrics, baselines and experiment reports.

A method name resolves to a training recipe (`resolve_method`); `run_cell`
trains one method for one seed on one target split and scores it on the test
part; `summarize` folds cell results into an `ExperimentReport`.
"""

from __future__ import annotations

import logging
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Literal, Optional, Sequence

import msgspec
import numpy as np
from sklearn.metrics import roc_auc_score

from spssot import trainer
from spssot.configuration import Configuration, SyntheticSpec, TrainConfiguration
from spssot.data import (
    TabularDataset,
    concat,
    fit_scaler,
    generate_synthetic,
    load_csv,
    split_target,
    standardize,
    stratified_subsample,
)
from spssot.errors import (
    ConfigurationError,
    LabelValidationError,
    SPSSOTError,
    UndefinedMetricError,
)
from spssot.utils import format_table, mean_and_std

logger = logging.getLogger(__name__)

BASELINES = ("source_only", "target_only", "train_together")
SSOT_METHODS = ("spssot", "ssot", "spssot_nc", "spssot_ng")
_GRID_METHOD = re.compile(r"^spssot\[(alpha|theta_s|beta|lam)=([^\]]+)\]$")


@dataclass(frozen=True, eq=False)
class ScoredPredictions:
    """Scores of a model on labeled samples."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if scores.shape != labels.shape:
            raise ValueError(f"{scores.size} scores for {labels.size} labels")
        if not np.isin(labels, (0, 1)).all():
            raise LabelValidationError("labels must lie in {0, 1}")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)


def auc(preds: ScoredPredictions) -> float:
    """Area under the ROC curve; tied scores count one half.

    Raises:
        UndefinedMetricError: The labels hold a single class.
    """
    if len(np.unique(preds.labels)) < 2:
        raise UndefinedMetricError("AUC needs at least one positive and one negative sample")
    return float(roc_auc_score(preds.labels, preds.scores))


############################  Methods  ########################################


@dataclass(frozen=True)
class MethodRecipe:
    """How a named method trains: which pools, which objective and which settings."""

    name: str
    kind: Literal["ssot", "supervised"]
    config: TrainConfiguration
    pools: Literal["source", "target", "together", "both"] = "both"


def resolve_method(name: str, config: Configuration) -> MethodRecipe:
    """Map a method name to its training recipe.

    SSOT family: `spssot`, `ssot` (one member, no under-sampling), `spssot_nc`
    (beta = 0), `spssot_ng` (lambda = 0) and grid variants such as
    `spssot[alpha=0.1]`. Baselines: `source_only`, `target_only`,
    `train_together`, each with a `_linear` variant that has no hidden layers.
    Baselines use the self-paced ensemble unless `baseline_ensemble` is off.
    """
    train = TrainConfiguration.from_mapping(
        {f: getattr(config, f) for f in TrainConfiguration.field_names()}
    )
    match name:
        case "spssot":
            return MethodRecipe(name, "ssot", train)
        case "ssot":
            return MethodRecipe(name, "ssot", train.with_overrides(n_members=1))
        case "spssot_nc":
            return MethodRecipe(name, "ssot", train.with_overrides(beta=0.0))
        case "spssot_ng":
            return MethodRecipe(name, "ssot", train.with_overrides(lam=0.0))
    if grid := _GRID_METHOD.match(name):
        key, value = grid.groups()
        try:
            overrides = {key: float(value)}
        except ValueError as exc:
            raise ConfigurationError(f"grid_{key}", str(exc)) from exc
        return MethodRecipe(name, "ssot", train.with_overrides(**overrides))

    base = name.removesuffix("_linear")
    if base not in BASELINES:
        raise ConfigurationError(
            "methods",
            f"unknown method {name!r}; expected one of {', '.join(SSOT_METHODS + BASELINES)}",
        )
    if name.endswith("_linear"):
        train = train.with_overrides(generator_dims="", classifier_dims="")
    if not config.baseline_ensemble:
        train = train.with_overrides(n_members=1)
    pools = {"source_only": "source", "target_only": "target", "train_together": "together"}[base]
    return MethodRecipe(name, "supervised", train, pools)  # type: ignore[arg-type]


############################  Data  ###########################################


@dataclass(frozen=True, eq=False)
class DomainPair:
    """The full labeled source and target domains of an experiment."""

    source: TabularDataset
    target: TabularDataset


@dataclass(frozen=True, eq=False)
class Splits:
    """Standardized training pools and test set of one run."""

    source: TabularDataset
    target_labeled: TabularDataset
    target_unlabeled: TabularDataset
    target_test: TabularDataset


def load_domains(config: Configuration, synthetic: Optional[SyntheticSpec] = None) -> DomainPair:
    """Load the source and target domains named by the configuration."""
    match config.data_source:
        case "synthetic":
            source, target = generate_synthetic(synthetic or SyntheticSpec())
        case "csv":
            names = config.parse_feature_names() or None
            source = load_csv(config.source_csv, names, domain_tag="source")
            target = load_csv(config.target_csv, names, domain_tag="target_test")
        case _:
            raise ConfigurationError("data_source", f"unknown data source {config.data_source!r}")
    logger.info(
        "Loaded %d source and %d target samples with %d features",
        len(source),
        len(target),
        source.feature_dim,
    )
    return DomainPair(source=source, target=target)


def prepare_splits(
    domains: DomainPair, config: Configuration, labeled_fraction: float, seed: int
) -> Splits:
    """Split the target, subsample the source and z-score everything with source statistics."""
    labeled, unlabeled, test = split_target(
        domains.target, labeled_fraction, config.test_fraction, seed
    )
    source = stratified_subsample(domains.source, config.source_fraction, seed)
    scaler = fit_scaler(source)
    return Splits(
        source=standardize(source, scaler),
        target_labeled=standardize(labeled, scaler),
        target_unlabeled=standardize(unlabeled, scaler),
        target_test=standardize(test, scaler),
    )


############################  Training  #######################################


def baseline_ensemble(
    pool: TabularDataset,
    config: TrainConfiguration,
    artifacts: Optional[trainer.RunArtifacts] = None,
) -> trainer.EnsembleModel:
    """Train a supervised network, wrapped in the self-paced ensemble when n_members > 1."""

    def fit_member(
        pools: Sequence[TabularDataset], seq: np.random.SeedSequence, index: int
    ) -> trainer.SSOTModel:
        return trainer.fit_supervised(pools[0], config, np.random.default_rng(seq))

    return trainer.fit_ensemble((pool,), fit_member, config, artifacts)


def _score(model: trainer.EnsembleModel, test: TabularDataset) -> ScoredPredictions:
    assert test.labels is not None
    return ScoredPredictions(scores=trainer.predict(model, test.features), labels=test.labels)


def baseline_source_only(
    config: TrainConfiguration, splits: Splits, artifacts: Optional[trainer.RunArtifacts] = None
) -> ScoredPredictions:
    """Train on the source pool only and score the target test set."""
    return _score(baseline_ensemble(splits.source, config, artifacts), splits.target_test)


def baseline_target_only(
    config: TrainConfiguration, splits: Splits, artifacts: Optional[trainer.RunArtifacts] = None
) -> ScoredPredictions:
    """Train on the labeled target pool only and score the target test set."""
    return _score(baseline_ensemble(splits.target_labeled, config, artifacts), splits.target_test)


def baseline_train_together(
    config: TrainConfiguration, splits: Splits, artifacts: Optional[trainer.RunArtifacts] = None
) -> ScoredPredictions:
    """Train on the source and labeled target pools merged and score the target test set."""
    pool = concat([splits.source, splits.target_labeled], domain_tag="source")
    return _score(baseline_ensemble(pool, config, artifacts), splits.target_test)


def score_method(
    recipe: MethodRecipe, splits: Splits, artifacts: Optional[trainer.RunArtifacts] = None
) -> ScoredPredictions:
    """Train the model a recipe describes on one run's pools and score the target test set."""
    match recipe.pools:
        case "both":
            model = trainer.train_spssot(
                splits.source,
                splits.target_labeled,
                splits.target_unlabeled,
                recipe.config,
                artifacts,
            )
            return _score(model, splits.target_test)
        case "source":
            return baseline_source_only(recipe.config, splits, artifacts)
        case "target":
            return baseline_target_only(recipe.config, splits, artifacts)
        case "together":
            return baseline_train_together(recipe.config, splits, artifacts)
        case _:
            raise ValueError(f"{recipe.name} has unknown training pools {recipe.pools!r}")


############################  Reports  ########################################


class CellResult(msgspec.Struct, frozen=True):
    """Outcome of one (method, labeled fraction, seed) run."""

    method: str
    labeled_fraction: float
    seed: int
    auc: Optional[float] = None
    error: Optional[str] = None

    @property
    def sort_key(self) -> tuple[float, str, int]:
        return (self.labeled_fraction, self.method, self.seed)


class MethodSummary(msgspec.Struct, frozen=True):
    method: str
    labeled_fraction: float
    mean_auc: Optional[float]
    std_auc: Optional[float]
    n_runs: int
    n_failed: int


class ExperimentReport(msgspec.Struct):
    """Per-method AUC mean and standard deviation over runs, with the configuration echoed."""

    config: dict[str, Any]
    seeds: list[int]
    summaries: list[MethodSummary]
    cells: list[CellResult]

    @property
    def failures(self) -> list[CellResult]:
        return [c for c in self.cells if c.error is not None]

    def to_json(self) -> bytes:
        return msgspec.json.format(msgspec.json.encode(self, order="sorted")) + b"\n"

    def write(self, directory: str | Path) -> Path:
        """Write `report.json` and `report.txt` into `directory` and return the JSON path."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "report.json"
        path.write_bytes(self.to_json())
        (directory / "report.txt").write_text(self.render_table(), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "ExperimentReport":
        return msgspec.json.decode(Path(path).read_bytes(), type=cls)

    def render_table(self) -> str:
        """Aligned text table, one row per (labeled fraction, method)."""

        def fmt(value: Optional[float]) -> str:
            return "-" if value is None else f"{value:.4f}"

        rows = [
            [
                f"{s.labeled_fraction:g}",
                s.method,
                fmt(s.mean_auc),
                fmt(s.std_auc),
                str(s.n_runs),
                str(s.n_failed),
            ]
            for s in self.summaries
        ]
        return format_table(["labeled", "method", "auc_mean", "auc_std", "runs", "failed"], rows)


def summarize(
    cells: Sequence[CellResult], config: Configuration, methods: Sequence[str]
) -> ExperimentReport:
    """Aggregate cell results into a report; rows follow the configured method order."""
    ordered = sorted(cells, key=lambda c: c.sort_key)
    summaries = []
    for fraction in config.parse_label_fractions():
        for method in methods:
            mine = [c for c in ordered if c.method == method and c.labeled_fraction == fraction]
            aucs = [c.auc for c in mine if c.auc is not None]
            mean, std = mean_and_std(aucs)
            summaries.append(
                MethodSummary(
                    method=method,
                    labeled_fraction=fraction,
                    mean_auc=mean,
                    std_auc=std,
                    n_runs=len(aucs),
                    n_failed=len(mine) - len(aucs),
                )
            )
    return ExperimentReport(
        config=asdict(config), seeds=config.parse_seeds(), summaries=summaries, cells=ordered
    )


def run_cell(
    method: str,
    labeled_fraction: float,
    seed: int,
    domains: DomainPair,
    config: Configuration,
) -> CellResult:
    """Split, train and score one method for one seed.

    Package errors are caught and recorded on the result so one failed run
    does not abort the others.
    """
    try:
        recipe = resolve_method(method, config)
        recipe = MethodRecipe(
            recipe.name, recipe.kind, recipe.config.with_overrides(seed=seed), recipe.pools
        )
        splits = prepare_splits(domains, config, labeled_fraction, seed)
        artifacts = None
        if config.save_checkpoints:
            cell_dir = Path(config.out_dir) / "runs" / f"labeled_{labeled_fraction:g}" / method / f"seed_{seed}"
            artifacts = trainer.RunArtifacts(
                directory=cell_dir,
                config_hash=recipe.config.config_hash(),
                seed=seed,
                plan_directory=Path(config.dump_plans) / method / f"seed_{seed}" if config.dump_plans else None,
            )
        value = auc(score_method(recipe, splits, artifacts))
    except SPSSOTError as exc:
        logger.error("%s (labeled=%g, seed=%d) failed: %s", method, labeled_fraction, seed, exc)
        return CellResult(method=method, labeled_fraction=labeled_fraction, seed=seed, error=str(exc))
    logger.info("%s (labeled=%g, seed=%d): AUC %.4f", method, labeled_fraction, seed, value)
    return CellResult(method=method, labeled_fraction=labeled_fraction, seed=seed, auc=value)
