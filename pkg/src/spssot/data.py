"""Tabular data for two-domain transfer.

This module turns raw ICU record series into fixed-width window samples, reads
and writes tabular CSVs, generates synthetic covariate-shifted domains, and
produces the labeled / unlabeled / test splits of the target domain.

Functions:
    aggregate_windows: Aggregate one patient's series into non-overlapping window samples.
    load_records: Read a long-format record CSV into per-patient series.
    filter_patients: Drop patients whose indicator cells are mostly missing.
    windows_to_dataset: Stack window samples into a dataset, mean-imputing missing features.
    load_csv / write_csv: Tabular CSV input and output.
    generate_synthetic: Draw a source domain and a rotated/translated target domain.
    split_target: Stratified labeled / unlabeled / test split of the target domain.
    fit_scaler / standardize: z-score features with source-domain statistics.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split
from sklearn.preprocessing import StandardScaler

from spssot.configuration import SyntheticSpec
from spssot.errors import (
    DimensionError,
    LabelValidationError,
    OrderingError,
    ParseError,
    SchemaError,
    StratificationError,
)
from spssot.features import (
    LABEL_COLUMN,
    ONSET_COLUMN,
    PATIENT_COLUMN,
    TIME_COLUMN,
    WINDOW_STATISTICS,
)

logger = logging.getLogger(__name__)

DomainTag = Literal["source", "target_labeled", "target_unlabeled", "target_test"]

_LABELED_TAGS = ("source", "target_labeled", "target_test")

##############################  Record series  ################################


@dataclass(frozen=True, eq=False)
class RawRecordSeries:
    """One patient's measurements since ICU admission.

    `values` has one row per timestamp and one column per name in
    `indicator_names`; missing measurements are NaN. Columns listed in
    `demographic_names` are passed through as their latest known value instead
    of being aggregated.
    """

    patient_id: str
    timestamps: np.ndarray
    values: np.ndarray
    indicator_names: tuple[str, ...]
    demographic_names: tuple[str, ...] = ()
    sepsis_onset_flags: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            values = values.reshape(len(self.timestamps), -1)
        if values.shape != (len(self.timestamps), len(self.indicator_names)):
            raise DimensionError(
                f"patient {self.patient_id}: values of shape {values.shape} do not match "
                f"{len(self.timestamps)} timestamps x {len(self.indicator_names)} indicators"
            )
        unknown = set(self.demographic_names) - set(self.indicator_names)
        if unknown:
            raise DimensionError(f"demographics {sorted(unknown)} are not indicator columns")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "timestamps", np.asarray(self.timestamps, dtype=np.float64))

    @property
    def missing_ratio(self) -> float:
        """Fraction of missing cells among the aggregated (non-demographic) indicators."""
        columns = [
            i for i, name in enumerate(self.indicator_names) if name not in self.demographic_names
        ]
        if not columns or not len(self.timestamps):
            return 1.0
        return float(np.isnan(self.values[:, columns]).mean())


@dataclass(frozen=True, eq=False)
class WindowSample:
    """Aggregated statistics of one window, plus the onset label when known."""

    features: np.ndarray
    label: Optional[int] = None
    patient_id: str = ""
    window_index: int = 0


def window_feature_names(
    indicator_names: Sequence[str], demographic_names: Sequence[str] = ()
) -> list[str]:
    """Return the feature names produced by `aggregate_windows`.

    Examples:
        >>> window_feature_names(["HR", "Age"], ["Age"])
        ['HR_max', 'HR_min', 'HR_mean', 'HR_se', 'HR_latest', 'Age']
    """
    aggregated = [n for n in indicator_names if n not in demographic_names]
    names = [f"{n}_{stat}" for n in aggregated for stat in WINDOW_STATISTICS]
    return names + [n for n in indicator_names if n in demographic_names]


def _standard_error(values: pd.Series) -> float:
    present = values.dropna()
    if present.empty:
        return math.nan
    if len(present) == 1:
        return 0.0
    return float(present.std(ddof=1) / math.sqrt(len(present)))


def aggregate_windows(
    series: RawRecordSeries,
    window_hours: float = 6.0,
    horizon_hours: float = 6.0,
    max_hours: float = 48.0,
) -> list[WindowSample]:
    """Aggregate a record series into non-overlapping windows aligned to admission.

    Window k covers hours [k * window_hours, (k + 1) * window_hours). Windows are
    emitted while they fit inside `max_hours` and the series has reached their
    start. The last window may be partial: a series that ends mid-window still
    yields that window, aggregated over the records it has. Each indicator
    contributes max, min, mean, standard error and latest value, all ignoring
    missing values; an all-missing indicator yields NaN.
    The label is 1 iff an onset flag falls in (window_end, window_end + horizon].

    Args:
        series: The patient's record series.
        window_hours: Window length.
        horizon_hours: Prediction horizon after the window end.
        max_hours: Only windows ending within this many hours are produced.

    Returns:
        list[WindowSample]: One sample per window, in time order.
    """
    if window_hours <= 0 or horizon_hours <= 0:
        raise ValueError("window_hours and horizon_hours must be positive")
    timestamps = series.timestamps
    if timestamps.size == 0:
        return []
    if np.any(np.diff(timestamps) <= 0):
        raise OrderingError(f"patient {series.patient_id}: timestamps are not strictly ascending")
    if timestamps[0] < 0:
        raise OrderingError(f"patient {series.patient_id}: negative timestamp")

    n_windows = min(
        int(math.floor(max_hours / window_hours + 1e-9)),
        int(math.floor(timestamps[-1] / window_hours)) + 1,
    )
    if n_windows <= 0:
        return []

    frame = pd.DataFrame(series.values, columns=list(series.indicator_names))
    frame["_window"] = np.floor(timestamps / window_hours).astype(int)
    frame = frame[frame["_window"] < n_windows]
    grouped = frame.groupby("_window")
    window_index = pd.RangeIndex(n_windows)

    blocks = []
    for name in series.indicator_names:
        if name in series.demographic_names:
            continue
        column = grouped[name]
        stats = pd.DataFrame(
            {
                "max": column.max(),
                "min": column.min(),
                "mean": column.mean(),
                "se": column.agg(_standard_error),
                "latest": column.last(),
            }
        ).reindex(window_index)
        blocks.append(stats[list(WINDOW_STATISTICS)].to_numpy())
    for name in series.indicator_names:
        if name in series.demographic_names:
            latest = grouped[name].last().reindex(window_index).ffill()
            blocks.append(latest.to_numpy()[:, None])
    features = np.hstack(blocks) if blocks else np.empty((n_windows, 0))

    onsets: Optional[np.ndarray] = None
    if series.sepsis_onset_flags is not None:
        flags = np.asarray(series.sepsis_onset_flags)
        onsets = timestamps[flags.astype(bool)]

    samples = []
    for k in range(n_windows):
        label = None
        if onsets is not None:
            end = (k + 1) * window_hours
            label = int(np.any((onsets > end) & (onsets <= end + horizon_hours)))
        samples.append(
            WindowSample(
                features=features[k].astype(np.float64),
                label=label,
                patient_id=series.patient_id,
                window_index=k,
            )
        )
    return samples


def load_records(
    path: str | Path,
    indicator_names: Optional[Sequence[str]] = None,
    demographic_names: Sequence[str] = (),
) -> list[RawRecordSeries]:
    """Read a long-format record CSV into one series per patient.

    The file has a `patient_id` column, an `hours` column (hours since ICU
    admission), the indicator columns and optionally a `sepsis` onset-flag
    column. Patients keep their order of first appearance and their rows keep
    file order. Demographic names absent from the indicators are ignored.
    """
    frame = pd.read_csv(path, encoding="utf-8")
    for required in (PATIENT_COLUMN, TIME_COLUMN):
        if required not in frame.columns:
            raise SchemaError(f"{path}: missing required column {required!r}")
    if indicator_names is None:
        reserved = {PATIENT_COLUMN, TIME_COLUMN, ONSET_COLUMN}
        indicator_names = [c for c in frame.columns if c not in reserved]
    missing = [c for c in indicator_names if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path}: missing indicator columns {missing}")
    has_onset = ONSET_COLUMN in frame.columns
    demographic_names = [n for n in demographic_names if n in indicator_names]

    series = []
    for patient_id, rows in frame.groupby(PATIENT_COLUMN, sort=False):
        series.append(
            RawRecordSeries(
                patient_id=str(patient_id),
                timestamps=rows[TIME_COLUMN].to_numpy(dtype=np.float64),
                values=rows[list(indicator_names)].to_numpy(dtype=np.float64),
                indicator_names=tuple(indicator_names),
                demographic_names=tuple(demographic_names),
                sepsis_onset_flags=(
                    rows[ONSET_COLUMN].fillna(0).to_numpy(dtype=np.int8) if has_onset else None
                ),
            )
        )
    return series


def filter_patients(
    series: Iterable[RawRecordSeries], max_missing_ratio: float = 0.8
) -> list[RawRecordSeries]:
    """Keep the patients whose indicator missing ratio does not exceed `max_missing_ratio`."""
    kept = [s for s in series if s.missing_ratio <= max_missing_ratio]
    logger.info("Kept %d patients with missing ratio <= %.2f", len(kept), max_missing_ratio)
    return kept


def windows_to_dataset(
    samples: Sequence[WindowSample],
    feature_names: Sequence[str],
    domain_tag: DomainTag = "source",
) -> "TabularDataset":
    """Stack window samples into a dataset and mean-impute missing features column-wise."""
    if not samples:
        raise DimensionError("no window samples to assemble")
    features = np.vstack([s.features for s in samples])
    labels = None
    if domain_tag != "target_unlabeled":
        if any(s.label is None for s in samples):
            raise LabelValidationError(f"{domain_tag} samples must all carry labels")
        labels = np.array([s.label for s in samples], dtype=np.int64)
    return TabularDataset(
        features=_mean_impute(features, feature_names),
        labels=labels,
        domain_tag=domain_tag,
        feature_names=tuple(feature_names),
    )


def _mean_impute(features: np.ndarray, feature_names: Sequence[str]) -> np.ndarray:
    features = np.array(features, dtype=np.float64)
    missing = np.isnan(features)
    if not missing.any():
        return features
    with np.errstate(invalid="ignore"):
        means = np.nanmean(np.where(missing, np.nan, features), axis=0)
    empty = np.isnan(means)
    if empty.any():
        logger.warning(
            "Columns %s have no observed values; imputing 0",
            [feature_names[i] for i in np.flatnonzero(empty)],
        )
        means[empty] = 0.0
    rows, cols = np.nonzero(missing)
    features[rows, cols] = means[cols]
    return features


##############################  Datasets  #####################################


@dataclass(frozen=True, eq=False)
class TabularDataset:
    """An immutable feature matrix with optional binary labels and a domain tag.

    Unlabeled target data carries no `labels`; its true labels, when known, are
    kept in `sealed_labels`, which only evaluation code reads.
    """

    features: np.ndarray
    labels: Optional[np.ndarray]
    domain_tag: DomainTag
    feature_names: tuple[str, ...]
    sealed_labels: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        features = np.array(self.features, dtype=np.float64)
        if features.ndim != 2:
            raise DimensionError(f"features must be 2-D, got shape {features.shape}")
        if features.shape[1] != len(self.feature_names):
            raise DimensionError(
                f"{len(self.feature_names)} feature names for {features.shape[1]} columns"
            )
        features.flags.writeable = False
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

        if self.domain_tag == "target_unlabeled":
            if self.labels is not None:
                raise LabelValidationError("target_unlabeled samples carry no labels")
        elif self.domain_tag in _LABELED_TAGS:
            if self.labels is None:
                raise LabelValidationError(f"{self.domain_tag} samples must carry labels")
        else:
            raise ValueError(f"unknown domain tag {self.domain_tag!r}")

        for name in ("labels", "sealed_labels"):
            value = getattr(self, name)
            if value is None:
                continue
            labels = np.array(value, dtype=np.int64).reshape(-1)
            if labels.shape[0] != features.shape[0]:
                raise DimensionError(f"{labels.shape[0]} {name} for {features.shape[0]} samples")
            if not np.isin(labels, (0, 1)).all():
                raise LabelValidationError(f"{name} must lie in {{0, 1}}")
            labels.flags.writeable = False
            object.__setattr__(self, name, labels)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> tuple[int, int]:
        """Return (negatives, positives); requires labels."""
        if self.labels is None:
            raise LabelValidationError(f"{self.domain_tag} dataset has no labels")
        positives = int(self.labels.sum())
        return len(self) - positives, positives

    def subset(self, indices: np.ndarray | Sequence[int]) -> "TabularDataset":
        """Return the rows at `indices`, keeping the domain tag."""
        idx = np.asarray(indices, dtype=np.int64)
        return TabularDataset(
            features=self.features[idx],
            labels=None if self.labels is None else self.labels[idx],
            domain_tag=self.domain_tag,
            feature_names=self.feature_names,
            sealed_labels=None if self.sealed_labels is None else self.sealed_labels[idx],
        )

    def with_features(self, features: np.ndarray) -> "TabularDataset":
        """Return a copy with the feature matrix replaced."""
        return TabularDataset(
            features=features,
            labels=self.labels,
            domain_tag=self.domain_tag,
            feature_names=self.feature_names,
            sealed_labels=self.sealed_labels,
        )


def concat(datasets: Sequence[TabularDataset], domain_tag: DomainTag) -> TabularDataset:
    """Concatenate labeled datasets sharing the same features."""
    names = datasets[0].feature_names
    if any(d.feature_names != names for d in datasets):
        raise DimensionError("cannot concatenate datasets with different feature names")
    labels = []
    for d in datasets:
        if d.labels is None:
            raise LabelValidationError("only labeled datasets can be concatenated")
        labels.append(d.labels)
    return TabularDataset(
        features=np.vstack([d.features for d in datasets]),
        labels=np.concatenate(labels),
        domain_tag=domain_tag,
        feature_names=names,
    )


##############################  CSV  ##########################################

_PANDAS_LINE = re.compile(r"line (\d+)")


def load_csv(
    path: str | Path,
    feature_names: Optional[Sequence[str]] = None,
    label_column: Optional[str] = LABEL_COLUMN,
    domain_tag: DomainTag = "source",
) -> TabularDataset:
    """Load a tabular CSV.

    The header must equal `feature_names` followed by `label_column` (when one
    is declared). With `feature_names=None` every non-label column is a feature.
    Empty cells are missing values and are replaced by the mean of their column.

    Raises:
        SchemaError: The header does not match the schema.
        ParseError: A row has the wrong number of fields or a non-numeric value.
        LabelValidationError: A label is empty or outside {0, 1}.
    """
    try:
        frame = pd.read_csv(
            path, dtype=str, keep_default_na=False, encoding="utf-8", skip_blank_lines=False
        )
    except pd.errors.ParserError as exc:
        match = _PANDAS_LINE.search(str(exc))
        raise ParseError(int(match.group(1)) if match else 0, str(exc)) from exc

    header = list(frame.columns)
    if feature_names is None:
        feature_names = [c for c in header if c != label_column]
    expected = list(feature_names) + ([label_column] if label_column else [])
    if header != expected:
        raise SchemaError(f"{path}: header {header} does not match schema {expected}")

    # Cells absent from short rows come back as NaN; empty cells as "".
    short = frame.isna().any(axis=1).to_numpy()
    if short.any():
        line = int(np.flatnonzero(short)[0]) + 2
        raise ParseError(line, f"expected {len(header)} fields")

    columns = []
    for name in feature_names:
        raw = frame[name].str.strip()
        parsed = pd.to_numeric(raw.replace("", np.nan), errors="coerce")
        bad = (parsed.isna() & raw.ne("")).to_numpy()
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise ParseError(row + 2, f"column {name!r}: cannot parse {raw.iloc[row]!r} as a real")
        columns.append(parsed.to_numpy(dtype=np.float64))
    features = np.column_stack(columns) if columns else np.empty((len(frame), 0))

    labels = None
    if label_column:
        raw = frame[label_column].str.strip()
        bad = ~raw.isin(["0", "1", "0.0", "1.0"]).to_numpy()
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise LabelValidationError(
                f"line {row + 2}: label {raw.iloc[row]!r} is not in {{0, 1}}"
            )
        labels = raw.astype(float).astype(np.int64).to_numpy()
    elif domain_tag != "target_unlabeled":
        raise LabelValidationError(f"{domain_tag} data needs a label column")

    return TabularDataset(
        features=_mean_impute(features, feature_names),
        labels=labels,
        domain_tag=domain_tag,
        feature_names=tuple(feature_names),
    )


def write_csv(dataset: TabularDataset, path: str | Path) -> None:
    """Write a dataset in the format read by `load_csv` (labels included when present)."""
    frame = pd.DataFrame(dataset.features, columns=list(dataset.feature_names))
    if dataset.labels is not None:
        frame[LABEL_COLUMN] = dataset.labels
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g", encoding="utf-8")


##############################  Synthetic data  ###############################


def _stratified_labels(rng: np.random.Generator, n: int, minority_fraction: float) -> np.ndarray:
    positives = int(math.floor(minority_fraction * n + 0.5))
    labels = np.zeros(n, dtype=np.int64)
    labels[:positives] = 1
    return labels[rng.permutation(n)]


def generate_synthetic(spec: SyntheticSpec) -> tuple[TabularDataset, TabularDataset]:
    """Draw a source domain and a covariate-shifted target domain.

    Negatives come from N(0, sigma^2 I) and positives from N(mu, sigma^2 I), with
    mu of norm `class_separation` along the all-ones direction. The target is
    drawn from the same class-conditionals with its own prior, then rotated in
    the plane of the first two features and translated. Positive counts are
    exact: round(fraction * n).

    Returns:
        tuple[TabularDataset, TabularDataset]: (source, target), both labeled.
    """
    d = spec.feature_dim
    source_seq, target_seq = np.random.SeedSequence(spec.seed).spawn(2)
    mu = np.full(d, spec.class_separation / math.sqrt(d))

    def draw(seq: np.random.SeedSequence, n: int, fraction: float) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(seq)
        labels = _stratified_labels(rng, n, fraction)
        features = rng.normal(0.0, spec.noise_sigma, size=(n, d)) + labels[:, None] * mu
        return features, labels

    xs, ys = draw(source_seq, spec.n_source, spec.minority_fraction_source)
    xt, yt = draw(target_seq, spec.n_target, spec.minority_fraction_target)

    rotation = np.eye(d)
    c, s = math.cos(spec.shift_rotation_angle), math.sin(spec.shift_rotation_angle)
    rotation[:2, :2] = [[c, -s], [s, c]]
    xt = xt @ rotation.T + np.asarray(spec.translation_vector())

    names = tuple(f"x{i}" for i in range(d))
    return (
        TabularDataset(features=xs, labels=ys, domain_tag="source", feature_names=names),
        TabularDataset(features=xt, labels=yt, domain_tag="target_test", feature_names=names),
    )


##############################  Splits  #######################################


def _stratified_split(
    indices: np.ndarray, labels: np.ndarray, size: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Split `indices` into (rest, chosen) with `size` chosen rows, stratified by label."""
    try:
        rest, chosen = train_test_split(
            indices, test_size=size, stratify=labels, random_state=seed
        )
    except ValueError as exc:
        raise StratificationError(str(exc)) from exc
    return np.sort(rest), np.sort(chosen)


def split_target(
    target: TabularDataset,
    labeled_fraction: float = 0.01,
    test_fraction: float = 0.20,
    seed: int = 0,
) -> tuple[TabularDataset, TabularDataset, TabularDataset]:
    """Split the target domain into labeled, unlabeled and test parts.

    Sizes are round(fraction * n) for the labeled and test parts; the unlabeled
    part takes the rest. Both draws are stratified by label. The unlabeled part
    has its labels stripped into `sealed_labels`.

    Returns:
        tuple: (D_l, D_u, D_test).

    Raises:
        StratificationError: The fractions are invalid or a part received no positives.
    """
    if not (0 < labeled_fraction < 1 and 0 < test_fraction < 1):
        raise StratificationError("fractions must lie in (0, 1)")
    if labeled_fraction + test_fraction >= 1:
        raise StratificationError(
            f"labeled_fraction + test_fraction must be < 1, got {labeled_fraction + test_fraction}"
        )
    labels = target.labels if target.labels is not None else target.sealed_labels
    if labels is None:
        raise StratificationError("the target domain needs labels to be split")

    n = len(target)
    n_labeled = int(math.floor(labeled_fraction * n + 0.5))
    n_test = int(math.floor(test_fraction * n + 0.5))
    if n_labeled < 1 or n_test < 1 or n - n_labeled - n_test < 1:
        raise StratificationError(f"a split of {n} samples would leave an empty part")

    everything = np.arange(n)
    rest, test = _stratified_split(everything, labels, n_test, seed)
    unlabeled, labeled = _stratified_split(rest, labels[rest], n_labeled, seed)

    for name, part in (("labeled", labeled), ("unlabeled", unlabeled), ("test", test)):
        if labels[part].sum() == 0:
            raise StratificationError(
                f"the {name} split received no positive samples; enlarge the fraction or dataset"
            )

    labeled_target = TabularDataset(
        features=target.features[labeled],
        labels=labels[labeled],
        domain_tag="target_labeled",
        feature_names=target.feature_names,
    )
    unlabeled_target = TabularDataset(
        features=target.features[unlabeled],
        labels=None,
        domain_tag="target_unlabeled",
        feature_names=target.feature_names,
        sealed_labels=labels[unlabeled],
    )
    test_target = TabularDataset(
        features=target.features[test],
        labels=labels[test],
        domain_tag="target_test",
        feature_names=target.feature_names,
    )
    return labeled_target, unlabeled_target, test_target


def stratified_subsample(dataset: TabularDataset, fraction: float, seed: int) -> TabularDataset:
    """Keep a stratified `fraction` of a labeled dataset (all of it when fraction is 1)."""
    if fraction >= 1:
        return dataset
    if dataset.labels is None:
        raise StratificationError("only labeled datasets can be subsampled")
    size = max(2, int(math.floor(fraction * len(dataset) + 0.5)))
    _, chosen = _stratified_split(np.arange(len(dataset)), dataset.labels, size, seed)
    return dataset.subset(chosen)


##############################  Scaling  ######################################


def fit_scaler(source: TabularDataset) -> StandardScaler:
    """Fit a z-score scaler on source-domain features."""
    return StandardScaler().fit(source.features)


def standardize(dataset: TabularDataset, scaler: StandardScaler) -> TabularDataset:
    """Apply a fitted scaler to a dataset."""
    if scaler.n_features_in_ != dataset.feature_dim:
        raise DimensionError(
            f"scaler expects {scaler.n_features_in_} features, dataset has {dataset.feature_dim}"
        )
    return dataset.with_features(scaler.transform(dataset.features))
