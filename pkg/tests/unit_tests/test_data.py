import math

import numpy as np
import pytest

from spssot.configuration import SyntheticSpec
from spssot.data import (
    RawRecordSeries,
    TabularDataset,
    aggregate_windows,
    filter_patients,
    fit_scaler,
    generate_synthetic,
    load_csv,
    load_records,
    split_target,
    standardize,
    window_feature_names,
    windows_to_dataset,
    write_csv,
)
from spssot.errors import (
    LabelValidationError,
    OrderingError,
    ParseError,
    SchemaError,
    StratificationError,
)

NAN = math.nan


def _series(**kwargs) -> RawRecordSeries:
    defaults = dict(
        patient_id="p1",
        timestamps=np.array([0.5, 1.5, 7.0]),
        values=np.array([[80.0, 60.0], [90.0, 60.0], [100.0, NAN]]),
        indicator_names=("HR", "Age"),
        demographic_names=("Age",),
        sepsis_onset_flags=np.array([0, 0, 1]),
    )
    defaults.update(kwargs)
    return RawRecordSeries(**defaults)


def test_aggregate_windows_statistics_and_labels() -> None:
    samples = aggregate_windows(_series())
    assert len(samples) == 2
    first, second = samples
    # HR: max, min, mean, se, latest; then Age
    np.testing.assert_allclose(first.features, [90.0, 80.0, 85.0, 5.0, 90.0, 60.0])
    np.testing.assert_allclose(second.features, [100.0, 100.0, 100.0, 0.0, 100.0, 60.0])
    assert first.label == 1  # onset at hour 7 lies in (6, 12]
    assert second.label == 0


def test_aggregate_windows_empty_window_is_missing() -> None:
    series = _series(
        timestamps=np.array([0.5, 13.0]),
        values=np.array([[80.0, 60.0], [100.0, 61.0]]),
        sepsis_onset_flags=None,
    )
    samples = aggregate_windows(series)
    assert len(samples) == 3
    assert np.isnan(samples[1].features[:5]).all()
    assert samples[1].features[5] == 60.0
    assert samples[1].label is None
    # the series ends at hour 13, inside the third window
    np.testing.assert_allclose(samples[2].features, [100.0, 100.0, 100.0, 0.0, 100.0, 61.0])


def test_aggregate_windows_stops_at_max_hours() -> None:
    timestamps = np.arange(0.0, 100.0, 1.0)
    series = _series(
        timestamps=timestamps,
        values=np.column_stack([timestamps, np.full_like(timestamps, 50.0)]),
        sepsis_onset_flags=None,
    )
    assert len(aggregate_windows(series)) == 8


def test_aggregate_windows_requires_ascending_timestamps() -> None:
    with pytest.raises(OrderingError):
        aggregate_windows(_series(timestamps=np.array([0.5, 0.5, 7.0])))


def test_window_feature_names_follow_aggregation_order() -> None:
    assert window_feature_names(["HR", "Age"], ["Age"]) == [
        "HR_max",
        "HR_min",
        "HR_mean",
        "HR_se",
        "HR_latest",
        "Age",
    ]


def test_filter_patients_drops_sparse_series() -> None:
    sparse = _series(
        patient_id="p2",
        values=np.array([[NAN, 60.0], [NAN, 60.0], [80.0, 60.0]]),
    )
    kept = filter_patients([_series(), sparse], max_missing_ratio=0.5)
    assert [s.patient_id for s in kept] == ["p1"]


def test_load_records_and_windows_to_dataset(tmp_path) -> None:
    path = tmp_path / "records.csv"
    path.write_text(
        "patient_id,hours,HR,Age,sepsis\n"
        "a,0.5,80,60,0\n"
        "a,7.0,90,60,1\n"
        "b,1.0,,70,0\n"
        "b,2.0,70,70,0\n"
    )
    series = load_records(path, demographic_names=["Age", "Sex"])
    assert [s.patient_id for s in series] == ["a", "b"]
    assert series[0].demographic_names == ("Age",)
    samples = [w for s in series for w in aggregate_windows(s)]
    dataset = windows_to_dataset(samples, window_feature_names(["HR", "Age"], ["Age"]))
    assert len(dataset) == 3
    assert dataset.labels.tolist() == [1, 0, 0]
    assert not np.isnan(dataset.features).any()


def _write(path, text: str):
    path.write_text(text)
    return path


def test_load_csv_imputes_missing_with_column_mean(tmp_path) -> None:
    path = _write(tmp_path / "d.csv", "a,b,label\n1,2,0\n3,,1\n5,4,0\n")
    dataset = load_csv(path, ["a", "b"])
    np.testing.assert_allclose(dataset.features[:, 1], [2.0, 3.0, 4.0])
    assert dataset.labels.tolist() == [0, 1, 0]


def test_load_csv_header_mismatch(tmp_path) -> None:
    path = _write(tmp_path / "d.csv", "a,c,label\n1,2,0\n")
    with pytest.raises(SchemaError):
        load_csv(path, ["a", "b"])


def test_load_csv_reports_line_of_bad_value(tmp_path) -> None:
    path = _write(tmp_path / "d.csv", "a,b,label\n1,2,0\n3,x,1\n")
    with pytest.raises(ParseError) as info:
        load_csv(path, ["a", "b"])
    assert info.value.line == 3


def test_load_csv_short_row(tmp_path) -> None:
    path = _write(tmp_path / "d.csv", "a,b,label\n1,2,0\n3,4\n")
    with pytest.raises(ParseError) as info:
        load_csv(path, ["a", "b"])
    assert info.value.line == 3


def test_load_csv_rejects_bad_label(tmp_path) -> None:
    path = _write(tmp_path / "d.csv", "a,b,label\n1,2,2\n")
    with pytest.raises(LabelValidationError):
        load_csv(path, ["a", "b"])


def test_write_csv_is_read_back_exactly(tmp_path) -> None:
    source, _ = generate_synthetic(SyntheticSpec(n_source=50, n_target=50, feature_dim=3))
    write_csv(source, tmp_path / "source.csv")
    loaded = load_csv(tmp_path / "source.csv", list(source.feature_names))
    np.testing.assert_array_equal(loaded.features, source.features)
    np.testing.assert_array_equal(loaded.labels, source.labels)


def test_generate_synthetic_exact_class_counts_and_determinism() -> None:
    spec = SyntheticSpec()
    source, target = generate_synthetic(spec)
    assert source.class_counts() == (3760, 240)
    assert target.class_counts() == (3600, 400)
    again, _ = generate_synthetic(spec)
    np.testing.assert_array_equal(source.features, again.features)


def test_generate_synthetic_zero_shift_keeps_distributions_close() -> None:
    spec = SyntheticSpec(shift_rotation_angle=0.0, shift_translation="0", minority_fraction_target=0.06)
    source, target = generate_synthetic(spec)
    np.testing.assert_allclose(source.features.mean(axis=0), target.features.mean(axis=0), atol=0.1)


def test_split_target_sizes_tags_and_sealed_labels() -> None:
    _, target = generate_synthetic(SyntheticSpec())
    labeled, unlabeled, test = split_target(target, labeled_fraction=0.01, test_fraction=0.2, seed=3)
    assert (len(labeled), len(unlabeled), len(test)) == (40, 3160, 800)
    assert labeled.domain_tag == "target_labeled"
    assert unlabeled.labels is None
    assert unlabeled.sealed_labels is not None
    assert labeled.class_counts()[1] == 4
    assert test.class_counts()[1] == 80


def test_split_target_too_small_for_both_classes() -> None:
    features = np.zeros((50, 2))
    labels = np.array([1] * 5 + [0] * 45)
    target = TabularDataset(features, labels, "target_test", ("x0", "x1"))
    with pytest.raises(StratificationError):
        split_target(target, labeled_fraction=0.02, test_fraction=0.2)


def test_unlabeled_dataset_cannot_carry_labels() -> None:
    with pytest.raises(LabelValidationError):
        TabularDataset(np.zeros((2, 1)), np.array([0, 1]), "target_unlabeled", ("x",))
    with pytest.raises(LabelValidationError):
        TabularDataset(np.zeros((2, 1)), np.array([0, 2]), "source", ("x",))


def test_features_are_read_only() -> None:
    dataset = TabularDataset(np.zeros((2, 1)), np.array([0, 1]), "source", ("x",))
    with pytest.raises(ValueError):
        dataset.features[0, 0] = 1.0


def test_standardize_uses_source_statistics() -> None:
    source, target = generate_synthetic(SyntheticSpec(n_source=500, n_target=500))
    scaler = fit_scaler(source)
    scaled = standardize(source, scaler)
    np.testing.assert_allclose(scaled.features.mean(axis=0), 0.0, atol=1e-12)
    assert standardize(target, scaler).feature_dim == target.feature_dim


def test_split_target_positives_track_each_part_size() -> None:
    rng = np.random.default_rng(5)
    for seed in range(10):
        n = int(rng.integers(500, 3000))
        labels = (rng.uniform(size=n) < rng.uniform(0.05, 0.3)).astype(np.int64)
        target = TabularDataset(rng.normal(size=(n, 2)), labels, "target_test", ("x0", "x1"))
        labeled, unlabeled, test = split_target(
            target, labeled_fraction=0.02, test_fraction=0.2, seed=seed
        )
        positives = labels.sum()
        test_positives = test.class_counts()[1]
        assert abs(test_positives - len(test) * positives / n) <= 1

        rest_positives = positives - test_positives
        rest = len(labeled) + len(unlabeled)
        assert abs(labeled.class_counts()[1] - len(labeled) * rest_positives / rest) <= 1
        assert abs(unlabeled.sealed_labels.sum() - len(unlabeled) * rest_positives / rest) <= 1
