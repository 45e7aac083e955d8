import json
import math

import numpy as np
import pandas as pd
import pytest

from spssot import nn
from spssot.configuration import Configuration, SyntheticSpec, TrainConfiguration
from spssot.data import TabularDataset
from spssot.errors import DimensionError, TrainingDivergenceError
from spssot.evaluation import ScoredPredictions, auc, load_domains, prepare_splits
from spssot.trainer import (
    LOG_COLUMNS,
    EnsembleModel,
    RunArtifacts,
    SSOTModel,
    fit_ensemble,
    fit_supervised,
    predict,
    initialize_ssot,
    train_spssot,
    train_ssot,
)

FAST = TrainConfiguration(
    iterations=6,
    batch_size=16,
    pretrain_epochs=3,
    learning_rate=0.05,
    generator_dims="8",
    classifier_dims="",
    n_members=1,
    n_bins=3,
)


def _constant_member(positive_probability: float, input_dim: int = 3) -> SSOTModel:
    params = nn.init_params(input_dim, (), (), 0)
    layer = nn.Layer(
        weight=np.zeros((input_dim, 2)),
        bias=np.array([0.0, math.log(positive_probability / (1 - positive_probability))]),
        activation="identity",
    )
    return SSOTModel(params=params._replace_layers([layer]))


def _blobs(
    n: int, positives: int, tag: str, seed: int, offset: float = 0.0
) -> TabularDataset:
    rng = np.random.default_rng(seed)
    labels = np.array([0] * (n - positives) + [1] * positives)
    centers = np.where(labels[:, None] == 1, 2.0, -2.0) + offset
    features = centers + rng.normal(0.0, 0.3, size=(n, 2))
    if tag == "target_unlabeled":
        return TabularDataset(features, None, tag, ("x0", "x1"), sealed_labels=labels)
    return TabularDataset(features, labels, tag, ("x0", "x1"))


def _domains():
    return (
        _blobs(200, 40, "source", 0),
        _blobs(20, 6, "target_labeled", 1, offset=0.5),
        _blobs(100, 20, "target_unlabeled", 2, offset=0.5),
        _blobs(100, 20, "target_test", 3, offset=0.5),
    )


def test_ensemble_predicts_mean_member_probability() -> None:
    ensemble = EnsembleModel((_constant_member(0.2), _constant_member(0.8)))
    np.testing.assert_allclose(ensemble.predict(np.ones((4, 3))), 0.5)
    reversed_members = EnsembleModel(tuple(reversed(ensemble.members)))
    np.testing.assert_allclose(
        reversed_members.predict(np.ones((4, 3))), ensemble.predict(np.ones((4, 3)))
    )


def test_empty_ensemble_cannot_predict() -> None:
    with pytest.raises(ValueError):
        EnsembleModel().predict(np.ones((1, 3)))


def test_ensemble_members_share_input_dimension() -> None:
    with pytest.raises(DimensionError):
        EnsembleModel((_constant_member(0.2, 3), _constant_member(0.2, 4)))


def test_initialization_without_pretraining_is_the_seeded_init() -> None:
    source, labeled, _, _ = _domains()
    config = FAST.with_overrides(pretrain_epochs=0)
    model = initialize_ssot(source, labeled, config, np.random.default_rng(5))
    expected = nn.init_params(2, (8,), (), np.random.default_rng(5))
    assert nn.params_to_bytes(model.params) == nn.params_to_bytes(expected)
    assert model.init_status == "ok"


def test_single_class_labeled_pool_falls_back_to_source_pretraining() -> None:
    source, _, _, _ = _domains()
    negatives = _blobs(10, 0, "target_labeled", 4)
    model = initialize_ssot(source, negatives, FAST, np.random.default_rng(0))
    assert model.init_status == "source_only"


def test_zero_iterations_leave_the_model_unchanged() -> None:
    source, labeled, unlabeled, _ = _domains()
    config = FAST.with_overrides(iterations=0)
    model = initialize_ssot(source, labeled, config, np.random.default_rng(0))
    trained = train_ssot(model, source, labeled, unlabeled, config, np.random.default_rng(0))
    assert trained.params is model.params
    assert trained.log == ()


def test_ssot_separates_well_separated_blobs() -> None:
    source, labeled, unlabeled, test = _domains()
    ensemble = train_spssot(source, labeled, unlabeled, FAST.with_overrides(pretrain_epochs=20))
    preds = ScoredPredictions(ensemble.predict(test.features), test.labels)
    assert auc(preds) == 1.0


def test_training_is_deterministic_for_a_seed() -> None:
    source, labeled, unlabeled, _ = _domains()
    config = FAST.with_overrides(n_members=2, seed=3)
    first = train_spssot(source, labeled, unlabeled, config)
    second = train_spssot(source, labeled, unlabeled, config)
    for a, b in zip(first.members, second.members):
        assert nn.params_to_bytes(a.params) == nn.params_to_bytes(b.params)


def test_without_transport_and_structure_terms_only_cross_entropy_remains() -> None:
    source, labeled, unlabeled, _ = _domains()
    config = FAST.with_overrides(alpha=0.0, lam=0.0, beta=0.0, iterations=10)
    model = initialize_ssot(source, labeled, config, np.random.default_rng(0))
    trained = train_ssot(model, source, labeled, unlabeled, config, np.random.default_rng(1))
    assert len(trained.log) == 10
    assert all(row.total == row.l_cls for row in trained.log)


def test_debug_checks_pass_on_healthy_training() -> None:
    source, labeled, unlabeled, _ = _domains()
    config = FAST.with_overrides(
        debug=True, solver="sinkhorn", sinkhorn_epsilon=1.0, sinkhorn_max_iters=100_000
    )
    model = initialize_ssot(source, labeled, config, np.random.default_rng(0))
    trained = train_ssot(model, source, labeled, unlabeled, config, np.random.default_rng(0))
    assert all(math.isfinite(row.total) for row in trained.log)


def test_non_finite_parameters_stop_training() -> None:
    source, labeled, unlabeled, _ = _domains()
    model = initialize_ssot(source, labeled, FAST, np.random.default_rng(0))
    layers = list(model.params.layers)
    broken = layers[0].weight.copy()
    broken[0, 0] = np.nan
    layers[0] = nn.Layer(weight=broken, bias=layers[0].bias, activation=layers[0].activation)
    poisoned = SSOTModel(params=model.params._replace_layers(layers))
    with pytest.raises(TrainingDivergenceError) as info:
        train_ssot(poisoned, source, labeled, unlabeled, FAST, np.random.default_rng(0))
    assert info.value.term == "forward"
    assert info.value.last_good is None


def test_fit_supervised_learns_the_pool() -> None:
    source, _, _, _ = _domains()
    model = fit_supervised(source, FAST.with_overrides(pretrain_epochs=20), np.random.default_rng(0))
    preds = ScoredPredictions(model.predict(source.features), source.labels)
    assert auc(preds) == 1.0


def test_ensemble_run_writes_artifacts(tmp_path) -> None:
    source, labeled, unlabeled, _ = _domains()
    config = FAST.with_overrides(n_members=2, log_every=2)
    artifacts = RunArtifacts(
        directory=tmp_path / "run",
        config_hash=config.config_hash(),
        seed=config.seed,
        plan_directory=tmp_path / "plans",
    )
    ensemble = train_spssot(source, labeled, unlabeled, config, artifacts)
    assert len(ensemble) == 2

    run = tmp_path / "run"
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["config_hash"] == config.config_hash()
    members = manifest["members"]
    assert [m["index"] for m in members] == [0, 1]
    assert members[1]["pool_sizes"] == [80, 12]

    log = pd.read_csv(run / "member_1_log.tsv", sep="\t")
    assert tuple(log.columns) == LOG_COLUMNS
    assert len(log) == config.iterations
    loaded = nn.load_checkpoint(run / "member_1.ckpt")
    assert nn.params_to_bytes(loaded) == nn.params_to_bytes(ensemble.members[1].params)
    assert (run / "member_1_source_bins.tsv").is_file()
    assert (run / "member_1_target_labeled_bins.tsv").is_file()

    plan = pd.read_csv(tmp_path / "plans" / "member_0_plan.tsv", sep="\t", header=None)
    assert plan.shape == (16, 16)
    assert plan.to_numpy().sum() == pytest.approx(1.0)


def test_diverged_member_keeps_its_last_finite_parameters(tmp_path) -> None:
    source, labeled, _, _ = _domains()
    last_good = nn.init_params(2, (8,), (), 3)

    def diverge(pools, seq, index):
        raise TrainingDivergenceError("non-finite gradient", term="L_lot", last_good=last_good)

    artifacts = RunArtifacts(directory=tmp_path / "run", config_hash="abc", seed=0)
    with pytest.raises(TrainingDivergenceError):
        fit_ensemble((source, labeled), diverge, FAST, artifacts)
    restored = nn.load_checkpoint(tmp_path / "run" / "member_0_last_good.ckpt")
    for kept, saved in zip(restored.layers, last_good.layers):
        np.testing.assert_array_equal(kept.weight, saved.weight)
        np.testing.assert_array_equal(kept.bias, saved.bias)


def test_predict_is_the_ensemble_mean() -> None:
    ensemble = EnsembleModel((_constant_member(0.2), _constant_member(0.6)))
    np.testing.assert_allclose(predict(ensemble, np.ones((3, 3))), 0.4)


def test_entropic_solver_trains_at_default_settings() -> None:
    config = Configuration(iterations=20, pretrain_epochs=2, solver="sinkhorn", n_members=1)
    domains = load_domains(config, SyntheticSpec(n_source=1000, n_target=1000))
    splits = prepare_splits(domains, config, 0.02, seed=0)
    model = initialize_ssot(splits.source, splits.target_labeled, config, np.random.default_rng(0))
    trained = train_ssot(
        model,
        splits.source,
        splits.target_labeled,
        splits.target_unlabeled,
        config,
        np.random.default_rng(1),
    )
    assert len(trained.log) == 20
    assert all(math.isfinite(row.total) for row in trained.log)
