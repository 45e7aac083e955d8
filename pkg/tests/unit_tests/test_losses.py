import math

import numpy as np
import pytest

from spssot import nn
from spssot.configuration import LossWeights, TrainConfiguration
from spssot.errors import DegenerateClassError, DiagnosticsError, DimensionError
from spssot.losses import (
    ClassCenters,
    DomainCenters,
    alignment_loss,
    center_subsample,
    centroid_loss,
    class_centers,
    classification_loss,
    group_entropy_loss,
    total_objective,
)
from spssot.trainer import ssot_objective

EPS = 1e-5


def _numeric_gradient(f, x: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[index] += EPS
        down[index] -= EPS
        grad[index] = (f(up) - f(down)) / (2 * EPS)
    return grad


def _random_plan(rng: np.random.Generator, n: int, m: int) -> np.ndarray:
    plan = rng.uniform(0, 1, size=(n, m))
    return plan / plan.sum()


def _random_probs(rng: np.random.Generator, n: int) -> np.ndarray:
    p = rng.uniform(0.05, 0.95, size=n)
    return np.column_stack([1 - p, p])


def test_alignment_single_pair() -> None:
    term = alignment_loss(np.array([[1.0]]), np.array([[0.0]]), np.array([[2.0]]), alpha=0.05)
    assert term.value == pytest.approx(0.2)


def test_alignment_identical_embeddings_is_zero() -> None:
    h = np.arange(6.0).reshape(3, 2)
    assert alignment_loss(np.eye(3) / 3, h, h).value == 0.0


def test_alignment_rejects_mismatched_plan() -> None:
    with pytest.raises(DimensionError):
        alignment_loss(np.ones((2, 2)), np.zeros((3, 1)), np.zeros((2, 1)))


def test_classification_half_probability_is_ln2() -> None:
    term = classification_loss(
        np.array([[0.5, 0.5]]), np.array([1]), np.empty((0, 2)), np.empty(0, dtype=np.int64)
    )
    assert term.value == pytest.approx(math.log(2))


def test_classification_perfect_prediction_and_zero_source_weight() -> None:
    perfect = classification_loss(
        np.array([[0.0, 1.0]]), np.array([1]), np.array([[1.0, 0.0]]), np.array([0])
    )
    assert perfect.value == 0.0
    ignored = classification_loss(
        np.array([[0.9, 0.1]]), np.array([1]), np.array([[1.0, 0.0]]), np.array([0]), theta_s=0.0
    )
    assert ignored.value == 0.0


def test_classification_zero_probability_is_floored() -> None:
    term = classification_loss(
        np.array([[1.0, 0.0]]), np.array([1]), np.empty((0, 2)), np.empty(0, dtype=np.int64)
    )
    assert term.value == pytest.approx(-math.log(1e-12))
    assert np.isfinite(term.grads["source_probs"]).all()


def test_group_entropy_examples() -> None:
    half = np.array([[0.5, 0.5]])
    assert group_entropy_loss(np.array([[1.0]]), np.array([1]), half).value == pytest.approx(math.log(2))
    assert group_entropy_loss(np.zeros((2, 1)), np.array([0, 1]), half).value == 0.0
    confident = group_entropy_loss(np.array([[0.5], [0.0]]), np.array([1, 0]), np.array([[0.0, 1.0]]))
    assert confident.value == 0.0


def test_group_entropy_strict_normalization() -> None:
    block = np.full((2, 2), 0.25)
    probs = np.array([[0.5, 0.5], [0.5, 0.5]])
    labels = np.array([0, 1])
    assert group_entropy_loss(block, labels, probs).value == pytest.approx(math.log(2))
    assert group_entropy_loss(block, labels, probs, strict=True).value == pytest.approx(math.log(2) / 4)


def test_class_center_of_one_class() -> None:
    centers = class_centers(
        np.array([[1.0, 1.0], [3.0, 3.0]]), np.array([1, 1]), subsample_fraction=1.0, classes=(1,)
    )
    np.testing.assert_allclose(centers.center(1), [2.0, 2.0])
    with pytest.raises(DegenerateClassError):
        centers.center(0)


def test_singleton_classes_are_their_own_centers() -> None:
    embeddings = np.array([[1.0, 0.0], [0.0, 1.0]])
    centers = class_centers(embeddings, np.array([0, 1]), subsample_fraction=1.0)
    np.testing.assert_array_equal(centers.center(0), embeddings[0])
    np.testing.assert_array_equal(centers.center(1), embeddings[1])


def test_center_subsample_takes_half() -> None:
    labels = np.array([0, 1] * 50)
    chosen = center_subsample(labels, 0.5, np.random.default_rng(0))
    assert len(chosen) == 50
    assert len(np.unique(chosen)) == 50


def test_center_subsample_missing_class() -> None:
    with pytest.raises(DegenerateClassError):
        center_subsample(np.zeros(10, dtype=np.int64), 0.5, np.random.default_rng(0))


def _one_dim_centers(distance: float) -> ClassCenters:
    domain = DomainCenters(c0=np.array([0.0]), c1=np.array([distance]))
    return ClassCenters(source=domain, target=domain)


def test_centroid_samples_at_centers_one_apart() -> None:
    h = np.array([[0.0], [1.0]])
    y = np.array([0, 1])
    assert centroid_loss(h, y, h, y, _one_dim_centers(1.0)).value == pytest.approx(-2.0)


def test_centroid_coinciding_centers_is_zero() -> None:
    h = np.zeros((2, 1))
    y = np.array([0, 1])
    assert centroid_loss(h, y, h, y, _one_dim_centers(0.0)).value == 0.0


def test_centroid_between_term_is_capped() -> None:
    h = np.array([[0.0], [10.0]])
    y = np.array([0, 1])
    assert centroid_loss(h, y, h, y, _one_dim_centers(10.0), margin=10.0).value == pytest.approx(-20.0)


def test_total_objective_sums_weighted_terms() -> None:
    weights = LossWeights(alpha=0.05, theta_s=1.0, beta=0.15, lam=0.5)
    value = total_objective(0.2, 0.7, 0.4, -1.0, weights)
    assert value.total == pytest.approx(0.2 + 0.7 + 0.5 * 0.4 + 0.15 * -1.0)
    assert value.l_lot == pytest.approx(0.9)
    assert total_objective(0.0, 0.0, 0.0, 0.0, weights).total == 0.0


def test_total_objective_with_ablated_weights_is_the_lot_term() -> None:
    value = total_objective(0.2, 0.7, 0.4, -1.0, LossWeights(beta=0.0, lam=0.0))
    assert value.total == pytest.approx(value.l_lot)


def test_total_objective_names_non_finite_term() -> None:
    with pytest.raises(DiagnosticsError) as info:
        total_objective(0.1, math.nan, 0.0, 0.0, LossWeights())
    assert info.value.term == "L_cls"


@pytest.mark.parametrize("seed", range(20))
def test_term_gradients_match_finite_differences(seed) -> None:
    rng = np.random.default_rng(seed)
    hs, ht = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    plan = _random_plan(rng, 3, 3)

    align = alignment_loss(plan, hs, ht, alpha=0.3)
    np.testing.assert_allclose(
        align.grads["source"],
        _numeric_gradient(lambda x: alignment_loss(plan, x, ht, alpha=0.3).value, hs),
        rtol=1e-4,
        atol=1e-8,
    )
    np.testing.assert_allclose(
        align.grads["target"],
        _numeric_gradient(lambda x: alignment_loss(plan, hs, x, alpha=0.3).value, ht),
        rtol=1e-4,
        atol=1e-8,
    )

    ps, pl = _random_probs(rng, 3), _random_probs(rng, 2)
    ys, yl = rng.integers(0, 2, size=3), rng.integers(0, 2, size=2)
    cls = classification_loss(ps, ys, pl, yl, theta_s=0.7)
    np.testing.assert_allclose(
        cls.grads["source_probs"],
        _numeric_gradient(lambda x: classification_loss(x, ys, pl, yl, theta_s=0.7).value, ps),
        rtol=1e-4,
        atol=1e-8,
    )
    np.testing.assert_allclose(
        cls.grads["target_probs"],
        _numeric_gradient(lambda x: classification_loss(ps, ys, x, yl, theta_s=0.7).value, pl),
        rtol=1e-4,
        atol=1e-8,
    )

    pu = _random_probs(rng, 3)
    for strict in (False, True):
        group = group_entropy_loss(plan, ys, pu, strict=strict)
        np.testing.assert_allclose(
            group.grads["unlabeled_probs"],
            _numeric_gradient(lambda x: group_entropy_loss(plan, ys, x, strict=strict).value, pu),
            rtol=1e-4,
            atol=1e-8,
        )

    y_both = np.array([0, 1, 1])
    centers = ClassCenters(
        source=DomainCenters(c0=rng.normal(size=4), c1=rng.normal(size=4)),
        target=DomainCenters(c0=rng.normal(size=4), c1=rng.normal(size=4)),
    )
    centroid = centroid_loss(hs, y_both, ht, y_both, centers)
    np.testing.assert_allclose(
        centroid.grads["source"],
        _numeric_gradient(lambda x: centroid_loss(x, y_both, ht, y_both, centers).value, hs),
        rtol=1e-4,
        atol=1e-8,
    )
    np.testing.assert_allclose(
        centroid.grads["target"],
        _numeric_gradient(lambda x: centroid_loss(hs, y_both, x, y_both, centers).value, ht),
        rtol=1e-4,
        atol=1e-8,
    )


def _with_layer(params: nn.ModelParams, index: int, weight: np.ndarray) -> nn.ModelParams:
    layers = list(params.layers)
    old = layers[index]
    layers[index] = nn.Layer(weight=weight, bias=old.bias, activation=old.activation)
    return params._replace_layers(layers)


@pytest.mark.parametrize("seed", range(3))
def test_full_objective_gradient_through_the_network(seed) -> None:
    rng = np.random.default_rng(seed)
    config = TrainConfiguration(
        batch_size=4, generator_dims="5", classifier_dims="3", alpha=0.3, beta=0.2, lam=0.6
    )
    params = nn.init_params(3, (5,), (3,), rng)
    X = rng.normal(size=(8, 3))
    ys, yl = np.array([0, 1, 0, 1]), np.array([1, 0])
    plan = _random_plan(rng, 4, 4)
    centers = ClassCenters(
        source=DomainCenters(c0=rng.normal(size=5), c1=rng.normal(size=5)),
        target=DomainCenters(c0=rng.normal(size=5), c1=rng.normal(size=5)),
    )

    def total(p: nn.ModelParams) -> float:
        return ssot_objective(p, nn.forward(p, X), ys, yl, plan, centers, config)[0].total

    _, grads = ssot_objective(params, nn.forward(params, X), ys, yl, plan, centers, config)
    for index, layer in enumerate(params.layers):
        numeric = _numeric_gradient(lambda w: total(_with_layer(params, index, w)), layer.weight)
        np.testing.assert_allclose(grads.weights[index], numeric, rtol=1e-4, atol=1e-7)
