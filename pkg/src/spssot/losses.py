"""Loss terms of the semi-supervised OT objective and their gradients.

Each term returns a `LossTerm`: its value and the gradients with respect to
the network outputs it reads (embeddings or class probabilities). Couplings
and class centers are constants inside a step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from spssot.configuration import LossWeights
from spssot.errors import DegenerateClassError, DiagnosticsError, DimensionError
from spssot.transport import cost_matrix

LOG_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class LossTerm:
    """A loss value and its gradients, keyed by the input they refer to."""

    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class DomainCenters:
    """Per-class embedding centers of one domain; a center is None when not computed."""

    c0: Optional[np.ndarray] = None
    c1: Optional[np.ndarray] = None

    def center(self, k: int) -> np.ndarray:
        c = self.c1 if k == 1 else self.c0
        if c is None:
            raise DegenerateClassError(f"no center was computed for class {k}")
        return c

    def for_labels(self, labels: np.ndarray) -> np.ndarray:
        """Center of each sample's class, row-aligned with `labels`."""
        labels = np.asarray(labels).reshape(-1)
        computed = self.c0 if self.c0 is not None else self.c1
        width = 0 if computed is None else computed.shape[0]
        out = np.empty((len(labels), width))
        for k in (0, 1):
            mask = labels == k
            if mask.any():
                out[mask] = self.center(k)
        return out

    def between(self) -> float:
        """Squared distance between the two class centers."""
        return float(np.sum((self.center(0) - self.center(1)) ** 2))


@dataclass(frozen=True, eq=False)
class ClassCenters:
    """Class centers of both domains."""

    source: DomainCenters
    target: DomainCenters


def _picked(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return probs[np.arange(len(labels)), labels]


def alignment_loss(
    plan: np.ndarray,
    source_embeddings: np.ndarray,
    target_embeddings: np.ndarray,
    alpha: float = 1.0,
) -> LossTerm:
    """OT alignment: alpha * sum_ij plan_ij * ||h_i^s - h_j^t||^2.

    Gradients are returned under "source" and "target".
    """
    plan = np.asarray(getattr(plan, "plan", plan), dtype=np.float64)
    hs = np.asarray(source_embeddings, dtype=np.float64)
    ht = np.asarray(target_embeddings, dtype=np.float64)
    if plan.shape != (hs.shape[0], ht.shape[0]) or hs.shape[1] != ht.shape[1]:
        raise DimensionError(
            f"plan {plan.shape} does not match embeddings {hs.shape} and {ht.shape}"
        )
    row_mass = plan.sum(axis=1)
    col_mass = plan.sum(axis=0)
    value = float(np.sum(plan * cost_matrix(hs, ht)))
    grad_source = 2.0 * alpha * (row_mass[:, None] * hs - plan @ ht)
    grad_target = 2.0 * alpha * (col_mass[:, None] * ht - plan.T @ hs)
    return LossTerm(
        value=alpha * value,
        grads={"source": grad_source, "target": grad_target},
    )


def _cross_entropy(probs: np.ndarray, labels: np.ndarray, weight: float) -> tuple[float, np.ndarray]:
    n = len(labels)
    grad = np.zeros_like(probs)
    if n == 0:
        return 0.0, grad
    picked = _picked(probs, labels)
    clamped = np.maximum(picked, LOG_FLOOR)
    value = -weight * np.log(clamped).sum() / n
    grad[np.arange(n), labels] = np.where(picked > LOG_FLOOR, -weight / (n * clamped), 0.0)
    return float(value), grad


def classification_loss(
    source_probs: np.ndarray,
    source_labels: np.ndarray,
    target_labeled_probs: np.ndarray,
    target_labels: np.ndarray,
    theta_s: float = 1.0,
) -> LossTerm:
    """theta_s * CE(source) + CE(labeled target), each averaged over its batch.

    Log arguments are floored at 1e-12. Gradients (w.r.t. probabilities) are
    returned under "source_probs" and "target_probs".
    """
    source_probs = np.asarray(source_probs, dtype=np.float64).reshape(-1, 2)
    target_labeled_probs = np.asarray(target_labeled_probs, dtype=np.float64).reshape(-1, 2)
    source_labels = np.asarray(source_labels, dtype=np.int64).reshape(-1)
    target_labels = np.asarray(target_labels, dtype=np.int64).reshape(-1)
    if len(source_probs) != len(source_labels) or len(target_labeled_probs) != len(target_labels):
        raise DimensionError("probabilities and labels differ in length")
    source_value, source_grad = _cross_entropy(source_probs, source_labels, theta_s)
    target_value, target_grad = _cross_entropy(target_labeled_probs, target_labels, 1.0)
    return LossTerm(
        value=source_value + target_value,
        grads={"source_probs": source_grad, "target_probs": target_grad},
    )


def group_entropy_loss(
    coupling_block: np.ndarray,
    source_labels: np.ndarray,
    unlabeled_probs: np.ndarray,
    strict: bool = False,
) -> LossTerm:
    """Expected cross-entropy of unlabeled predictions against coupled source labels.

    value = -(1/Z) * sum_ij block_ij * log p_j[y_i], where Z is the mass of the
    block (zero mass gives 0), or n_s * n_u with `strict=True`. The gradient
    w.r.t. the unlabeled probabilities is returned under "unlabeled_probs".
    """
    block = np.asarray(coupling_block, dtype=np.float64)
    labels = np.asarray(source_labels, dtype=np.int64).reshape(-1)
    probs = np.asarray(unlabeled_probs, dtype=np.float64).reshape(-1, 2)
    if block.shape != (len(labels), len(probs)):
        raise DimensionError(
            f"coupling block {block.shape} does not match {len(labels)} x {len(probs)}"
        )
    grad = np.zeros_like(probs)
    normalizer = float(block.size) if strict else float(block.sum())
    if normalizer <= 0 or block.size == 0:
        return LossTerm(value=0.0, grads={"unlabeled_probs": grad})

    clamped = np.maximum(probs, LOG_FLOOR)
    # mass[c, j]: plan mass sent to unlabeled sample j from source samples of class c
    mass = np.stack([block[labels == c].sum(axis=0) for c in (0, 1)])
    value = -(mass * np.log(clamped.T)).sum() / normalizer
    grad = np.where(probs > LOG_FLOOR, -(mass.T / clamped) / normalizer, 0.0)
    return LossTerm(value=float(value), grads={"unlabeled_probs": grad})


def center_subsample(
    labels: np.ndarray,
    subsample_fraction: float = 0.5,
    rng: Optional[np.random.Generator] = None,
    classes: Sequence[int] = (0, 1),
) -> np.ndarray:
    """Sorted indices of a random subsample holding every class in `classes`.

    The subsample holds round(fraction * n) rows (at least 1). If a class is
    missing from it, one more subsample is drawn before giving up.

    Raises:
        DegenerateClassError: A class is absent from the subsample after the retry.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n = len(labels)
    if n == 0:
        raise DegenerateClassError("no samples to compute class centers from")
    rng = rng if rng is not None else np.random.default_rng(0)
    size = min(n, max(1, int(math.floor(subsample_fraction * n + 0.5))))
    for _ in range(2):
        chosen = np.sort(rng.choice(n, size=size, replace=False))
        if all((labels[chosen] == k).any() for k in classes):
            return chosen
    raise DegenerateClassError(
        f"a class is missing from a {size}-sample subsample of {n} after one retry"
    )


def class_means(
    embeddings: np.ndarray, labels: np.ndarray, classes: Sequence[int] = (0, 1)
) -> DomainCenters:
    """Mean embedding of each class in `classes` over all given rows."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    means = {}
    for k in classes:
        mask = labels == k
        if not mask.any():
            raise DegenerateClassError(f"class {k} has no samples")
        means[k] = embeddings[mask].mean(axis=0)
    return DomainCenters(c0=means.get(0), c1=means.get(1))


def class_centers(
    embeddings: np.ndarray,
    labels: np.ndarray,
    subsample_fraction: float = 0.5,
    rng: Optional[np.random.Generator] = None,
    classes: Sequence[int] = (0, 1),
) -> DomainCenters:
    """Mean embedding of each class over a random subsample of one domain.

    Raises:
        DegenerateClassError: A class is absent from the subsample after one retry.
    """
    chosen = center_subsample(labels, subsample_fraction, rng, classes)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    return class_means(np.asarray(embeddings)[chosen], labels[chosen], classes)


def centroid_loss(
    source_embeddings: np.ndarray,
    source_labels: np.ndarray,
    target_labeled_embeddings: np.ndarray,
    target_labels: np.ndarray,
    centers: ClassCenters,
    margin: float = 10.0,
) -> LossTerm:
    """Discriminative centroid loss over both labeled domains.

    value = mean_i ||h_i^s - c^s_{y_i}||^2 - min(||c_0^s - c_1^s||^2, margin)
          + mean_j ||h_j^t - c^t_{y_j}||^2 - min(||c_0^t - c_1^t||^2, margin)

    Gradients w.r.t. the embeddings are returned under "source" and "target".
    """
    value = 0.0
    grads: dict[str, np.ndarray] = {}
    parts = (
        ("source", source_embeddings, source_labels, centers.source),
        ("target", target_labeled_embeddings, target_labels, centers.target),
    )
    for key, h, y, domain in parts:
        h = np.asarray(h, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        if len(h) != len(y):
            raise DimensionError(f"{key}: {len(h)} embeddings for {len(y)} labels")
        grads[key] = np.zeros_like(h)
        if len(h):
            diff = h - domain.for_labels(y)
            value += float(np.einsum("ij,ij->", diff, diff) / len(h))
            grads[key] = 2.0 * diff / len(h)
        value -= min(domain.between(), margin)
    return LossTerm(value=value, grads=grads)


@dataclass(frozen=True)
class ObjectiveValue:
    """Components and total of the training objective for one iteration."""

    l_ot: float
    l_cls: float
    l_g: float
    l_cc: float
    total: float

    @property
    def l_lot(self) -> float:
        return self.l_ot + self.l_cls


def total_objective(
    alignment: float,
    classification: float,
    group_entropy: float,
    centroid: float,
    weights: LossWeights,
) -> ObjectiveValue:
    """L = (alignment + classification) + lam * group_entropy + beta * centroid.

    `alignment` already carries alpha and `classification` already carries theta_s.

    Raises:
        DiagnosticsError: A term is not finite.
    """
    for term, value in (
        ("L_ot", alignment),
        ("L_cls", classification),
        ("L_g", group_entropy),
        ("L_cc", centroid),
    ):
        if not math.isfinite(value):
            raise DiagnosticsError(term, value)
    total = alignment + classification + weights.lam * group_entropy + weights.beta * centroid
    return ObjectiveValue(
        l_ot=alignment, l_cls=classification, l_g=group_entropy, l_cc=centroid, total=total
    )
