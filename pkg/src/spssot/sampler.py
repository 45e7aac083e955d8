"""Self-paced, hardness-harmonized under-sampling of the majority class.

The majority samples of a labeled pool are cut into equal-width hardness bins.
Bin l gets the unnormalized weight 1 / (h_l + omega), where h_l is its mean
hardness and omega the self-paced factor, and the minority-size quota is split
across bins in proportion to those weights.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Protocol, Sequence

import numpy as np
import pandas as pd

from spssot.configuration import HardnessConfig
from spssot.data import TabularDataset
from spssot.errors import DegeneratePoolError, SamplingInfeasibleError

logger = logging.getLogger(__name__)

OMEGA_MAX = 1e6


class Scorer(Protocol):
    """Anything that returns positive-class probabilities for a feature matrix."""

    def predict(self, X: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class SamplerState:
    """Per-bin statistics of one under-sampling draw."""

    hardness_values: np.ndarray
    bin_edges: np.ndarray
    population: np.ndarray
    average_hardness: np.ndarray
    self_paced_factor: float
    weights: np.ndarray
    quotas: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "bin": np.arange(len(self.population)),
                "population": self.population,
                "h": self.average_hardness,
                "weight": self.weights,
                "quota": self.quotas,
            }
        )

    def to_tsv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, sep="\t", index=False, float_format="%.10g")


def hardness(
    probs: np.ndarray,
    labels: np.ndarray,
    kind: Literal["absolute_error", "squared_error"] = "squared_error",
) -> np.ndarray:
    """Per-sample classification hardness |p - y| or (p - y)^2."""
    error = np.asarray(probs, dtype=np.float64) - np.asarray(labels, dtype=np.float64)
    match kind:
        case "absolute_error":
            return np.abs(error)
        case "squared_error":
            return error**2
        case _:
            raise ValueError(f"Unrecognized hardness kind {kind!r}")


def self_paced_factor(i: int, n: int) -> float:
    """omega = tan(i * pi / (2n)), with i = n clamped to `OMEGA_MAX`.

    Examples:
        >>> round(self_paced_factor(1, 5), 5)
        0.32492
        >>> self_paced_factor(5, 5)
        1000000.0
    """
    if n < 1 or not 1 <= i <= n:
        raise ValueError(f"member index {i} is outside 1..{n}")
    if i == n:
        return OMEGA_MAX
    return min(math.tan(i * math.pi / (2 * n)), OMEGA_MAX)


def bin_weights(average_hardness: np.ndarray, population: np.ndarray, omega: float) -> np.ndarray:
    """Normalized weights 1 / (h_l + omega) over nonempty bins; empty bins get 0."""
    nonempty = population > 0
    raw = np.zeros(len(population))
    with np.errstate(divide="ignore"):
        raw[nonempty] = 1.0 / (average_hardness[nonempty] + omega)
    if not np.isfinite(raw).all():
        # h_l = omega = 0: the zero-hardness bins take all the weight
        raw = np.where(np.isinf(raw), 1.0, 0.0)
    return raw / raw.sum()


def _largest_remainder(shares: np.ndarray, total: int) -> np.ndarray:
    base = np.floor(shares).astype(np.int64)
    left = total - int(base.sum())
    if left > 0:
        order = np.argsort(-(shares - base), kind="stable")
        base[order[:left]] += 1
    return base


def allocate_quotas(weights: np.ndarray, population: np.ndarray, total: int) -> np.ndarray:
    """Split `total` draws over bins by largest remainder, capped at each bin's population.

    Draws that exceed a bin's population are redistributed over the bins that
    still have room, in proportion to their weights.
    """
    population = np.asarray(population, dtype=np.int64)
    if total > population.sum():
        raise SamplingInfeasibleError(f"cannot draw {total} from {population.sum()} samples")
    quotas = np.zeros(len(population), dtype=np.int64)
    active = population > 0
    remaining = total
    while remaining > 0:
        share = np.where(active, weights, 0.0)
        if share.sum() <= 0:
            share = active.astype(np.float64)
        quotas += _largest_remainder(share / share.sum() * remaining, remaining)
        over = quotas > population
        remaining = int((quotas - population)[over].sum())
        quotas[over] = population[over]
        active &= quotas < population
    return quotas


def harmonized_undersample(
    majority_probs: np.ndarray,
    majority_labels: np.ndarray,
    minority_count: int,
    config: HardnessConfig,
    omega: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, SamplerState]:
    """Draw `minority_count` majority samples, harmonizing hardness across bins.

    Args:
        majority_probs: Ensemble positive-class probability of each majority sample.
        majority_labels: Their labels (all equal).
        minority_count: Number of samples to draw.
        config: Hardness kind and bin count.
        omega: Self-paced factor.
        rng: Random generator.

    Returns:
        tuple[np.ndarray, SamplerState]: Sorted indices into the majority arrays and the bin statistics.
    """
    n = len(majority_labels)
    if minority_count < 1:
        raise SamplingInfeasibleError("minority_count must be at least 1")
    if minority_count > n:
        raise SamplingInfeasibleError(
            f"cannot draw {minority_count} samples from a majority of {n}"
        )
    values = hardness(majority_probs, majority_labels, config.hardness_kind)
    k = config.n_bins
    lo, hi = float(values.min()), float(values.max())
    edges = np.linspace(lo, hi, k + 1)
    if hi > lo:
        assignment = np.minimum(((values - lo) / (hi - lo) * k).astype(np.int64), k - 1)
    else:
        assignment = np.zeros(n, dtype=np.int64)

    population = np.bincount(assignment, minlength=k)
    sums = np.bincount(assignment, weights=values, minlength=k)
    average = np.divide(sums, population, out=np.zeros(k), where=population > 0)
    weights = bin_weights(average, population, omega)
    quotas = allocate_quotas(weights, population, minority_count)

    chosen = [
        rng.choice(np.flatnonzero(assignment == b), size=int(q), replace=False)
        for b, q in enumerate(quotas)
        if q > 0
    ]
    indices = np.sort(np.concatenate(chosen))
    state = SamplerState(
        hardness_values=values,
        bin_edges=edges,
        population=population,
        average_hardness=average,
        self_paced_factor=omega,
        weights=weights,
        quotas=quotas,
    )
    return indices, state


def balance_pool(
    pool: TabularDataset,
    scorer: Scorer,
    config: HardnessConfig,
    omega: float,
    rng: np.random.Generator,
) -> tuple[TabularDataset, SamplerState]:
    """Keep every minority sample and under-sample the majority to the same count."""
    negatives, positives = pool.class_counts()
    if negatives == 0 or positives == 0:
        raise DegeneratePoolError(f"{pool.domain_tag} pool holds a single class")
    assert pool.labels is not None
    majority_label = 0 if negatives >= positives else 1
    majority = np.flatnonzero(pool.labels == majority_label)
    minority = np.flatnonzero(pool.labels != majority_label)
    probs = scorer.predict(pool.features[majority])
    picked, state = harmonized_undersample(
        probs, pool.labels[majority], len(minority), config, omega, rng
    )
    kept = np.sort(np.concatenate([minority, majority[picked]]))
    return pool.subset(kept), state


def build_balanced_pools(
    pools: Sequence[TabularDataset],
    ensemble: Scorer,
    member_index: int,
    config: HardnessConfig,
    rng: np.random.Generator,
) -> tuple[tuple[TabularDataset, ...], tuple[SamplerState, ...]]:
    """Balance each labeled pool (source, labeled target, ...) for ensemble member `member_index`.

    Members 1..n_members-1 are the resampled ones, so omega uses
    n = n_members - 1 and the last member samples with omega at its cap.

    Returns:
        tuple: The balanced pools, in input order, and the sampler state of each.
    """
    omega = self_paced_factor(member_index, max(config.n_members - 1, member_index, 1))
    balanced, states = [], []
    for pool in pools:
        kept, state = balance_pool(pool, ensemble, config, omega, rng)
        logger.debug(
            "Member %d: omega=%.4g, %s pool %d -> %d",
            member_index,
            omega,
            pool.domain_tag,
            len(pool),
            len(kept),
        )
        balanced.append(kept)
        states.append(state)
    return tuple(balanced), tuple(states)
