"""Discrete optimal-transport kernels.

Cost and label-adaptive reweight matrices, and two coupling solvers backed by
POT: the exact network simplex (`ot.emd`) and log-domain Sinkhorn
(`ot.sinkhorn(..., method="sinkhorn_log")`).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Literal, Optional

import numpy as np
import ot
import pandas as pd
from scipy.spatial.distance import cdist

from spssot.errors import (
    DimensionError,
    IterationLimitError,
    NormalizationError,
    ProbabilityRangeError,
)

logger = logging.getLogger(__name__)

MARGINAL_TOL = 1e-9

Solver = Callable[[np.ndarray, np.ndarray, np.ndarray], "Coupling"]


@dataclass(frozen=True, eq=False)
class Coupling:
    """A transport plan with its row and column marginals."""

    plan: np.ndarray
    row_marginals: np.ndarray
    col_marginals: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.plan.shape  # type: ignore[return-value]

    def objective(self, cost: np.ndarray) -> float:
        """Frobenius product <plan, cost>."""
        return float(np.sum(self.plan * cost))

    def marginal_residual(self) -> float:
        """Largest absolute deviation of the plan's row/column sums from the marginals."""
        rows = np.abs(self.plan.sum(axis=1) - self.row_marginals).max(initial=0.0)
        cols = np.abs(self.plan.sum(axis=0) - self.col_marginals).max(initial=0.0)
        return float(max(rows, cols))

    def to_tsv(self, path: str | Path) -> None:
        """Dump the plan as a headerless TSV matrix."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(self.plan).to_csv(
            path, sep="\t", header=False, index=False, float_format="%.17g"
        )


def uniform_marginals(n: int) -> np.ndarray:
    """Uniform probability vector of length n."""
    return np.full(n, 1.0 / n)


def cost_matrix(S: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between source rows and target rows."""
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    T = np.atleast_2d(np.asarray(T, dtype=np.float64))
    if S.shape[1] != T.shape[1]:
        raise DimensionError(f"embedding widths differ: {S.shape[1]} vs {T.shape[1]}")
    return cdist(S, T, metric="sqeuclidean")


def reweight_matrix(
    y_source: np.ndarray,
    target_labeled: np.ndarray,
    target_unlabeled_probs: np.ndarray,
) -> np.ndarray:
    """Label-adaptive reweight matrix R, labeled target columns first.

    R[i, j] = |y_s[i] - y_t[j]| for labeled target columns and
    |y_s[i] - p_t[j]| for unlabeled columns, where p_t is the predicted
    positive-class probability.
    """
    y_source = np.asarray(y_source, dtype=np.float64).reshape(-1)
    labeled = np.asarray(target_labeled, dtype=np.float64).reshape(-1)
    probs = np.asarray(target_unlabeled_probs, dtype=np.float64).reshape(-1)
    if probs.size and (probs.min() < 0 or probs.max() > 1 or not np.isfinite(probs).all()):
        raise ProbabilityRangeError("unlabeled probabilities must lie in [0, 1]")
    columns = np.concatenate([labeled, probs])
    return np.abs(y_source[:, None] - columns[None, :])


def _check_problem(cost: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cost = np.asarray(cost, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if cost.shape != (a.size, b.size):
        raise DimensionError(f"cost of shape {cost.shape} does not match marginals {a.size}x{b.size}")
    if not np.isfinite(cost).all():
        raise DimensionError("cost matrix has non-finite entries")
    if (a < 0).any() or (b < 0).any():
        raise NormalizationError("marginals must be nonnegative")
    for name, m in (("row", a), ("column", b)):
        if abs(m.sum() - 1.0) > MARGINAL_TOL:
            raise NormalizationError(f"{name} marginals sum to {m.sum()!r}, not 1")
    return cost, a, b


def _reinsert(plan: np.ndarray, rows: np.ndarray, cols: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    full = np.zeros(shape)
    full[np.ix_(rows, cols)] = plan
    return full


def solve_exact(cost: np.ndarray, a: np.ndarray, b: np.ndarray, max_iters: int = 1_000_000) -> Coupling:
    """Exact optimal coupling via the network simplex.

    Zero-mass rows and columns are dropped before solving and come back as zero
    rows/columns. The solver's pivoting is deterministic, so equal inputs give
    equal plans.

    Args:
        cost: Effective cost matrix (e.g. R * C, elementwise).
        a: Row marginals (probability vector).
        b: Column marginals (probability vector).
        max_iters: Network simplex iteration limit.

    Raises:
        NormalizationError: A marginal does not sum to 1 within 1e-9.
        IterationLimitError: The network simplex stopped before optimality.
    """
    cost, a, b = _check_problem(cost, a, b)
    rows, cols = np.flatnonzero(a > 0), np.flatnonzero(b > 0)
    sub_a, sub_b = a[rows], b[cols]
    # POT demands exactly equal masses; both already sum to 1 within tolerance.
    sub_b = sub_b * (sub_a.sum() / sub_b.sum())
    plan, log = ot.emd(sub_a, sub_b, cost[np.ix_(rows, cols)], numItermax=max_iters, log=True)
    if log.get("result_code", 1) != 1:
        raise IterationLimitError(max_iters, float(np.inf))
    return Coupling(plan=_reinsert(np.asarray(plan), rows, cols, cost.shape), row_marginals=a, col_marginals=b)


def _round_to_marginals(plan: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Project an approximately feasible plan onto the transportation polytope.

    Rows and columns are first scaled down to their marginals, then the missing
    mass is added back as a rank-one correction. The result is nonnegative and
    matches both marginals up to rounding.
    """
    row_sums = plan.sum(axis=1)
    plan = plan * np.minimum(1.0, np.divide(a, row_sums, out=np.ones_like(a), where=row_sums > 0))[:, None]
    col_sums = plan.sum(axis=0)
    plan = plan * np.minimum(1.0, np.divide(b, col_sums, out=np.ones_like(b), where=col_sums > 0))[None, :]
    missing_rows = np.maximum(a - plan.sum(axis=1), 0.0)
    missing_cols = np.maximum(b - plan.sum(axis=0), 0.0)
    mass = missing_cols.sum()
    if mass > 0:
        plan = plan + np.outer(missing_rows, missing_cols) / mass
    return plan


def solve_sinkhorn(
    cost: np.ndarray,
    a: np.ndarray,
    b: np.ndarray,
    epsilon: float = 0.01,
    max_iters: int = 10000,
    tol: float = 1e-6,
) -> Coupling:
    """Entropic coupling via log-domain Sinkhorn scaling.

    The cost is divided by its largest entry before scaling, so `epsilon` is
    relative to the cost range and the same value works for raw embedding
    distances and for unit-scale costs. Once the scaling has converged, the plan
    is rounded onto the marginals so it is exactly feasible; its objective is
    read against the caller's unscaled cost.

    Raises:
        IterationLimitError: The marginal residual is still at or above `tol` after `max_iters`.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    cost, a, b = _check_problem(cost, a, b)
    rows, cols = np.flatnonzero(a > 0), np.flatnonzero(b > 0)
    sub_a, sub_b = a[rows], b[cols]
    sub_cost = cost[np.ix_(rows, cols)]
    if sub_cost.max(initial=0.0) > 0:
        sub_cost = ot.utils.cost_normalization(sub_cost, "max")
    plan = np.asarray(
        ot.sinkhorn(
            sub_a,
            sub_b,
            sub_cost,
            epsilon,
            method="sinkhorn_log",
            numItermax=max_iters,
            stopThr=tol,
            warn=False,
        )
    )
    residual = Coupling(plan=plan, row_marginals=sub_a, col_marginals=sub_b).marginal_residual()
    if not residual < tol:
        raise IterationLimitError(max_iters, residual)
    logger.debug("sinkhorn converged with marginal residual %.3e", residual)
    plan = _round_to_marginals(plan, sub_a, sub_b)
    return Coupling(plan=_reinsert(plan, rows, cols, cost.shape), row_marginals=a, col_marginals=b)


def make_solver(
    name: Literal["exact", "sinkhorn"],
    epsilon: float = 0.01,
    max_iters: int = 10000,
    tol: float = 1e-6,
) -> Solver:
    """Return a `(cost, a, b) -> Coupling` solver by name."""
    match name:
        case "exact":
            return solve_exact
        case "sinkhorn":

            def sinkhorn(cost: np.ndarray, a: np.ndarray, b: np.ndarray) -> Coupling:
                return solve_sinkhorn(cost, a, b, epsilon=epsilon, max_iters=max_iters, tol=tol)

            return sinkhorn
        case _:
            raise ValueError(f"Unrecognized solver {name!r}. Expected one of: exact, sinkhorn")


def label_adaptive_coupling(
    source_embeddings: np.ndarray,
    target_embeddings: np.ndarray,
    y_source: np.ndarray,
    y_labeled: np.ndarray,
    unlabeled_probs: np.ndarray,
    solver: Optional[Solver] = None,
) -> tuple[Coupling, np.ndarray]:
    """Solve the label-adaptive OT problem on one batch with uniform marginals.

    `target_embeddings` holds the labeled target rows first, then the unlabeled
    rows, matching `reweight_matrix`.

    Returns:
        tuple[Coupling, np.ndarray]: The plan and the effective cost R * C.
    """
    solver = solver or solve_exact
    cost = cost_matrix(source_embeddings, target_embeddings)
    effective = reweight_matrix(y_source, y_labeled, unlabeled_probs) * cost
    n_s, n_t = effective.shape
    return solver(effective, uniform_marginals(n_s), uniform_marginals(n_t)), effective
