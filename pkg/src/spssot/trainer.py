"""Training loops: supervised pretraining, SSOT alternating optimization and the
self-paced ensemble of SSOT members.

Every random draw comes from generators spawned off one `SeedSequence` per run,
so a run is reproducible from its configuration alone.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Optional, Sequence

import msgspec
import numpy as np
import pandas as pd

from spssot import nn
from spssot.configuration import TrainConfiguration
from spssot.data import TabularDataset
from spssot.errors import (
    DegenerateClassError,
    DiagnosticsError,
    DimensionError,
    LabelValidationError,
    TrainingDivergenceError,
)
from spssot.losses import (
    ClassCenters,
    DomainCenters,
    ObjectiveValue,
    alignment_loss,
    center_subsample,
    centroid_loss,
    class_means,
    classification_loss,
    group_entropy_loss,
    total_objective,
)
from spssot.sampler import SamplerState, build_balanced_pools
from spssot.transport import label_adaptive_coupling, make_solver

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "L_lot", "L_cls", "L_g", "L_cc", "total")

InitStatus = Literal["ok", "source_only"]


############################  Models  #########################################


@dataclass(frozen=True, eq=False)
class SSOTModel:
    """Trained G and F plus the per-iteration loss log of the run that produced them."""

    params: nn.ModelParams
    log: tuple[ObjectiveValue, ...] = ()
    init_status: InitStatus = "ok"

    def predict(self, X: np.ndarray) -> np.ndarray:
        return nn.predict_positive(self.params, X)

    def log_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                (i, row.l_lot, row.l_cls, row.l_g, row.l_cc, row.total)
                for i, row in enumerate(self.log, start=1)
            ],
            columns=list(LOG_COLUMNS),
        )


@dataclass(frozen=True, eq=False)
class EnsembleModel:
    """Ordered ensemble members; predictions are the mean member probability."""

    members: tuple[SSOTModel, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        dims = {m.params.input_dim for m in self.members}
        if len(dims) > 1:
            raise DimensionError(f"ensemble members disagree on input dimension: {sorted(dims)}")

    def __len__(self) -> int:
        return len(self.members)

    def with_member(self, member: SSOTModel) -> "EnsembleModel":
        return EnsembleModel(members=self.members + (member,))

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Mean positive-class probability over members.

        Raises:
            ValueError: The ensemble has no members.
        """
        if not self.members:
            raise ValueError("cannot predict with an empty ensemble")
        return np.mean([m.predict(X) for m in self.members], axis=0)


############################  Artifacts  ######################################


class MemberEntry(msgspec.Struct):
    index: int
    checkpoint: str
    log: str
    pool_sizes: list[int]
    init_status: str


class Manifest(msgspec.Struct):
    config_hash: str
    seed: int
    members: list[MemberEntry] = []


@dataclass
class RunArtifacts:
    """Writes per-member checkpoints, training logs, bin statistics and the run manifest."""

    directory: Path
    config_hash: str
    seed: int
    plan_directory: Optional[Path] = None
    entries: list[MemberEntry] = field(default_factory=list)

    def plan_path(self, index: int) -> Optional[Path]:
        if self.plan_directory is None:
            return None
        return self.plan_directory / f"member_{index}_plan.tsv"

    def record(
        self,
        index: int,
        model: SSOTModel,
        pools: Sequence[TabularDataset],
        states: Sequence[SamplerState] = (),
    ) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        checkpoint = f"member_{index}.ckpt"
        log = f"member_{index}_log.tsv"
        nn.save_checkpoint(model.params, self.directory / checkpoint)
        model.log_frame().to_csv(
            self.directory / log, sep="\t", index=False, float_format="%.10g"
        )
        for pool, state in zip(pools, states):
            state.to_tsv(self.directory / f"member_{index}_{pool.domain_tag}_bins.tsv")
        self.entries.append(
            MemberEntry(
                index=index,
                checkpoint=checkpoint,
                log=log,
                pool_sizes=[len(p) for p in pools],
                init_status=model.init_status,
            )
        )
        self.write_manifest()

    def save_last_good(self, index: int, params: nn.ModelParams) -> Path:
        """Keep the last finite parameters of a member whose training diverged."""
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self.directory / f"member_{index}_last_good.ckpt"
        nn.save_checkpoint(params, path)
        logger.warning("Member %d diverged; last finite parameters saved to %s", index, path)
        return path

    def write_manifest(self) -> None:
        manifest = Manifest(config_hash=self.config_hash, seed=self.seed, members=self.entries)
        (self.directory / "manifest.json").write_bytes(msgspec.json.format(msgspec.json.encode(manifest)))


############################  Supervised training  ############################


def _require_labels(dataset: TabularDataset) -> np.ndarray:
    if dataset.labels is None:
        raise LabelValidationError(f"{dataset.domain_tag} pool must be labeled")
    if len(dataset) == 0:
        raise DimensionError(f"{dataset.domain_tag} pool is empty")
    return dataset.labels


def _draw(rng: np.random.Generator, pool_size: int, k: int) -> np.ndarray:
    """k indices into a pool, with replacement only when the pool is smaller than k."""
    return rng.choice(pool_size, size=k, replace=pool_size < k)


def supervised_step(
    params: nn.ModelParams,
    X: np.ndarray,
    y: np.ndarray,
    config: TrainConfiguration,
    velocity: Optional[nn.GradientSet] = None,
) -> tuple[nn.ModelParams, nn.GradientSet, float]:
    """One SGD step on the batch-averaged cross-entropy."""
    cache = nn.forward(params, X)
    term = classification_loss(cache.probs, y, np.empty((0, 2)), np.empty(0, dtype=np.int64))
    if not math.isfinite(term.value):
        raise TrainingDivergenceError("non-finite cross-entropy", term="L_cls", last_good=params)
    grads = nn.backward(params, cache, grad_probs=term.grads["source_probs"])
    params, velocity = nn.sgd_step(params, grads, config.optimizer(), velocity)
    return params, velocity, term.value


def pretrain(
    params: nn.ModelParams,
    dataset: TabularDataset,
    epochs: int,
    config: TrainConfiguration,
    rng: np.random.Generator,
) -> nn.ModelParams:
    """Supervised cross-entropy epochs over shuffled minibatches of `dataset`."""
    labels = _require_labels(dataset)
    velocity = None
    n = len(dataset)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            params, velocity, _ = supervised_step(
                params, dataset.features[batch], labels[batch], config, velocity
            )
    return params


def fit_supervised(
    pool: TabularDataset, config: TrainConfiguration, rng: np.random.Generator
) -> SSOTModel:
    """Train a fresh network by cross-entropy alone on one pool.

    The budget matches an SSOT member: `pretrain_epochs` epochs followed by
    `iterations` minibatch steps of `batch_size` samples.
    """
    labels = _require_labels(pool)
    params = nn.init_params(
        pool.feature_dim,
        config.parse_generator_dims(),
        config.parse_classifier_dims(),
        rng,
    )
    params = pretrain(params, pool, config.pretrain_epochs, config, rng)
    velocity = None
    for _ in range(config.iterations):
        batch = _draw(rng, len(pool), config.batch_size)
        params, velocity, _ = supervised_step(
            params, pool.features[batch], labels[batch], config, velocity
        )
    return SSOTModel(params=params)


############################  SSOT  ###########################################


def initialize_ssot(
    source: TabularDataset,
    target_labeled: TabularDataset,
    config: TrainConfiguration,
    rng: Optional[np.random.Generator] = None,
) -> SSOTModel:
    """Initialize G and F, then pretrain on the source pool and on the labeled target pool.

    A labeled target pool holding a single class is skipped with a warning; the
    model is then pretrained on the source pool only.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    _require_labels(source)
    target_labels = _require_labels(target_labeled)
    if source.feature_dim != target_labeled.feature_dim:
        raise DimensionError("source and target pools have different feature dimensions")

    params = nn.init_params(
        source.feature_dim,
        config.parse_generator_dims(),
        config.parse_classifier_dims(),
        rng,
    )
    params = pretrain(params, source, config.pretrain_epochs, config, rng)
    status: InitStatus = "ok"
    if len(np.unique(target_labels)) < 2:
        logger.warning(
            "Labeled target pool holds a single class; initializing from source pretraining only"
        )
        status = "source_only"
    else:
        params = pretrain(params, target_labeled, config.pretrain_epochs, config, rng)
    return SSOTModel(params=params, init_status=status)


def _batch_centers(
    params: nn.ModelParams,
    pool: TabularDataset,
    fraction: float,
    rng: np.random.Generator,
) -> DomainCenters:
    assert pool.labels is not None
    try:
        chosen = center_subsample(pool.labels, fraction, rng)
    except DegenerateClassError:
        # small pools can miss a class twice in a row; fall back to the whole pool
        logger.debug("Class missing from a %s center subsample; using the whole pool", pool.domain_tag)
        chosen = np.arange(len(pool))
    embeddings = nn.forward_features(params, pool.features[chosen])
    return class_means(embeddings, pool.labels[chosen])


def _check_iteration(params: nn.ModelParams, probs: np.ndarray) -> None:
    if not np.all((probs >= 0) & (probs <= 1)) or not np.allclose(probs.sum(axis=1), 1.0, atol=1e-9):
        raise DiagnosticsError("softmax", float(np.abs(probs.sum(axis=1) - 1.0).max()))
    if not params.is_finite():
        raise DiagnosticsError("parameters", math.nan)


def ssot_objective(
    params: nn.ModelParams,
    cache: nn.ForwardCache,
    source_labels: np.ndarray,
    target_labels: np.ndarray,
    plan: np.ndarray,
    centers: ClassCenters,
    config: TrainConfiguration,
) -> tuple[ObjectiveValue, nn.GradientSet]:
    """Evaluate the full objective on one forward pass and backpropagate it.

    The cache rows are the source batch, then the labeled target batch, then
    the unlabeled target batch. The coupling plan and class centers are
    constants.

    Raises:
        DiagnosticsError: A loss term is not finite.
    """
    weights = config.loss_weights()
    n = len(source_labels)
    half = len(target_labels)
    hs, ht = cache.embeddings[:n], cache.embeddings[n:]
    ps, pl, pu = cache.probs[:n], cache.probs[n : n + half], cache.probs[n + half :]

    align = alignment_loss(plan, hs, ht, alpha=weights.alpha)
    cls = classification_loss(ps, source_labels, pl, target_labels, theta_s=weights.theta_s)
    group = group_entropy_loss(
        plan[:, half:], source_labels, pu, strict=config.strict_group_entropy
    )
    centroid = centroid_loss(
        hs, source_labels, ht[:half], target_labels, centers, margin=config.centroid_margin
    )
    objective = total_objective(align.value, cls.value, group.value, centroid.value, weights)

    grad_target = align.grads["target"].copy()
    grad_target[:half] += weights.beta * centroid.grads["target"]
    grad_embeddings = np.vstack(
        [align.grads["source"] + weights.beta * centroid.grads["source"], grad_target]
    )
    grad_probs = np.vstack(
        [
            cls.grads["source_probs"],
            cls.grads["target_probs"],
            weights.lam * group.grads["unlabeled_probs"],
        ]
    )
    grads = nn.backward(params, cache, grad_probs=grad_probs, grad_embeddings=grad_embeddings)
    return objective, grads


def train_ssot(
    model: SSOTModel,
    source: TabularDataset,
    target_labeled: TabularDataset,
    target_unlabeled: TabularDataset,
    config: TrainConfiguration,
    rng: Optional[np.random.Generator] = None,
    plan_path: Optional[Path] = None,
) -> SSOTModel:
    """Run `config.iterations` alternating coupling / SGD iterations.

    Each iteration recomputes class centers from a random subsample of both
    labeled pools, draws n source, n/2 labeled and n/2 unlabeled target
    samples, solves the label-adaptive coupling with the network fixed, then
    takes one SGD step on the full objective with the coupling fixed.

    Args:
        model: Initialized model.
        source: Labeled source pool.
        target_labeled: Labeled target pool.
        target_unlabeled: Unlabeled target pool.
        config: Training configuration.
        rng: Random generator; defaults to one seeded with `config.seed`.
        plan_path: If set, the first iteration's coupling is written there as TSV.

    Returns:
        SSOTModel: The trained model with its loss log.

    Raises:
        TrainingDivergenceError: A network output, loss term, gradient or parameter became non-finite.
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    ys_pool = _require_labels(source)
    yl_pool = _require_labels(target_labeled)
    if len(target_unlabeled) == 0:
        raise DimensionError("target_unlabeled pool is empty")

    optimizer = config.optimizer()
    solver = make_solver(
        config.solver,
        epsilon=config.sinkhorn_epsilon,
        max_iters=config.sinkhorn_max_iters,
        tol=config.sinkhorn_tol,
    )
    n = config.batch_size
    half = n // 2
    params = model.params
    velocity: Optional[nn.GradientSet] = None
    log: list[ObjectiveValue] = []

    for iteration in range(1, config.iterations + 1):
        centers = ClassCenters(
            source=_batch_centers(params, source, config.center_fraction, rng),
            target=_batch_centers(params, target_labeled, config.center_fraction, rng),
        )
        s_idx = _draw(rng, len(source), n)
        l_idx = _draw(rng, len(target_labeled), half)
        u_idx = _draw(rng, len(target_unlabeled), half)
        ys, yl = ys_pool[s_idx], yl_pool[l_idx]
        X = np.vstack(
            [
                source.features[s_idx],
                target_labeled.features[l_idx],
                target_unlabeled.features[u_idx],
            ]
        )
        cache = nn.forward(params, X)
        if not (np.isfinite(cache.embeddings).all() and np.isfinite(cache.probs).all()):
            raise TrainingDivergenceError(
                f"iteration {iteration}: non-finite network output",
                term="forward",
                last_good=params if params.is_finite() else None,
            )

        coupling, _ = label_adaptive_coupling(
            cache.embeddings[:n], cache.embeddings[n:], ys, yl, cache.probs[n + half :, 1], solver=solver
        )
        if plan_path is not None and iteration == 1:
            coupling.to_tsv(plan_path)

        try:
            objective, grads = ssot_objective(
                params, cache, ys, yl, coupling.plan, centers, config
            )
        except DiagnosticsError as exc:
            raise TrainingDivergenceError(
                f"iteration {iteration}: {exc}", term=exc.term, last_good=params
            ) from exc
        previous = params
        params, velocity = nn.sgd_step(params, grads, optimizer, velocity)
        if not params.is_finite():
            raise TrainingDivergenceError(
                f"iteration {iteration}: parameters became non-finite",
                term="parameters",
                last_good=previous,
            )

        if config.debug:
            _check_iteration(params, cache.probs)
        log.append(objective)
        if config.log_every and iteration % config.log_every == 0:
            logger.debug(
                "iter %d: L_lot=%.5f L_cls=%.5f L_g=%.5f L_cc=%.5f total=%.5f",
                iteration,
                objective.l_lot,
                objective.l_cls,
                objective.l_g,
                objective.l_cc,
                objective.total,
            )

    return SSOTModel(params=params, log=model.log + tuple(log), init_status=model.init_status)


############################  Self-paced ensemble  ############################

MemberFit = Callable[[Sequence[TabularDataset], np.random.SeedSequence, int], SSOTModel]


def fit_ensemble(
    pools: Sequence[TabularDataset],
    fit_member: MemberFit,
    config: TrainConfiguration,
    artifacts: Optional[RunArtifacts] = None,
) -> EnsembleModel:
    """Train `config.n_members` members with self-paced under-sampling between them.

    Member 0 is fit on the full pools. Member i >= 1 is fit on pools balanced by
    the self-paced sampler, using the hardness of the ensemble of members 0..i-1.

    Args:
        pools: Labeled pools that get balanced (e.g. source and labeled target).
        fit_member: Trains one member from (pools, seed sequence, member index).
        config: Training configuration.
        artifacts: Optional writer for checkpoints, logs and the manifest.

    Raises:
        TrainingDivergenceError: A member diverged. Its last finite parameters are
            saved as `member_<i>_last_good.ckpt` when artifacts are written.
    """
    hardness = config.hardness()
    ensemble = EnsembleModel()
    for index, seq in enumerate(np.random.SeedSequence(config.seed).spawn(config.n_members)):
        fit_seq, sample_seq = seq.spawn(2)
        current: Sequence[TabularDataset] = pools
        states: tuple[SamplerState, ...] = ()
        if index > 0:
            current, states = build_balanced_pools(
                pools, ensemble, index, hardness, np.random.default_rng(sample_seq)
            )
        try:
            member = fit_member(current, fit_seq, index)
        except TrainingDivergenceError as exc:
            if artifacts is not None and exc.last_good is not None:
                artifacts.save_last_good(index, exc.last_good)
            raise
        ensemble = ensemble.with_member(member)
        logger.info(
            "Trained member %d/%d on pools of size %s",
            index + 1,
            config.n_members,
            [len(p) for p in current],
        )
        if artifacts is not None:
            artifacts.record(index, member, current, states)
    return ensemble


def train_spssot(
    source: TabularDataset,
    target_labeled: TabularDataset,
    target_unlabeled: TabularDataset,
    config: TrainConfiguration,
    artifacts: Optional[RunArtifacts] = None,
) -> EnsembleModel:
    """Train the self-paced ensemble of SSOT members.

    Every member is freshly initialized and pretrained on its own pools before
    its SSOT iterations. With `n_members=1` this is a single SSOT run.
    """

    def fit_member(
        pools: Sequence[TabularDataset], seq: np.random.SeedSequence, index: int
    ) -> SSOTModel:
        source_pool, labeled_pool = pools
        init_seq, train_seq = seq.spawn(2)
        model = initialize_ssot(
            source_pool, labeled_pool, config, np.random.default_rng(init_seq)
        )
        return train_ssot(
            model,
            source_pool,
            labeled_pool,
            target_unlabeled,
            config,
            np.random.default_rng(train_seq),
            plan_path=artifacts.plan_path(index) if artifacts else None,
        )

    return fit_ensemble((source, target_labeled), fit_member, config, artifacts)


def predict(ensemble: EnsembleModel, X: np.ndarray) -> np.ndarray:
    """Positive-class probability of each row of X under the ensemble."""
    return ensemble.predict(X)
