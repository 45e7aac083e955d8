"""Define the configurable parameters for training and experiments."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Literal, Mapping, Optional, Type, TypeVar

import msgspec
from dotenv import dotenv_values
from langchain_core.runnables import RunnableConfig, ensure_config

from spssot.errors import ConfigurationError
from spssot.features import DEMOGRAPHICS

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, raw: Any, default: Any) -> Any:
    """Convert a raw (usually string) value to the type of a field's default."""
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise ConfigurationError(key, str(exc)) from exc
    return text


def _split_list(text: str) -> list[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


@dataclass(frozen=True)
class LossWeights:
    """Weights of the four terms in the training objective."""

    alpha: float = 0.05
    theta_s: float = 1.0
    beta: float = 0.15
    lam: float = 0.5

    def __post_init__(self) -> None:
        for name in ("alpha", "theta_s", "beta", "lam"):
            if getattr(self, name) < 0:
                raise ConfigurationError(name, "loss weights must be nonnegative")


@dataclass(frozen=True)
class OptimizerConfig:
    """Plain SGD settings."""

    learning_rate: float = 0.001
    batch_size: int = 128
    momentum: float = 0.0

    def __post_init__(self) -> None:
        if not self.learning_rate >= 0:
            raise ConfigurationError("learning_rate", "must be nonnegative")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size", "must be positive")
        if self.momentum < 0:
            raise ConfigurationError("momentum", "must be nonnegative")


@dataclass(frozen=True)
class HardnessConfig:
    """Self-paced under-sampling settings."""

    hardness_kind: Literal["absolute_error", "squared_error"] = "squared_error"
    n_bins: int = 10
    n_members: int = 5

    def __post_init__(self) -> None:
        if self.hardness_kind not in ("absolute_error", "squared_error"):
            raise ConfigurationError("hardness_kind", f"unknown kind {self.hardness_kind!r}")
        if self.n_bins < 1:
            raise ConfigurationError("n_bins", "must be at least 1")
        if self.n_members < 1:
            raise ConfigurationError("n_members", "must be at least 1")


T = TypeVar("T", bound="_FileConfigurable")


class _FileConfigurable:
    """Shared constructors for the configuration dataclasses."""

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls) if f.init}  # type: ignore[arg-type]

    @classmethod
    def from_mapping(cls: Type[T], values: Mapping[str, Any]) -> T:
        """Build an instance from a mapping, coercing strings to the field types.

        Keys that are not fields of the class are ignored.
        """
        defaults = cls()  # type: ignore[call-arg]
        kwargs = {
            k: _coerce(k, v, getattr(defaults, k))
            for k, v in values.items()
            if k in cls.field_names() and v is not None
        }
        return cls(**kwargs)  # type: ignore[call-arg]

    @classmethod
    def from_runnable_config(
        cls: Type[T], config: Optional[RunnableConfig] = None
    ) -> T:
        """Create an instance from a RunnableConfig object.

        Args:
            cls (Type[T]): The class itself.
            config (Optional[RunnableConfig]): The configuration object to use.

        Returns:
            T: An instance of the class with the specified configuration.
        """
        config = ensure_config(config)
        configurable = config.get("configurable") or {}
        return cls.from_mapping(configurable)


@dataclass(kw_only=True)
class SyntheticSpec(_FileConfigurable):
    """Parameters of the synthetic two-domain generator.

    The `key=value` file keys are the short aliases in `SYNTHETIC_KEYS`.
    """

    feature_dim: int = field(
        default=10,
        metadata={"description": "Number of features of each synthetic sample."},
    )

    minority_fraction_source: float = field(
        default=0.06,
        metadata={"description": "Fraction of positive samples in the source domain."},
    )

    minority_fraction_target: float = field(
        default=0.10,
        metadata={"description": "Fraction of positive samples in the target domain."},
    )

    shift_rotation_angle: float = field(
        default=math.radians(30.0),
        metadata={
            "description": "Rotation (radians) applied to the target in the plane of the first two features."
        },
    )

    shift_translation: str = field(
        default="2.0",
        metadata={
            "description": "Target translation: a comma list of feature_dim reals, or one real giving the vector norm spread evenly over all features."
        },
    )

    n_source: int = field(
        default=4000,
        metadata={"description": "Number of source samples."},
    )

    n_target: int = field(
        default=4000,
        metadata={"description": "Number of target samples."},
    )

    noise_sigma: float = field(
        default=1.0,
        metadata={"description": "Standard deviation of each Gaussian blob."},
    )

    class_separation: float = field(
        default=2.5,
        metadata={"description": "Distance between the two class means."},
    )

    seed: int = field(
        default=0,
        metadata={"description": "Seed of the generator."},
    )

    def __post_init__(self) -> None:
        if self.feature_dim < 2:
            raise ConfigurationError("feature_dim", "must be at least 2")
        for key in ("minority_fraction_source", "minority_fraction_target"):
            value = getattr(self, key)
            if not 0 < value <= 0.5:
                raise ConfigurationError(key, f"must lie in (0, 0.5], got {value}")
        if self.n_source < 1 or self.n_target < 1:
            raise ConfigurationError("n_source/n_target", "sizes must be positive")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma", "must be nonnegative")
        self.translation_vector()

    def translation_vector(self) -> list[float]:
        """Parse `shift_translation` into a vector of length `feature_dim`."""
        try:
            parts = [float(p) for p in _split_list(self.shift_translation)]
        except ValueError as exc:
            raise ConfigurationError("shift_translation", str(exc)) from exc
        if len(parts) == 1:
            return [parts[0] / math.sqrt(self.feature_dim)] * self.feature_dim
        if len(parts) != self.feature_dim:
            raise ConfigurationError(
                "shift_translation",
                f"expected 1 or {self.feature_dim} values, got {len(parts)}",
            )
        return parts

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "SyntheticSpec":
        renamed = {SYNTHETIC_KEYS.get(k, k): v for k, v in values.items()}
        if "shift_rotation_angle" in renamed and "rotation_degrees" in values:
            raise ConfigurationError("rotation", "give either rotation or rotation_degrees")
        if "rotation_degrees" in values:
            degrees = _coerce("rotation_degrees", values["rotation_degrees"], 0.0)
            renamed["shift_rotation_angle"] = math.radians(degrees)
        return super().from_mapping(renamed)


SYNTHETIC_KEYS = {
    "feature_dim": "feature_dim",
    "rotation": "shift_rotation_angle",
    "translation": "shift_translation",
    "minority_src": "minority_fraction_source",
    "minority_tgt": "minority_fraction_target",
    "n_src": "n_source",
    "n_tgt": "n_target",
    "sigma": "noise_sigma",
    "separation": "class_separation",
    "seed": "seed",
}


@dataclass(kw_only=True)
class TrainConfiguration(_FileConfigurable):
    """Configuration of one SSOT / SPSSOT training run."""

    iterations: int = field(
        default=1000,
        metadata={"description": "Alternating OT/SGD iterations per ensemble member."},
    )

    batch_size: int = field(
        default=128,
        metadata={
            "description": "Source batch size n; the target side draws n/2 labeled and n/2 unlabeled samples."
        },
    )

    learning_rate: float = field(
        default=0.001,
        metadata={"description": "SGD learning rate (constant schedule)."},
    )

    momentum: float = field(
        default=0.0,
        metadata={"description": "SGD momentum; 0 disables the momentum buffer."},
    )

    pretrain_epochs: int = field(
        default=100,
        metadata={
            "description": "Supervised epochs on the source pool, then on the labeled target pool, before alternating training."
        },
    )

    alpha: float = field(
        default=0.05,
        metadata={"description": "Weight of the OT alignment term."},
    )

    theta_s: float = field(
        default=1.0,
        metadata={"description": "Weight of the source cross-entropy term."},
    )

    beta: float = field(
        default=0.15,
        metadata={"description": "Weight of the discriminative centroid loss."},
    )

    lam: float = field(
        default=0.5,
        metadata={"description": "Weight of the group entropic loss."},
    )

    centroid_margin: float = field(
        default=10.0,
        metadata={"description": "Cap on each squared between-center distance in the centroid loss."},
    )

    center_fraction: float = field(
        default=0.5,
        metadata={"description": "Fraction of each labeled pool used to estimate class centers."},
    )

    strict_group_entropy: bool = field(
        default=False,
        metadata={
            "description": "Normalize the group entropic loss by n_s * n_u instead of the coupling block mass."
        },
    )

    hardness_kind: Literal["absolute_error", "squared_error"] = field(
        default="squared_error",
        metadata={"description": "Hardness function used by the self-paced sampler."},
    )

    n_bins: int = field(
        default=10,
        metadata={"description": "Number of hardness bins."},
    )

    n_members: int = field(
        default=5,
        metadata={"description": "Number of trained ensemble members, including the initial one."},
    )

    solver: Literal["exact", "sinkhorn"] = field(
        default="exact",
        metadata={"description": "Coupling solver: exact network simplex or entropic Sinkhorn."},
    )

    sinkhorn_epsilon: float = field(
        default=0.01,
        metadata={"description": "Entropic regularization of the Sinkhorn solver."},
    )

    sinkhorn_max_iters: int = field(
        default=10000,
        metadata={"description": "Iteration limit of the Sinkhorn solver."},
    )

    sinkhorn_tol: float = field(
        default=1e-6,
        metadata={"description": "Marginal residual tolerance of the Sinkhorn solver."},
    )

    generator_dims: str = field(
        default="256,128",
        metadata={"description": "Comma-separated widths of the feature generator layers."},
    )

    classifier_dims: str = field(
        default="128",
        metadata={
            "description": "Comma-separated hidden widths of the classifier before its 2-way output layer."
        },
    )

    seed: int = field(
        default=0,
        metadata={"description": "Seed for initialization, batch sampling and under-sampling."},
    )

    log_every: int = field(
        default=100,
        metadata={"description": "Emit a DEBUG log line every this many iterations."},
    )

    debug: bool = field(
        default=False,
        metadata={
            "description": "Assert softmax validity and parameter finiteness after every iteration."
        },
    )

    def __post_init__(self) -> None:
        if self.iterations < 0:
            raise ConfigurationError("iterations", "must be nonnegative")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigurationError("batch_size", "must be an even number >= 2")
        if self.pretrain_epochs < 0:
            raise ConfigurationError("pretrain_epochs", "must be nonnegative")
        if not 0 < self.center_fraction <= 1:
            raise ConfigurationError("center_fraction", "must lie in (0, 1]")
        if self.solver not in ("exact", "sinkhorn"):
            raise ConfigurationError("solver", f"unknown solver {self.solver!r}")
        if self.sinkhorn_epsilon <= 0:
            raise ConfigurationError("sinkhorn_epsilon", "must be positive")
        self.loss_weights()
        self.optimizer()
        self.hardness()
        self.parse_generator_dims()
        self.parse_classifier_dims()

    def loss_weights(self) -> LossWeights:
        """Return the loss-weight view of this configuration."""
        return LossWeights(
            alpha=self.alpha, theta_s=self.theta_s, beta=self.beta, lam=self.lam
        )

    def optimizer(self) -> OptimizerConfig:
        """Return the optimizer view of this configuration."""
        return OptimizerConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            momentum=self.momentum,
        )

    def hardness(self) -> HardnessConfig:
        """Return the sampler view of this configuration."""
        return HardnessConfig(
            hardness_kind=self.hardness_kind,
            n_bins=self.n_bins,
            n_members=self.n_members,
        )

    def parse_generator_dims(self) -> list[int]:
        """Parse the generator widths; an empty string means no generator layers."""
        return self._parse_dims("generator_dims", self.generator_dims)

    def parse_classifier_dims(self) -> list[int]:
        """Parse the classifier hidden widths."""
        return self._parse_dims("classifier_dims", self.classifier_dims)

    @staticmethod
    def _parse_dims(key: str, text: str) -> list[int]:
        try:
            dims = [int(d) for d in _split_list(text)]
        except ValueError as exc:
            raise ConfigurationError(key, str(exc)) from exc
        if any(d < 1 for d in dims):
            raise ConfigurationError(key, "layer widths must be positive")
        return dims

    def with_overrides(self: T, **overrides: Any) -> T:
        """Return a copy with some fields replaced."""
        return replace(self, **overrides)  # type: ignore[type-var]

    def config_hash(self) -> str:
        """SHA-256 of the JSON encoding of this configuration."""
        payload = msgspec.json.encode(asdict(self), order="sorted")
        return hashlib.sha256(payload).hexdigest()


@dataclass(kw_only=True)
class Configuration(TrainConfiguration):
    """The configuration of an experiment: data source, methods, seeds and splits."""

    data_source: Literal["synthetic", "csv"] = field(
        default="synthetic",
        metadata={"description": "Where the two domains come from."},
    )

    source_csv: str = field(
        default="",
        metadata={"description": "Path of the source-domain CSV (data_source=csv)."},
    )

    target_csv: str = field(
        default="",
        metadata={"description": "Path of the target-domain CSV (data_source=csv)."},
    )

    feature_names: str = field(
        default="",
        metadata={
            "description": "Comma-separated feature columns; empty means every header column except the label."
        },
    )

    methods: str = field(
        default="spssot,source_only,target_only,train_together",
        metadata={"description": "Comma-separated methods to run."},
    )

    seeds: str = field(
        default="0,1,2,3,4",
        metadata={"description": "Comma-separated run seeds."},
    )

    labeled_fraction: float = field(
        default=0.01,
        metadata={"description": "Fraction of the target used as labeled data."},
    )

    label_fractions: str = field(
        default="",
        metadata={
            "description": "Optional comma-separated labeled fractions to sweep; overrides labeled_fraction."
        },
    )

    test_fraction: float = field(
        default=0.20,
        metadata={"description": "Fraction of the target held out for testing."},
    )

    source_fraction: float = field(
        default=1.0,
        metadata={"description": "Stratified fraction of the source pool used for training."},
    )

    baseline_ensemble: bool = field(
        default=True,
        metadata={"description": "Wrap baselines in the self-paced under-sampling ensemble."},
    )

    grid_alpha: str = field(
        default="",
        metadata={"description": "Comma-separated alpha values for a sensitivity grid."},
    )

    grid_theta_s: str = field(
        default="",
        metadata={"description": "Comma-separated theta_s values for a sensitivity grid."},
    )

    grid_beta: str = field(
        default="",
        metadata={"description": "Comma-separated beta values for a sensitivity grid."},
    )

    grid_lambda: str = field(
        default="",
        metadata={"description": "Comma-separated lambda values for a sensitivity grid."},
    )

    out_dir: str = field(
        default="runs/experiment",
        metadata={"description": "Directory receiving reports, checkpoints and logs."},
    )

    save_checkpoints: bool = field(
        default=True,
        metadata={"description": "Write per-member checkpoints, training logs and manifests."},
    )

    dump_plans: str = field(
        default="",
        metadata={"description": "Directory for TSV dumps of the first coupling of each member."},
    )

    def __post_init__(self) -> None:
        super().__post_init__()
        if not self.parse_seeds():
            raise ConfigurationError("seeds", "at least one seed is required")
        if not self.parse_methods():
            raise ConfigurationError("methods", "at least one method is required")
        for fraction in self.parse_label_fractions():
            if not 0 < fraction < 1 or fraction + self.test_fraction >= 1:
                raise ConfigurationError(
                    "labeled_fraction",
                    "labeled and test fractions must be positive and sum below 1",
                )
        if not 0 < self.source_fraction <= 1:
            raise ConfigurationError("source_fraction", "must lie in (0, 1]")
        if self.data_source == "csv" and not (self.source_csv and self.target_csv):
            raise ConfigurationError("source_csv", "csv data needs source_csv and target_csv")

    def parse_methods(self) -> list[str]:
        """Parse the method list, appending one variant per sensitivity-grid value.

        Returns:
            list[str]: Method names in configuration order.
        """
        methods = _split_list(self.methods)
        grids = {
            "alpha": self.grid_alpha,
            "theta_s": self.grid_theta_s,
            "beta": self.grid_beta,
            "lam": self.grid_lambda,
        }
        for key, text in grids.items():
            for value in _split_list(text):
                _coerce(f"grid_{key}", value, 0.0)
                methods.append(f"spssot[{key}={value}]")
        return methods

    def parse_seeds(self) -> list[int]:
        """Parse the run seeds."""
        try:
            return [int(s) for s in _split_list(self.seeds)]
        except ValueError as exc:
            raise ConfigurationError("seeds", str(exc)) from exc

    def parse_label_fractions(self) -> list[float]:
        """Parse the labeled fractions to run; falls back to `labeled_fraction`."""
        if not self.label_fractions.strip():
            return [self.labeled_fraction]
        try:
            return [float(s) for s in _split_list(self.label_fractions)]
        except ValueError as exc:
            raise ConfigurationError("label_fractions", str(exc)) from exc

    def parse_feature_names(self) -> list[str]:
        """Parse the declared feature columns."""
        return _split_list(self.feature_names)

    @classmethod
    def from_file(cls, path: str | Path, **overrides: Any) -> "Configuration":
        """Read a `key=value` configuration file.

        Args:
            path: The file to read.
            **overrides: Values that take precedence over the file (e.g. CLI flags).
        """
        values: dict[str, Any] = read_config_file(path)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(values)


def read_config_file(path: str | Path) -> dict[str, Any]:
    """Read the raw values of an experiment `key=value` file.

    Synthetic-data keys may share the file with the experiment keys; any other
    unknown key is an error.
    """
    if not Path(path).is_file():
        raise ConfigurationError("config", f"no such file: {path}")
    values = {k: v for k, v in dotenv_values(path).items() if v is not None}
    allowed = Configuration.field_names() | set(SYNTHETIC_KEYS) | {"rotation_degrees"}
    for key in values:
        if key not in allowed:
            raise ConfigurationError(key, "unknown configuration key")
    return values


@dataclass(kw_only=True)
class PreprocessConfiguration(_FileConfigurable):
    """Configuration of the raw-record aggregation graph."""

    window_hours: float = field(
        default=6.0,
        metadata={"description": "Length of each aggregation window, in hours."},
    )

    horizon_hours: float = field(
        default=6.0,
        metadata={"description": "A window is positive if onset occurs within this many hours after it."},
    )

    max_hours: float = field(
        default=48.0,
        metadata={"description": "Only windows ending within this many hours of admission are kept."},
    )

    max_missing_ratio: float = field(
        default=0.8,
        metadata={"description": "Patients with a larger fraction of missing indicator cells are dropped."},
    )

    indicator_names: str = field(
        default="",
        metadata={
            "description": "Comma-separated indicator columns; empty means every column except patient_id, hours and sepsis."
        },
    )

    demographic_names: str = field(
        default=",".join(DEMOGRAPHICS),
        metadata={
            "description": "Comma-separated columns carried as their latest value instead of window statistics."
        },
    )

    def __post_init__(self) -> None:
        if self.window_hours <= 0 or self.horizon_hours <= 0:
            raise ConfigurationError("window_hours", "window and horizon must be positive")
        if not 0 <= self.max_missing_ratio <= 1:
            raise ConfigurationError("max_missing_ratio", "must lie in [0, 1]")

    def parse_indicator_names(self) -> Optional[list[str]]:
        """Parse the indicator columns; None selects every non-reserved column."""
        return _split_list(self.indicator_names) or None

    def parse_demographic_names(self) -> list[str]:
        """Parse the demographic columns."""
        return _split_list(self.demographic_names)
