"""Feed-forward feature generator G and classifier F with analytic gradients.

G is a stack of affine + ReLU layers mapping features to embeddings; F is a
stack of affine layers (ReLU between them) followed by a softmax over the two
classes. Everything is computed in float64. Parameters are immutable:
`sgd_step` returns new parameters.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional, Sequence

import numpy as np

from spssot.configuration import OptimizerConfig
from spssot.errors import (
    CheckpointFormatError,
    DimensionError,
    StaleCacheError,
    TrainingDivergenceError,
)

Activation = Literal["relu", "identity"]

N_CLASSES = 2

CHECKPOINT_MAGIC = b"SPSSOTCK"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sIII")
_LAYER = struct.Struct("<BII")
_ACTIVATION_CODES: dict[str, int] = {"identity": 0, "relu": 1}


@dataclass(frozen=True, eq=False)
class Layer:
    """Affine map `x @ weight + bias` followed by an activation."""

    weight: np.ndarray
    bias: np.ndarray
    activation: Activation = "relu"

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Weights and biases of G (`generator`) and F (`classifier`)."""

    generator: tuple[Layer, ...]
    classifier: tuple[Layer, ...]

    def __post_init__(self) -> None:
        layers = self.layers
        if not self.classifier:
            raise DimensionError("the classifier needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.fan_out != nxt.fan_in:
                raise DimensionError(
                    f"layer widths do not chain: {prev.weight.shape} -> {nxt.weight.shape}"
                )
        for layer in layers:
            if layer.bias.shape != (layer.fan_out,):
                raise DimensionError(f"bias {layer.bias.shape} does not match {layer.weight.shape}")
        if self.classifier[-1].fan_out != N_CLASSES:
            raise DimensionError(f"the classifier must output {N_CLASSES} logits")

    @property
    def layers(self) -> tuple[Layer, ...]:
        return self.generator + self.classifier

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def embedding_dim(self) -> int:
        return self.classifier[0].fan_in

    @property
    def n_parameters(self) -> int:
        return sum(layer.weight.size + layer.bias.size for layer in self.layers)

    def is_finite(self) -> bool:
        return all(
            np.isfinite(layer.weight).all() and np.isfinite(layer.bias).all()
            for layer in self.layers
        )

    def _replace_layers(self, layers: Sequence[Layer]) -> "ModelParams":
        n = len(self.generator)
        return ModelParams(generator=tuple(layers[:n]), classifier=tuple(layers[n:]))


@dataclass(frozen=True, eq=False)
class GradientSet:
    """One (weight, bias) gradient pair per layer of `ModelParams.layers`."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def is_finite(self) -> bool:
        return all(np.isfinite(g).all() for g in self.weights + self.biases)

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet(
            weights=tuple(factor * g for g in self.weights),
            biases=tuple(factor * g for g in self.biases),
        )

    def __add__(self, other: "GradientSet") -> "GradientSet":
        return GradientSet(
            weights=tuple(a + b for a, b in zip(self.weights, other.weights)),
            biases=tuple(a + b for a, b in zip(self.biases, other.biases)),
        )

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "GradientSet":
        return cls(
            weights=tuple(np.zeros_like(layer.weight) for layer in params.layers),
            biases=tuple(np.zeros_like(layer.bias) for layer in params.layers),
        )


@dataclass(frozen=True, eq=False)
class ForwardCache:
    """Intermediates of one forward pass, needed by `backward`."""

    params: ModelParams
    inputs: tuple[np.ndarray, ...]
    pre_activations: tuple[np.ndarray, ...]
    embeddings: np.ndarray
    probs: np.ndarray


############################  Construction  ###################################


def init_params(
    input_dim: int,
    generator_dims: Sequence[int] = (256, 128),
    classifier_dims: Sequence[int] = (128,),
    rng: np.random.Generator | int = 0,
) -> ModelParams:
    """Initialize G and F with uniform fan-in/fan-out scaling and zero biases.

    Args:
        input_dim: Number of input features.
        generator_dims: Widths of the generator layers (empty: embeddings are the inputs).
        classifier_dims: Hidden widths of the classifier before its 2-way output layer.
        rng: Generator or seed.
    """
    if input_dim < 1:
        raise DimensionError("input_dim must be positive")
    rng = np.random.default_rng(rng)

    def make(fan_in: int, fan_out: int, activation: Activation) -> Layer:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return Layer(
            weight=rng.uniform(-limit, limit, size=(fan_in, fan_out)),
            bias=np.zeros(fan_out),
            activation=activation,
        )

    widths = [input_dim, *generator_dims]
    generator = tuple(make(a, b, "relu") for a, b in zip(widths, widths[1:]))
    widths = [widths[-1], *classifier_dims, N_CLASSES]
    classifier = tuple(
        make(a, b, "identity" if i == len(widths) - 2 else "relu")
        for i, (a, b) in enumerate(zip(widths, widths[1:]))
    )
    return ModelParams(generator=generator, classifier=classifier)


############################  Forward  ########################################


def _activate(z: np.ndarray, activation: Activation) -> np.ndarray:
    return np.maximum(z, 0.0) if activation == "relu" else z


def _check_width(x: np.ndarray, width: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != width:
        raise DimensionError(f"{what} must have shape (n, {width}), got {x.shape}")
    return x


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _run(layers: Sequence[Layer], x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    inputs, pre = [], []
    for layer in layers:
        inputs.append(x)
        z = x @ layer.weight + layer.bias
        pre.append(z)
        x = _activate(z, layer.activation)
    return x, inputs, pre


def forward_features(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """Map a batch of feature vectors to embeddings through G."""
    X = _check_width(X, params.input_dim, "X")
    return _run(params.generator, X)[0]


def forward_classifier(params: ModelParams, H: np.ndarray) -> np.ndarray:
    """Map a batch of embeddings to 2-class probabilities through F."""
    H = _check_width(H, params.embedding_dim, "H")
    return softmax(_run(params.classifier, H)[0])


def forward(params: ModelParams, X: np.ndarray) -> ForwardCache:
    """Run G then F and keep the intermediates for `backward`."""
    X = _check_width(X, params.input_dim, "X")
    embeddings, g_inputs, g_pre = _run(params.generator, X)
    logits, f_inputs, f_pre = _run(params.classifier, embeddings)
    return ForwardCache(
        params=params,
        inputs=tuple(g_inputs + f_inputs),
        pre_activations=tuple(g_pre + f_pre),
        embeddings=embeddings,
        probs=softmax(logits),
    )


def predict_positive(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """Return the positive-class probability of each row of X."""
    return forward_classifier(params, forward_features(params, X))[:, 1]


############################  Backward  #######################################


def backward(
    params: ModelParams,
    cache: ForwardCache,
    grad_probs: Optional[np.ndarray] = None,
    grad_embeddings: Optional[np.ndarray] = None,
) -> GradientSet:
    """Backpropagate upstream gradients through F (softmax included) and G.

    Args:
        params: The parameters the cache was produced with.
        cache: Result of `forward` on the batch.
        grad_probs: dL/d(probabilities), shape (n, 2), or None.
        grad_embeddings: dL/d(embeddings) from losses acting on G's output, or None.

    Raises:
        StaleCacheError: The cache belongs to other parameters.
    """
    if cache.params is not params:
        raise StaleCacheError("forward cache was computed with different parameters")
    layers = params.layers
    n_gen = len(params.generator)
    weights: list[np.ndarray] = [np.zeros_like(layer.weight) for layer in layers]
    biases: list[np.ndarray] = [np.zeros_like(layer.bias) for layer in layers]

    def through(indices: Sequence[int], upstream: np.ndarray) -> np.ndarray:
        g = upstream
        for i in reversed(indices):
            layer = layers[i]
            if layer.activation == "relu":
                g = g * (cache.pre_activations[i] > 0)
            weights[i] = cache.inputs[i].T @ g
            biases[i] = g.sum(axis=0)
            g = g @ layer.weight.T
        return g

    n = cache.embeddings.shape[0]
    upstream = np.zeros_like(cache.embeddings)
    if grad_probs is not None:
        grad_probs = np.asarray(grad_probs, dtype=np.float64)
        if grad_probs.shape != (n, N_CLASSES):
            raise DimensionError(f"grad_probs must have shape {(n, N_CLASSES)}")
        p = cache.probs
        grad_logits = p * (grad_probs - (grad_probs * p).sum(axis=1, keepdims=True))
        upstream = upstream + through(range(n_gen, len(layers)), grad_logits)
    if grad_embeddings is not None:
        grad_embeddings = np.asarray(grad_embeddings, dtype=np.float64)
        if grad_embeddings.shape != cache.embeddings.shape:
            raise DimensionError(
                f"grad_embeddings must have shape {cache.embeddings.shape}"
            )
        upstream = upstream + grad_embeddings
    through(range(n_gen), upstream)
    return GradientSet(weights=tuple(weights), biases=tuple(biases))


############################  Optimizer  ######################################


def sgd_step(
    params: ModelParams,
    grads: GradientSet,
    config: OptimizerConfig,
    velocity: Optional[GradientSet] = None,
) -> tuple[ModelParams, GradientSet]:
    """Take one SGD step.

    With momentum m the buffer is v <- m * v + g and the update is theta - lr * v;
    with m = 0 this is theta - lr * g.

    Returns:
        tuple[ModelParams, GradientSet]: The new parameters and the new momentum buffer.

    Raises:
        TrainingDivergenceError: A gradient entry is not finite.
    """
    if len(grads.weights) != len(params.layers):
        raise DimensionError("gradient set does not match the parameters")
    if not grads.is_finite():
        raise TrainingDivergenceError("non-finite gradient", last_good=params)
    step = grads
    if config.momentum and velocity is not None:
        step = velocity.scaled(config.momentum) + grads
    layers = []
    for layer, dw, db in zip(params.layers, step.weights, step.biases):
        if dw.shape != layer.weight.shape or db.shape != layer.bias.shape:
            raise DimensionError("gradient shapes do not match the parameters")
        layers.append(
            Layer(
                weight=layer.weight - config.learning_rate * dw,
                bias=layer.bias - config.learning_rate * db,
                activation=layer.activation,
            )
        )
    return params._replace_layers(layers), step


############################  Checkpoints  ####################################


def params_to_bytes(params: ModelParams) -> bytes:
    """Encode parameters in the versioned flat binary checkpoint format.

    Layout: header (magic, version, layer count, generator layer count), then per
    layer its activation code, rows and columns, followed by the row-major
    little-endian float64 weights and the float64 biases.
    """
    chunks = [
        _HEADER.pack(
            CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(params.layers), len(params.generator)
        )
    ]
    for layer in params.layers:
        rows, cols = layer.weight.shape
        chunks.append(_LAYER.pack(_ACTIVATION_CODES[layer.activation], rows, cols))
        chunks.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return b"".join(chunks)


def params_from_bytes(payload: bytes) -> ModelParams:
    """Decode parameters written by `params_to_bytes`."""
    if len(payload) < _HEADER.size:
        raise CheckpointFormatError("checkpoint is truncated")
    magic, version, n_layers, n_generator = _HEADER.unpack_from(payload, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("not an SPSSOT checkpoint")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    activations = {code: name for name, code in _ACTIVATION_CODES.items()}
    offset = _HEADER.size
    layers = []
    try:
        for _ in range(n_layers):
            code, rows, cols = _LAYER.unpack_from(payload, offset)
            offset += _LAYER.size
            weight = np.frombuffer(payload, dtype="<f8", count=rows * cols, offset=offset)
            offset += 8 * rows * cols
            bias = np.frombuffer(payload, dtype="<f8", count=cols, offset=offset)
            offset += 8 * cols
            layers.append(
                Layer(
                    weight=weight.reshape(rows, cols).astype(np.float64),
                    bias=bias.astype(np.float64),
                    activation=activations[code],  # type: ignore[arg-type]
                )
            )
    except (struct.error, ValueError, KeyError) as exc:
        raise CheckpointFormatError(f"malformed checkpoint: {exc}") from exc
    if offset != len(payload):
        raise CheckpointFormatError("trailing bytes after the last layer")
    return ModelParams(generator=tuple(layers[:n_generator]), classifier=tuple(layers[n_generator:]))


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(params_to_bytes(params))


def load_checkpoint(path: str | Path) -> ModelParams:
    return params_from_bytes(Path(path).read_bytes())


def dump_text(params: ModelParams) -> str:
    """Render parameters as text, one value per line, for diffing checkpoints."""
    lines = [f"version {CHECKPOINT_VERSION}", f"layers {len(params.layers)} generator {len(params.generator)}"]
    for i, layer in enumerate(params.layers):
        rows, cols = layer.weight.shape
        lines.append(f"layer {i} {layer.activation} {rows}x{cols}")
        lines.extend(f"w {v!r}" for v in layer.weight.ravel().tolist())
        lines.extend(f"b {v!r}" for v in layer.bias.tolist())
    return "\n".join(lines) + "\n"
