"""Minimal dense neural-network core: forward pass, backprop, plain SGD.

Models are small value objects. Every operation returns fresh arrays and
never mutates its arguments, so distinct clients can train concurrently as
long as each owns its model copy and RNG stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ShapeError

# RNG stream tags: every generator in the package is seeded with
# [tag, base seed, *context ints] so streams never collide across purposes.
STREAM_TRAIN = 0
STREAM_SELECT = 1
STREAM_DATA = 2


@dataclass
class DenseLayer:
    """One fully connected layer: logits = x @ weights.T + biases."""

    weights: np.ndarray  # (out_dim, in_dim)
    biases: np.ndarray  # (out_dim,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 2 or self.biases.ndim != 1:
            raise ShapeError(
                f"expected 2-d weights and 1-d biases, got {self.weights.shape} / {self.biases.shape}"
            )
        if self.weights.shape[0] != self.biases.shape[0]:
            raise ShapeError(
                f"weights rows ({self.weights.shape[0]}) != biases length ({self.biases.shape[0]})"
            )
        if min(self.weights.shape) < 1:
            raise ShapeError(f"layer dimensions must be positive, got {self.weights.shape}")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.biases).all()):
            raise DataError("layer parameters must be finite")

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def num_params(self) -> int:
        return self.weights.size + self.biases.size

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.biases.copy())


@dataclass
class LayeredModel:
    """Ordered stack of dense layers; the last layer is the classifier head.

    Hidden layers apply the `activation` nonlinearity; the final layer emits
    raw logits (softmax is applied inside the loss).
    """

    layers: list[DenseLayer]
    activation: str = "relu"

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a model needs at least one layer")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(
                    f"layer dimensions do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim

    def copy(self) -> "LayeredModel":
        return LayeredModel([layer.copy() for layer in self.layers], self.activation)


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for one client's local training pass."""

    local_epochs: int
    batch_size: int
    learning_rate: float
    prox_mu: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.local_epochs < 0:
            raise ConfigError(f"local_epochs must be >= 0, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.prox_mu < 0:
            raise ConfigError(f"prox_mu must be >= 0, got {self.prox_mu}")
        if self.seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {self.seed}")


def init_model(layer_dims: list[int], seed: int) -> LayeredModel:
    """Build a model with seeded uniform weights in +-1/sqrt(in_dim), zero biases.

    `layer_dims` is [input_dim, hidden..., num_classes]; identical seeds give
    bitwise-identical models.
    """
    if len(layer_dims) < 2:
        raise ConfigError(f"layer_dims needs at least [in, out], got {layer_dims}")
    if any(d < 1 for d in layer_dims):
        raise ConfigError(f"all layer dims must be >= 1, got {layer_dims}")
    rng = np.random.default_rng(seed)
    layers = []
    for d_in, d_out in zip(layer_dims, layer_dims[1:]):
        scale = 1.0 / math.sqrt(d_in)
        weights = rng.uniform(-scale, scale, size=(d_out, d_in))
        layers.append(DenseLayer(weights, np.zeros(d_out)))
    return LayeredModel(layers)


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _forward_cached(model: LayeredModel, inputs: np.ndarray):
    """Forward pass keeping per-layer inputs and pre-activations for backprop."""
    acts = [inputs]  # acts[k] is the input to layer k
    zs = []
    h = inputs
    last = model.num_layers - 1
    for k, layer in enumerate(model.layers):
        z = h @ layer.weights.T + layer.biases
        zs.append(z)
        h = z if k == last else _relu(z)
        if k != last:
            acts.append(h)
    return acts, zs


def forward(model: LayeredModel, inputs: np.ndarray) -> np.ndarray:
    """Compute logits for a batch; shape (batch, num_classes)."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2:
        raise ShapeError(f"inputs must be 2-d (batch, features), got shape {inputs.shape}")
    if inputs.shape[1] != model.in_dim:
        raise ShapeError(
            f"input feature dim {inputs.shape[1]} != model input dim {model.in_dim}"
        )
    _, zs = _forward_cached(model, inputs)
    return zs[-1]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy of a batch of logits against integer labels."""
    logp = _log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def loss_and_gradients(
    model: LayeredModel,
    batch_inputs: np.ndarray,
    batch_labels: np.ndarray,
    anchor: LayeredModel | None = None,
    prox_mu: float = 0.0,
):
    """Mean softmax cross-entropy plus optional proximal penalty, with gradients.

    The penalty is (prox_mu/2) * ||theta - theta_anchor||^2 summed over all
    parameters. Returns (loss, grads) where grads is a list of
    (d_weights, d_biases) pairs mirroring the model's layers.
    """
    inputs = np.asarray(batch_inputs, dtype=np.float64)
    labels = np.asarray(batch_labels, dtype=np.int64)
    if labels.ndim != 1 or len(labels) != len(inputs):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {inputs.shape}")
    if len(labels) == 0:
        raise DataError("empty batch")
    num_classes = model.num_classes
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DataError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    if prox_mu < 0:
        raise ConfigError(f"prox_mu must be >= 0, got {prox_mu}")
    if prox_mu > 0:
        if anchor is None:
            raise ConfigError("prox_mu > 0 requires an anchor model")
        _check_same_shape(model, anchor)

    acts, zs = _forward_cached(model, inputs)
    logits = zs[-1]
    logp = _log_softmax(logits)
    batch = len(labels)
    loss = float(-logp[np.arange(batch), labels].mean())

    probs = np.exp(logp)
    delta = probs
    delta[np.arange(batch), labels] -= 1.0
    delta /= batch

    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * model.num_layers
    for k in range(model.num_layers - 1, -1, -1):
        grads[k] = (delta.T @ acts[k], delta.sum(axis=0))
        if k > 0:
            delta = (delta @ model.layers[k].weights) * (zs[k - 1] > 0)

    if prox_mu > 0:
        penalty = 0.0
        for k, (layer, ref) in enumerate(zip(model.layers, anchor.layers)):
            dw = layer.weights - ref.weights
            db = layer.biases - ref.biases
            penalty += float((dw * dw).sum() + (db * db).sum())
            gw, gb = grads[k]
            grads[k] = (gw + prox_mu * dw, gb + prox_mu * db)
        loss += 0.5 * prox_mu * penalty

    return loss, grads


def _check_same_shape(a: LayeredModel, b: LayeredModel) -> None:
    if a.num_layers != b.num_layers:
        raise ShapeError(f"models have {a.num_layers} vs {b.num_layers} layers")
    for k, (la, lb) in enumerate(zip(a.layers, b.layers)):
        if la.weights.shape != lb.weights.shape:
            raise ShapeError(
                f"layer {k} weight shapes differ: {la.weights.shape} vs {lb.weights.shape}"
            )


def sgd_step(model: LayeredModel, gradients, learning_rate: float) -> LayeredModel:
    """Return a new model with theta <- theta - lr * grad applied everywhere."""
    if len(gradients) != model.num_layers:
        raise ShapeError(
            f"gradients for {len(gradients)} layers vs model with {model.num_layers}"
        )
    layers = []
    for layer, (gw, gb) in zip(model.layers, gradients):
        if gw.shape != layer.weights.shape or gb.shape != layer.biases.shape:
            raise ShapeError(
                f"gradient shape {gw.shape}/{gb.shape} does not mirror layer "
                f"{layer.weights.shape}/{layer.biases.shape}"
            )
        layers.append(
            DenseLayer(layer.weights - learning_rate * gw, layer.biases - learning_rate * gb)
        )
    return LayeredModel(layers, model.activation)


def local_train(
    model: LayeredModel,
    shard,
    cfg: TrainConfig,
    anchor: LayeredModel | None = None,
    round_index: int = 0,
) -> LayeredModel:
    """Run `cfg.local_epochs` passes of seeded mini-batch SGD over a client shard.

    The shuffle stream is derived from (cfg.seed, shard.client_id, round_index)
    so serial and parallel schedules produce identical results. The anchor is
    used only when cfg.prox_mu > 0. The input model is never mutated.
    """
    if shard.n_i == 0:
        raise DataError(f"client {shard.client_id}: cannot train on an empty shard")
    features = shard.features
    labels = shard.labels
    cur = model.copy()
    if cfg.local_epochs == 0:
        return cur
    use_anchor = anchor if cfg.prox_mu > 0 else None
    mu = cfg.prox_mu if cfg.prox_mu > 0 else 0.0
    rng = np.random.default_rng([STREAM_TRAIN, cfg.seed, shard.client_id, round_index])
    n = shard.n_i
    for _ in range(cfg.local_epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = perm[start : start + cfg.batch_size]
            _, grads = loss_and_gradients(
                cur, features[batch], labels[batch], anchor=use_anchor, prox_mu=mu
            )
            for layer, (gw, gb) in zip(cur.layers, grads):
                layer.weights -= cfg.learning_rate * gw
                layer.biases -= cfg.learning_rate * gb
    return cur


def flatten_layer(model: LayeredModel, layer_index: int) -> np.ndarray:
    """Row-major weights followed by biases of one layer as a flat vector.

    The layout is fixed (and must stay fixed) because weight-space distances
    depend on a consistent ordering.
    """
    if not 0 <= layer_index < model.num_layers:
        raise ConfigError(
            f"layer_index {layer_index} out of range for {model.num_layers} layers"
        )
    layer = model.layers[layer_index]
    return np.concatenate([layer.weights.ravel(), layer.biases])
