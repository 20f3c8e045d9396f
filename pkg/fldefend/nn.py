"""
Minimal dense neural-network engine.

Fully connected layers with ReLU hidden activations and a linear output layer
of E class neurons, softmax cross-entropy, backprop and mini-batch SGD with
classical momentum. Everything is float64 so runs are reproducible bit for
bit on any platform.

Class ids are 1..E everywhere outside this module's internals.
"""

from dataclasses import dataclass, replace
from typing import List, Sequence, Tuple

import numpy as np

from fldefend.data import Dataset
from fldefend.errors import ConfigurationError, EmptyShardError


@dataclass
class ModelParams:
    """Layered dense-network parameters.

    weights[i] has shape (out_i, in_i), biases[i] has shape (out_i,). The
    last layer is the output layer; its row e belongs to class neuron e+1.
    """

    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]

    @property
    def layer_sizes(self) -> List[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def output_width(self) -> int:
        """d_l: input width of the output layer (bias not included)."""
        return self.weights[-1].shape[1]

    @property
    def num_parameters(self) -> int:
        return int(sum(w.size + b.size for w, b in zip(self.weights, self.biases)))

    def validate(self) -> None:
        if not self.weights or len(self.weights) != len(self.biases):
            raise ConfigurationError("model needs at least one layer and one bias per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ConfigurationError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if i > 0 and self.weights[i - 1].shape[0] != w.shape[1]:
                raise ConfigurationError(
                    f"layer {i}: input width {w.shape[1]} != previous output width {self.weights[i - 1].shape[0]}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ConfigurationError(f"layer {i}: non-finite parameter values")

    def same_architecture(self, other: "ModelParams") -> bool:
        if len(self.weights) != len(other.weights):
            return False
        return all(
            a.shape == b.shape and c.shape == d.shape
            for a, b, c, d in zip(self.weights, other.weights, self.biases, other.biases)
        )

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def output_rows(self) -> np.ndarray:
        """Output layer as E rows of [weights || bias], shape (E, d_l + 1)."""
        return np.hstack([self.weights[-1], self.biases[-1][:, None]])

    def flatten(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def unflatten(self, vector: np.ndarray) -> "ModelParams":
        """New params with this model's architecture and the given flat values."""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.num_parameters,):
            raise ConfigurationError(f"flat vector has shape {vector.shape}, expected ({self.num_parameters},)")
        weights, biases, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(vector[pos:pos + w.size].reshape(w.shape).copy())
            pos += w.size
            biases.append(vector[pos:pos + b.size].copy())
            pos += b.size
        return ModelParams(weights, biases)

    def bitwise_equal(self, other: "ModelParams") -> bool:
        return self.same_architecture(other) and all(
            np.array_equal(a, b) for a, b in zip(self.weights + self.biases, other.weights + other.biases)
        )


@dataclass(frozen=True)
class TrainConfig:
    """Local training hyperparameters."""

    learning_rate: float = 0.03
    momentum: float = 0.5
    local_epochs: int = 3
    batch_size: int = 64
    rng_seed: int = 0

    def validate(self) -> None:
        if not self.learning_rate >= 0:
            raise ConfigurationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.local_epochs < 1:
            raise ConfigurationError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.rng_seed < 0:
            raise ConfigurationError(f"rng_seed must be unsigned, got {self.rng_seed}")

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, rng_seed=int(seed))


@dataclass(frozen=True)
class OutputDelta:
    """Output-layer change of one client: rows[e] = local row e - global row e."""

    rows: np.ndarray
    client_id: int
    round: int

    @property
    def num_classes(self) -> int:
        return self.rows.shape[0]

    def row(self, class_id: int) -> np.ndarray:
        return self.rows[class_id - 1]


def init_params(layer_sizes: Sequence[int], seed: int) -> ModelParams:
    """He-normal weights, zero biases."""
    if len(layer_sizes) < 2 or any(s < 1 for s in layer_sizes):
        raise ConfigurationError(f"invalid layer sizes {list(layer_sizes)}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    params = ModelParams(weights, biases)
    params.validate()
    return params


def _check_inputs(params: ModelParams, inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != params.weights[0].shape[1]:
        raise ConfigurationError(
            f"input shape {inputs.shape} does not match first layer width {params.weights[0].shape[1]}"
        )
    return inputs


def _forward_cache(params: ModelParams, inputs: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
    activations = [inputs]
    a = inputs
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        a = z if i == last else np.maximum(z, 0.0)
        activations.append(a)
    return a, activations


def forward(params: ModelParams, inputs: np.ndarray) -> np.ndarray:
    """Logits of shape (B, E). ReLU on hidden layers, nothing on the output."""
    inputs = _check_inputs(params, inputs)
    logits, _ = _forward_cache(params, inputs)
    return logits


def predict(params: ModelParams, inputs: np.ndarray) -> np.ndarray:
    """Predicted class ids (1..E)."""
    return np.argmax(forward(params, inputs), axis=1) + 1


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def loss_and_gradients(
    params: ModelParams, inputs: np.ndarray, labels: np.ndarray
) -> Tuple[float, List[np.ndarray], List[np.ndarray]]:
    """Mean softmax cross-entropy and its gradients (weights, biases)."""
    inputs = _check_inputs(params, inputs)
    idx = np.asarray(labels, dtype=np.int64) - 1
    n = inputs.shape[0]
    logits, activations = _forward_cache(params, inputs)

    probs = _softmax(logits)
    loss = float(-np.mean(np.log(np.clip(probs[np.arange(n), idx], 1e-300, None))))

    delta = probs
    delta[np.arange(n), idx] -= 1.0
    delta /= n

    grad_w: List[np.ndarray] = [np.empty(0)] * len(params.weights)
    grad_b: List[np.ndarray] = [np.empty(0)] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        grad_w[i] = delta.T @ activations[i]
        grad_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i]) * (activations[i] > 0.0)
    return loss, grad_w, grad_b


def dataset_loss(params: ModelParams, data: Dataset) -> float:
    loss, _, _ = loss_and_gradients(params, data.features, data.labels)
    return loss


def train_local(global_params: ModelParams, shard: Dataset, cfg: TrainConfig) -> ModelParams:
    """Mini-batch SGD with momentum starting from the global model.

    The input model is never modified. Batch order comes from cfg.rng_seed
    only, so equal (shard, cfg) always give bitwise-equal results.
    """
    cfg.validate()
    global_params.validate()
    if len(shard) == 0:
        raise EmptyShardError("shard is empty")

    params = global_params.copy()
    vel_w = [np.zeros_like(w) for w in params.weights]
    vel_b = [np.zeros_like(b) for b in params.biases]
    rng = np.random.default_rng(cfg.rng_seed)
    n = len(shard)

    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            _, grad_w, grad_b = loss_and_gradients(params, shard.features[batch], shard.labels[batch])
            for i in range(len(params.weights)):
                vel_w[i] = cfg.momentum * vel_w[i] + grad_w[i]
                vel_b[i] = cfg.momentum * vel_b[i] + grad_b[i]
                params.weights[i] -= cfg.learning_rate * vel_w[i]
                params.biases[i] -= cfg.learning_rate * vel_b[i]
    try:
        params.validate()
    except ConfigurationError as e:
        raise ConfigurationError(f"local training diverged, lower the learning rate: {e}") from e
    return params


def output_layer_delta(
    local: ModelParams, global_params: ModelParams, client_id: int = -1, round: int = 0
) -> OutputDelta:
    """Per-neuron output-layer change, bias entry included in each row."""
    if not local.same_architecture(global_params):
        raise ConfigurationError(
            f"architecture mismatch: {local.layer_sizes} vs {global_params.layer_sizes}"
        )
    return OutputDelta(
        rows=local.output_rows() - global_params.output_rows(),
        client_id=int(client_id),
        round=int(round),
    )
