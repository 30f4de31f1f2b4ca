"""Minimal deterministic feedforward frame classifier.

A small MLP with softmax output, exact analytic gradients, and a plain SGD
step. Everything is float64 and value-semantic: operations return new
objects and never mutate their inputs, so a (net, batch, lr) triple always
produces bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError, NumericalError, ShapeError

_ACTIVATIONS = ("tanh", "relu")


def _as_readonly(values: np.ndarray) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MlpConfig:
    """Architecture and init seed: layer_sizes = [input_dim, hidden..., n_classes]."""

    layer_sizes: tuple[int, ...]
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self) -> None:
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ConfigurationError(
                f"layer_sizes needs at least an input and an output layer, got {sizes}"
            )
        if any(s <= 0 for s in sizes):
            raise ConfigurationError(f"layer sizes must be positive, got {sizes}")
        if self.activation not in _ACTIVATIONS:
            raise ConfigurationError(
                f"activation must be one of {_ACTIVATIONS}, got {self.activation!r}"
            )
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigurationError(f"seed must fit in unsigned 64 bits, got {self.seed}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]


def layout_for(layer_sizes: tuple[int, ...]) -> tuple[tuple[str, tuple[int, ...]], ...]:
    """Parameter layout: alternating weight matrices and bias vectors per layer."""
    segs: list[tuple[str, tuple[int, ...]]] = []
    for i in range(len(layer_sizes) - 1):
        segs.append((f"w{i + 1}", (layer_sizes[i], layer_sizes[i + 1])))
        segs.append((f"b{i + 1}", (layer_sizes[i + 1],)))
    return tuple(segs)


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 parameter vector plus the (name, shape) layout it packs.

    Also the shape of gradients, Fisher diagonals, and importance vectors,
    so they all share layout checks and serialization.
    """

    values: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ShapeError(f"values must be 1-D, got shape {values.shape}")
        layout = tuple((str(n), tuple(int(d) for d in shape)) for n, shape in self.layout)
        expected = sum(int(np.prod(shape)) for _, shape in layout)
        if values.size != expected:
            raise ShapeError(
                f"values length {values.size} does not match layout total {expected}"
            )
        if not np.isfinite(values).all():
            raise NumericalError("parameter vector contains non-finite values")
        object.__setattr__(self, "values", _as_readonly(values))
        object.__setattr__(self, "layout", layout)

    def __len__(self) -> int:
        return int(self.values.size)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def segments(self) -> dict[str, np.ndarray]:
        """Views of the flat vector reshaped per layout segment."""
        out: dict[str, np.ndarray] = {}
        pos = 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            out[name] = self.values[pos : pos + size].reshape(shape)
            pos += size
        return out

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values=values, layout=self.layout)

    def zeros_like(self) -> "ParamVector":
        return self.with_values(np.zeros(len(self)))


def pack_segments(
    arrays: dict[str, np.ndarray], layout: tuple[tuple[str, tuple[int, ...]], ...]
) -> ParamVector:
    """Flatten named arrays into a ParamVector following the given layout."""
    parts = []
    for name, shape in layout:
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.shape != shape:
            raise ShapeError(f"segment {name!r} has shape {arr.shape}, layout says {shape}")
        parts.append(arr.reshape(-1))
    return ParamVector(values=np.concatenate(parts) if parts else np.zeros(0), layout=layout)


@dataclass(frozen=True)
class Network:
    config: MlpConfig
    params: ParamVector

    def __post_init__(self) -> None:
        if self.params.layout != layout_for(self.config.layer_sizes):
            raise ShapeError("params layout does not match network config")


@dataclass(frozen=True)
class FrameBatch:
    """Frames with per-frame token labels: features [n, input_dim], labels [n]."""

    features: np.ndarray
    labels: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels)
        if features.ndim != 2:
            raise ShapeError(f"features must be 2-D, got shape {features.shape}")
        if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
            raise ShapeError(
                f"labels shape {labels.shape} does not match {features.shape[0]} frames"
            )
        if features.shape[0] < 1:
            raise DataError("a frame batch must contain at least one frame")
        if not np.issubdtype(labels.dtype, np.integer):
            labels = labels.astype(np.int64)
        if labels.size and int(labels.min()) < 0:
            raise DataError("labels must be non-negative token ids")
        object.__setattr__(self, "features", _as_readonly(features))
        ro_labels = np.array(labels, dtype=np.int64, copy=True)
        ro_labels.setflags(write=False)
        object.__setattr__(self, "labels", ro_labels)

    @property
    def n_frames(self) -> int:
        return int(self.features.shape[0])


def init_network(config: MlpConfig) -> Network:
    """Glorot-uniform weights, zero biases, deterministic in config.seed."""
    rng = np.random.default_rng(config.seed)
    arrays: dict[str, np.ndarray] = {}
    sizes = config.layer_sizes
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        scale = np.sqrt(6.0 / (fan_in + fan_out))
        arrays[f"w{i + 1}"] = rng.uniform(-scale, scale, size=(fan_in, fan_out))
        arrays[f"b{i + 1}"] = np.zeros(fan_out)
    layout = layout_for(sizes)
    return Network(config=config, params=pack_segments(arrays, layout))


def _check_features(net: Network, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != net.config.input_dim:
        raise ShapeError(
            f"features shape {features.shape} does not match input dim {net.config.input_dim}"
        )
    return features


def _affine_layers(net: Network) -> list[tuple[np.ndarray, np.ndarray]]:
    segs = net.params.segments()
    n_layers = len(net.config.layer_sizes) - 1
    return [(segs[f"w{i + 1}"], segs[f"b{i + 1}"]) for i in range(n_layers)]


def _forward_pass(net: Network, features: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Hidden activations (including the input) and final-layer logits."""
    layers = _affine_layers(net)
    act = net.config.activation
    hidden = [features]
    h = features
    for idx, (w, b) in enumerate(layers[:-1]):
        z = h @ w + b
        if not np.isfinite(z).all():
            raise NumericalError(f"non-finite pre-activation at layer {idx + 1}")
        h = np.tanh(z) if act == "tanh" else np.maximum(z, 0.0)
        hidden.append(h)
    w, b = layers[-1]
    logits = h @ w + b
    if not np.isfinite(logits).all():
        raise NumericalError(f"non-finite logits at layer {len(layers)}")
    return hidden, logits


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def forward(net: Network, features: np.ndarray) -> np.ndarray:
    """Per-frame softmax class probabilities, shape [n_frames, n_classes]."""
    features = _check_features(net, features)
    _, logits = _forward_pass(net, features)
    return np.exp(_log_softmax(logits))


def loss_and_grad(net: Network, batch: FrameBatch) -> tuple[float, ParamVector]:
    """Mean per-frame cross-entropy and its exact gradient."""
    features = _check_features(net, batch.features)
    if not np.isfinite(features).all():
        raise NumericalError("non-finite values in input features")
    labels = batch.labels
    n_classes = net.config.n_classes
    if labels.size and int(labels.max()) >= n_classes:
        raise DataError(
            f"label {int(labels.max())} outside vocabulary of size {n_classes}"
        )
    hidden, logits = _forward_pass(net, features)
    log_probs = _log_softmax(logits)
    n = batch.n_frames
    loss = float(-log_probs[np.arange(n), labels].mean())

    # dL/dlogits for mean cross-entropy: (softmax - onehot) / n
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n

    grads = _backprop(net, hidden, dlogits)
    return loss, grads


def _backprop(net: Network, hidden: list[np.ndarray], dlogits: np.ndarray) -> ParamVector:
    """Backpropagate d(loss)/d(logits) through the affine/activation stack."""
    layers = _affine_layers(net)
    act = net.config.activation
    arrays: dict[str, np.ndarray] = {}
    delta = dlogits
    for idx in range(len(layers) - 1, -1, -1):
        w, _ = layers[idx]
        h_in = hidden[idx]
        arrays[f"w{idx + 1}"] = h_in.T @ delta
        arrays[f"b{idx + 1}"] = delta.sum(axis=0)
        if idx > 0:
            dh = delta @ w.T
            h_prev = hidden[idx]
            if act == "tanh":
                delta = dh * (1.0 - h_prev * h_prev)
            else:
                delta = dh * (h_prev > 0.0)
    return pack_segments(arrays, net.params.layout)


def sgd_step(net: Network, grad: ParamVector, lr: float) -> tuple[Network, ParamVector]:
    """theta <- theta - lr * grad; returns (new net, delta = new - old)."""
    if not grad.same_layout(net.params):
        raise ShapeError("gradient layout does not match network parameters")
    if not np.isfinite(grad.values).all():
        raise NumericalError("non-finite gradient in sgd_step")
    if lr < 0:
        raise ConfigurationError(f"learning rate must be non-negative, got {lr}")
    new_values = net.params.values - lr * grad.values
    delta = new_values - net.params.values
    new_params = net.params.with_values(new_values)
    return Network(config=net.config, params=new_params), net.params.with_values(delta)


def predict_tokens(net: Network, features: np.ndarray) -> np.ndarray:
    """Per-frame argmax token ids; ties break toward the lower id."""
    features = _check_features(net, features)
    if features.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    _, logits = _forward_pass(net, features)
    return logits.argmax(axis=1).astype(np.int64)
