"""Small numpy models trained with plain mini-batch SGD.

Two model kinds are supported: multinomial logistic regression and a ReLU
MLP. Parameters live in one flat vector laid out as ``W1, b1, W2, b2, ...``
with each ``W`` of shape ``(fan_in, fan_out)`` in row-major order.

Loss and gradient are evaluated in float64 whatever the input dtype; the
float32 boundary is applied only by :func:`local_train`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import PARAM_DTYPE, SeedLike, UsageError, make_rng


@dataclass(frozen=True)
class ModelSpec:
    kind: str  # "softmax-regression" or "mlp"
    input_dim: int
    classes: int
    hidden_dims: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.kind not in ("softmax-regression", "mlp"):
            raise UsageError(f"unknown model kind {self.kind!r}")
        if self.kind == "softmax-regression" and self.hidden_dims:
            raise UsageError("softmax regression takes no hidden layers")
        if self.kind == "mlp" and not self.hidden_dims:
            raise UsageError("mlp needs at least one hidden layer")
        if min((self.input_dim, self.classes) + self.hidden_dims) < 1:
            raise UsageError("all layer widths must be positive")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.classes]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_dims)


@dataclass
class DatasetShard:
    features: np.ndarray
    labels: np.ndarray
    # positions in the source training set; None for stand-alone shards
    indices: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise UsageError("features must be (m, d) with one label per row")

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass(frozen=True)
class LrSchedule:
    base: float = 0.1
    decay: float = 0.993

    def __post_init__(self):
        if self.base <= 0 or not 0 < self.decay <= 1:
            raise UsageError("need base > 0 and 0 < decay <= 1")


def lr_at(schedule: LrSchedule, t: int) -> float:
    if t < 0:
        raise UsageError("round index must be non-negative")
    return schedule.base * schedule.decay**t


def unflatten(w: np.ndarray, spec: ModelSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    if w.size != spec.n_params:
        raise UsageError(f"parameter vector has {w.size} entries, model needs {spec.n_params}")
    layers, pos = [], 0
    for fan_in, fan_out in spec.layer_dims:
        weight = w[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        bias = w[pos : pos + fan_out]
        pos += fan_out
        layers.append((weight, bias))
    return layers


def init_model(spec: ModelSpec, seed: SeedLike) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    rng = make_rng(seed)
    w = np.zeros(spec.n_params, dtype=PARAM_DTYPE)
    for weight, _ in unflatten(w, spec):
        limit = np.sqrt(6.0 / sum(weight.shape))
        weight[...] = rng.uniform(-limit, limit, size=weight.shape)
    return w


def logits(w, spec: ModelSpec, x) -> np.ndarray:
    h = np.asarray(x, dtype=np.float64)
    layers = unflatten(np.asarray(w, dtype=np.float64), spec)
    for weight, bias in layers[:-1]:
        h = np.maximum(h @ weight + bias, 0.0)
    weight, bias = layers[-1]
    return h @ weight + bias


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss(w, spec: ModelSpec, x, y) -> float:
    """Mean softmax cross-entropy over the batch."""
    y = np.asarray(y)
    if y.size == 0:
        raise UsageError("empty batch")
    logp = _log_softmax(logits(w, spec, x))
    return float(-logp[np.arange(y.size), y].mean())


def loss_and_grad(w, spec: ModelSpec, x, y) -> tuple[float, np.ndarray]:
    y = np.asarray(y)
    m = y.size
    if m == 0:
        raise UsageError("empty batch")
    w64 = np.asarray(w, dtype=np.float64)
    layers = unflatten(w64, spec)
    acts = [np.asarray(x, dtype=np.float64)]
    for weight, bias in layers[:-1]:
        acts.append(np.maximum(acts[-1] @ weight + bias, 0.0))
    weight, bias = layers[-1]
    logp = _log_softmax(acts[-1] @ weight + bias)
    value = float(-logp[np.arange(m), y].mean())

    delta = np.exp(logp)
    delta[np.arange(m), y] -= 1.0
    delta /= m
    grads = []
    for layer in range(len(layers) - 1, -1, -1):
        weight, _ = layers[layer]
        a = acts[layer]
        grads.append((a.T @ delta, delta.sum(axis=0)))
        if layer:
            delta = (delta @ weight.T) * (a > 0)
    flat = np.concatenate([part.ravel() for gw, gb in reversed(grads) for part in (gw, gb)])
    return value, flat


def grad(w, spec: ModelSpec, x, y) -> np.ndarray:
    return loss_and_grad(w, spec, x, y)[1]


def local_train(
    w0,
    spec: ModelSpec,
    shard: DatasetShard,
    batch_size: int,
    tau: int,
    lr: float,
    seed: SeedLike,
) -> tuple[np.ndarray, np.ndarray]:
    """Run ``tau`` SGD steps from ``w0``; return ``(w_tau, g)`` with ``w0 - g == w_tau``.

    Batches are drawn uniformly with replacement. Steps run in float64; the
    accumulated update ``g`` is rounded to float32 once and ``w_tau`` is
    derived from it so the identity holds bit for bit.
    """
    m = len(shard)
    if m == 0:
        raise UsageError("empty shard")
    if batch_size < 1 or tau < 0:
        raise UsageError("batch size must be >= 1 and tau >= 0")
    w0 = np.asarray(w0, dtype=PARAM_DTYPE)
    rng = make_rng(seed)
    w = w0.astype(np.float64)
    for _ in range(tau):
        pick = rng.integers(0, m, size=batch_size)
        w -= lr * grad(w, spec, shard.features[pick], shard.labels[pick])
    g = (w0.astype(np.float64) - w).astype(PARAM_DTYPE)
    return w0 - g, g


def predict(w, spec: ModelSpec, x) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lower class index on ties
    return np.argmax(logits(w, spec, x), axis=1)


def evaluate(w, spec: ModelSpec, test: DatasetShard) -> float:
    if len(test) == 0:
        raise UsageError("empty test shard")
    return float(np.mean(predict(w, spec, test.features) == test.labels))
