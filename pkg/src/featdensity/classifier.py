"""Feed-forward classifier with hand-written forward and backward passes.

Layout: ReLU hidden layers, a tanh feature layer (the feature extractor
output, bounded in (-1, 1)), then a linear softmax head ``W f(x) + b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from featdensity.data import LabeledDataset

FORMAT_VERSION = 1

# rows per chunk in _dense; bounds the (rows, out, in) temporary
_CHUNK_ELEMS = 1 << 22


def _dense(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """``x @ w.T + b`` evaluated so every output row depends only on its input row.

    BLAS matmul can round differently depending on how many rows are in the
    batch; an explicit multiply-and-reduce keeps batch and per-row results
    bit-identical.
    """
    rows = max(1, _CHUNK_ELEMS // max(1, w.size))
    if x.shape[0] <= rows:
        out = (x[:, None, :] * w[None, :, :]).sum(-1)
    else:
        out = np.concatenate(
            [(x[i : i + rows, None, :] * w[None, :, :]).sum(-1) for i in range(0, x.shape[0], rows)]
        )
    if b is not None:
        out += b
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class MlpClassifier:
    """Parameters of the network. The last weight/bias pair is the softmax head."""

    layer_weights: list[np.ndarray]
    layer_biases: list[np.ndarray]
    hidden_activation: str = "relu"
    feature_activation: str = "tanh"

    def __post_init__(self):
        if len(self.layer_weights) < 2 or len(self.layer_weights) != len(self.layer_biases):
            raise ValueError("need at least a feature layer and a head, with one bias per weight")
        self.layer_weights = [np.asarray(w, dtype=np.float64) for w in self.layer_weights]
        self.layer_biases = [np.asarray(b, dtype=np.float64) for b in self.layer_biases]
        for i, (w, b) in enumerate(zip(self.layer_weights, self.layer_biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} are incompatible")
            if i and w.shape[1] != self.layer_weights[i - 1].shape[0]:
                raise ValueError(f"layer {i} expects {w.shape[1]} inputs, previous layer emits "
                                 f"{self.layer_weights[i - 1].shape[0]}")
        if self.hidden_activation != "relu" or self.feature_activation != "tanh":
            raise ValueError("only relu hidden layers and a tanh feature layer are supported")

    @property
    def input_dim(self) -> int:
        return self.layer_weights[0].shape[1]

    @property
    def feature_dim(self) -> int:
        return self.layer_weights[-1].shape[1]

    @property
    def class_count(self) -> int:
        return self.layer_weights[-1].shape[0]

    @property
    def head(self) -> tuple[np.ndarray, np.ndarray]:
        return self.layer_weights[-1], self.layer_biases[-1]

    def copy(self) -> MlpClassifier:
        return MlpClassifier([w.copy() for w in self.layer_weights],
                             [b.copy() for b in self.layer_biases])

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "hidden_activation": self.hidden_activation,
            "feature_activation": self.feature_activation,
            "layers": [
                {"shape": list(w.shape), "weights": w.ravel().tolist(), "biases": b.tolist()}
                for w, b in zip(self.layer_weights, self.layer_biases)
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> MlpClassifier:
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format_version {doc.get('format_version')!r}")
        weights = [np.array(layer["weights"], dtype=np.float64).reshape(layer["shape"])
                   for layer in doc["layers"]]
        biases = [np.array(layer["biases"], dtype=np.float64) for layer in doc["layers"]]
        return cls(weights, biases, doc["hidden_activation"], doc["feature_activation"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> MlpClassifier:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    l2_weight: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.l2_weight < 0:
            raise ValueError("l2_weight must be >= 0")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)


def init_mlp(input_dim: int, hidden_sizes, feature_dim: int, class_count: int, seed: int) -> MlpClassifier:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    sizes = [input_dim, *hidden_sizes, feature_dim, class_count]
    if any(int(s) < 1 for s in sizes):
        raise ValueError(f"all layer sizes must be >= 1, got {sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        scale = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-scale, scale, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpClassifier(weights, biases)


def _check_inputs(m: MlpClassifier, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != m.input_dim:
        raise ValueError(f"expected inputs with {m.input_dim} columns, got shape {x.shape}")
    return x


def _check_labels(m: MlpClassifier, y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= m.class_count or not np.all(y == np.round(y))):
        raise ValueError(f"labels must be integers in [0, {m.class_count})")
    return y.astype(np.int64)


def _forward_cache(m: MlpClassifier, x: np.ndarray):
    """Run the network on a batch, keeping every activation for backprop."""
    acts = [x]
    pre = []
    n_body = len(m.layer_weights) - 1
    for i in range(n_body):
        z = _dense(acts[-1], m.layer_weights[i], m.layer_biases[i])
        pre.append(z)
        acts.append(np.tanh(z) if i == n_body - 1 else np.maximum(z, 0.0))
    w, b = m.head
    logits = _dense(acts[-1], w, b)
    return acts, pre, logits


def _backward(m: MlpClassifier, acts, pre, dlogits: np.ndarray, want_params: bool):
    """Backpropagate ``dlogits`` (rows = samples). Returns (dx, dW list, db list)."""
    n_body = len(m.layer_weights) - 1
    dws = [None] * len(m.layer_weights)
    dbs = [None] * len(m.layer_weights)
    if want_params:
        dws[-1] = dlogits.T @ acts[-1]
        dbs[-1] = dlogits.sum(axis=0)
    delta = _dense(dlogits, m.layer_weights[-1].T)
    for i in range(n_body - 1, -1, -1):
        if i == n_body - 1:
            delta = delta * (1.0 - acts[i + 1] ** 2)
        else:
            delta = delta * (pre[i] > 0)
        if want_params:
            dws[i] = delta.T @ acts[i]
            dbs[i] = delta.sum(axis=0)
        delta = _dense(delta, m.layer_weights[i].T)
    return delta, dws, dbs


def forward_batch(m: MlpClassifier, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(features, logits, probs) for every row of ``x``."""
    x = _check_inputs(m, x)
    acts, _, logits = _forward_cache(m, x)
    return acts[-1], logits, softmax(logits)


def forward(m: MlpClassifier, x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a single input vector, got shape {x.shape}")
    features, logits, probs = forward_batch(m, x[None, :])
    return features[0], logits[0], probs[0]


def predict_batch(m: MlpClassifier, x) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the smallest index
    return np.argmax(forward_batch(m, x)[2], axis=1)


def predict(m: MlpClassifier, x) -> int:
    return int(np.argmax(forward(m, x)[2]))


def extract_features(m: MlpClassifier, x) -> np.ndarray:
    return forward_batch(m, x)[0]


def head_logits(m: MlpClassifier, features) -> np.ndarray:
    """Apply only the linear head to precomputed features."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != m.feature_dim:
        raise ValueError(f"expected features with {m.feature_dim} columns, got {features.shape}")
    w, b = m.head
    return _dense(features, w, b)


def cross_entropy(m: MlpClassifier, x, y) -> np.ndarray:
    """Per-sample loss ``-log p(y | x)``."""
    x = _check_inputs(m, x)
    y = _check_labels(m, y, x.shape[0])
    _, _, logits = _forward_cache(m, x)
    return -log_softmax(logits)[np.arange(x.shape[0]), y]


def loss_and_grads(m: MlpClassifier, x, y):
    """Mean cross-entropy over the batch and its gradients w.r.t. every weight and bias."""
    x = _check_inputs(m, x)
    y = _check_labels(m, y, x.shape[0])
    n = x.shape[0]
    acts, pre, logits = _forward_cache(m, x)
    logp = log_softmax(logits)
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    _, dws, dbs = _backward(m, acts, pre, dlogits, want_params=True)
    return float(-logp[np.arange(n), y].mean()), dws, dbs


def input_gradient_batch(m: MlpClassifier, x, y) -> np.ndarray:
    """Row i is the gradient of ``-log p(y_i | x_i)`` with respect to ``x_i``."""
    x = _check_inputs(m, x)
    y = _check_labels(m, y, x.shape[0])
    acts, pre, logits = _forward_cache(m, x)
    dlogits = softmax(logits)
    dlogits[np.arange(x.shape[0]), y] -= 1.0
    dx, _, _ = _backward(m, acts, pre, dlogits, want_params=False)
    return dx


def input_gradient(m: MlpClassifier, x, y: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a single input vector, got shape {x.shape}")
    return input_gradient_batch(m, x[None, :], np.array([y]))[0]


def accuracy(m: MlpClassifier, ds: LabeledDataset) -> float:
    return float(np.mean(predict_batch(m, ds.inputs) == ds.labels))


def train(m: MlpClassifier, train_ds: LabeledDataset, val_ds: LabeledDataset, cfg: TrainConfig) -> TrainReport:
    """Mini-batch SGD with classical momentum and L2 on weights (not biases).

    Mutates ``m`` in place. ``train_loss`` is the size-weighted mean of the
    mini-batch losses seen during each epoch (the data term only); the
    accuracies are measured on the full sets after each epoch.
    """
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("training and validation sets must be non-empty")
    for name, ds in (("train", train_ds), ("val", val_ds)):
        if ds.dim != m.input_dim:
            raise ValueError(f"{name} set has {ds.dim} columns, model expects {m.input_dim}")
        if ds.labels.max() >= m.class_count:
            raise ValueError(f"{name} set has labels outside [0, {m.class_count})")

    report = TrainReport()
    rng = np.random.default_rng(cfg.seed)
    vel_w = [np.zeros_like(w) for w in m.layer_weights]
    vel_b = [np.zeros_like(b) for b in m.layer_biases]
    n = len(train_ds)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, dws, dbs = loss_and_grads(m, train_ds.inputs[idx], train_ds.labels[idx])
            total += loss * idx.size
            for i in range(len(m.layer_weights)):
                g = dws[i] + cfg.l2_weight * m.layer_weights[i]
                vel_w[i] = cfg.momentum * vel_w[i] - cfg.learning_rate * g
                vel_b[i] = cfg.momentum * vel_b[i] - cfg.learning_rate * dbs[i]
                m.layer_weights[i] += vel_w[i]
                m.layer_biases[i] += vel_b[i]
        report.train_loss.append(total / n)
        report.train_accuracy.append(accuracy(m, train_ds))
        report.val_accuracy.append(accuracy(m, val_ds))
    return report
