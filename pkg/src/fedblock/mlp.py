"""Dense feed-forward classifier with hand-written backprop.

Default network: 1536 inputs -> 416 ReLU -> 32 SeLU -> 1 sigmoid, trained
with binary cross-entropy and plain minibatch SGD (lr 0.01). The output is
the probability of label 1 (non-malicious); label 0 means blocked.

All parameters live in one flat float64 buffer. Per-layer weight and bias
arrays are views into it, so federated code can subtract, average and
copy whole models as vectors.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import EmptyDataset, SingleClass, WidthMismatch

SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805
_EXP_CLAMP = 50.0

ACTIVATIONS = ("relu", "selu", "sigmoid", None)
MODEL_FORMAT = "fedblock-mlp"
MODEL_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    width: int
    activation: str | None = None

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("layer width must be >= 1")
        act = self.activation.lower() if isinstance(self.activation, str) else self.activation
        if act not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "activation", act)


def default_architecture(input_width: int = 1536) -> list[LayerSpec]:
    return [LayerSpec(input_width), LayerSpec(416, "relu"), LayerSpec(32, "selu"), LayerSpec(1, "sigmoid")]


def _validate_arch(arch):
    arch = [a if isinstance(a, LayerSpec) else LayerSpec(*a) for a in arch]
    if len(arch) < 2:
        raise ValueError("architecture needs an input layer and at least one weight layer")
    if arch[-1].width != 1 or arch[-1].activation != "sigmoid":
        raise ValueError("final layer must be a single sigmoid unit")
    return arch


class ModelParams:
    """Weights and biases for every layer, backed by one flat vector.

    ``layers[i]`` is ``(W, b)`` with ``W`` of shape (width_out, width_in).
    """

    def __init__(self, architecture, flat=None):
        self.architecture = _validate_arch(architecture)
        shapes = []
        for prev, cur in zip(self.architecture[:-1], self.architecture[1:]):
            shapes.append(((cur.width, prev.width), (cur.width,)))
        self._shapes = shapes
        size = sum(w[0] * w[1] + b[0] for w, b in shapes)
        if flat is None:
            flat = np.zeros(size)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (size,):
            raise WidthMismatch(f"expected {size} parameters, got {flat.shape}")
        self.flat = flat
        self.layers = []
        off = 0
        for (wshape, bshape) in shapes:
            nw = wshape[0] * wshape[1]
            W = flat[off:off + nw].reshape(wshape)
            off += nw
            b = flat[off:off + bshape[0]]
            off += bshape[0]
            self.layers.append((W, b))

    @property
    def input_width(self) -> int:
        return self.architecture[0].width

    @property
    def size(self) -> int:
        return self.flat.shape[0]

    def copy(self) -> ModelParams:
        return ModelParams(self.architecture, self.flat.copy())

    def like(self, flat) -> ModelParams:
        """New params with this architecture over the given flat vector."""
        return ModelParams(self.architecture, flat)

    def zeros_like(self) -> ModelParams:
        return ModelParams(self.architecture)

    def __eq__(self, other):
        return (isinstance(other, ModelParams) and self.architecture == other.architecture
                and np.array_equal(self.flat, other.flat))

    def __repr__(self):
        widths = "->".join(str(a.width) for a in self.architecture)
        return f"ModelParams({widths}, n={self.size})"


def init_params(arch, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases, deterministic in ``seed``."""
    params = ModelParams(arch)
    rng = np.random.default_rng(seed)
    for W, _ in params.layers:
        fan_out, fan_in = W.shape
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        W[...] = rng.uniform(-limit, limit, size=W.shape)
    return params


# ---------------------------------------------------------------- activations

def _selu(z):
    neg = SELU_ALPHA * np.expm1(np.minimum(z, _EXP_CLAMP))
    return SELU_SCALE * np.where(z > 0, z, neg)


def _selu_grad(z):
    return SELU_SCALE * np.where(z > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(z, _EXP_CLAMP)))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(z, act):
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "selu":
        return _selu(z)
    if act == "sigmoid":
        return _sigmoid(z)
    return z


def _activation_grad(z, act):
    if act == "relu":
        return (z > 0).astype(z.dtype)
    if act == "selu":
        return _selu_grad(z)
    if act == "sigmoid":
        s = _sigmoid(z)
        return s * (1.0 - s)
    return np.ones_like(z)


# ---------------------------------------------------------------- passes

def _check_width(params, X):
    if X.ndim != 2 or X.shape[1] != params.input_width:
        raise WidthMismatch(f"expected {params.input_width} features, got {X.shape[-1] if X.ndim else 0}")


def _forward_logits(params, X, keep=False):
    acts = [X]
    pre = []
    a = X
    n_layers = len(params.layers)
    for i, (W, b) in enumerate(params.layers):
        z = a @ W.T + b
        act = params.architecture[i + 1].activation
        if keep:
            pre.append(z)
        if i == n_layers - 1:
            # output layer: keep the logit, the sigmoid is fused into the loss
            a = z
        else:
            a = _activate(z, act)
        if keep:
            acts.append(a)
    return a[:, 0], pre, acts


def predict_proba(params: ModelParams, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _check_width(params, X)
    logits, _, _ = _forward_logits(params, X)
    return _sigmoid(logits)


def forward(params: ModelParams, features) -> float:
    """Probability of label 1 for one feature vector."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 1:
        raise WidthMismatch("forward expects a single feature vector")
    return float(predict_proba(params, x[None, :])[0])


def bce_loss(p: float, y: int) -> float:
    return -(y * math.log(p) + (1 - y) * math.log(1 - p))


def _bce_from_logits(z, y):
    # softplus(z) - y*z == -[y ln s(z) + (1-y) ln(1-s(z))], stable for all z
    return np.logaddexp(0.0, z) - y * z


def mean_loss(params: ModelParams, X, y) -> float:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _check_width(params, X)
    logits, _, _ = _forward_logits(params, X)
    return float(np.mean(_bce_from_logits(logits, np.asarray(y, dtype=np.float64))))


def _backward(params, X, y, out=None):
    n = X.shape[0]
    logits, pre, acts = _forward_logits(params, X, keep=True)
    grad = out if out is not None else params.zeros_like()
    delta = (_sigmoid(logits) - y)[:, None] / n
    for i in range(len(params.layers) - 1, -1, -1):
        W, _ = params.layers[i]
        gW, gb = grad.layers[i]
        np.matmul(delta.T, acts[i], out=gW)
        gb[...] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ W) * _activation_grad(pre[i - 1], params.architecture[i].activation)
    return grad, logits


def backward(params: ModelParams, X, y) -> ModelParams:
    """Mean BCE gradient over a batch, same layout as ``params``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.shape[0] == 0:
        raise EmptyDataset("backward needs a non-empty batch")
    _check_width(params, X)
    grad, _ = _backward(params, X, y)
    return grad


def sgd_step(params: ModelParams, gradient: ModelParams, lr: float) -> ModelParams:
    if gradient.size != params.size:
        raise WidthMismatch("gradient and parameter shapes differ")
    return params.like(params.flat - lr * gradient.flat)


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 5
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def train(params: ModelParams, X, y, config: TrainConfig):
    """Minibatch SGD for ``config.epochs`` passes.

    Returns ``(new_params, loss_curve)`` where ``loss_curve[e]`` is the mean
    per-example loss seen during epoch ``e`` (each batch scored before its
    update). The input params are not modified.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if X.shape[0] == 0:
        raise EmptyDataset("no training instances")
    _check_width(params, X)
    out = params.copy()
    grad = params.zeros_like()
    rng = np.random.default_rng(config.seed)
    n = X.shape[0]
    curve = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            _, logits = _backward(out, X[idx], y[idx], out=grad)
            total += float(np.sum(_bce_from_logits(logits, y[idx])))
            out.flat -= config.learning_rate * grad.flat
        curve.append(total / n)
    return out, curve


# ---------------------------------------------------------------- metrics

@dataclass
class MetricsReport:
    """Detection metrics with malicious (label 0) as the positive class."""

    accuracy: float
    roc_auc: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "roc_auc": self.roc_auc, "f1": self.f1,
                "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


def roc_auc(scores, labels) -> float:
    """P(score of a label-1 item > score of a label-0 item), ties count 1/2.

    Rank-sum form of the Mann-Whitney statistic with average ranks for ties.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("roc_auc needs both classes")
    ranks = rankdata(scores, method="average")
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def metrics_from_scores(scores, labels, threshold: float = 0.5) -> MetricsReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    pred = (scores >= threshold).astype(np.int64)
    tp = int(np.sum((pred == 0) & (labels == 0)))
    fp = int(np.sum((pred == 0) & (labels == 1)))
    tn = int(np.sum((pred == 1) & (labels == 1)))
    fn = int(np.sum((pred == 1) & (labels == 0)))
    auc = roc_auc(scores, labels)
    denom = 2 * tp + fp + fn
    f1 = 2 * tp / denom if denom else 0.0
    return MetricsReport((tp + tn) / len(labels), auc, f1, tp, fp, tn, fn)


def evaluate(params: ModelParams, X, y, threshold: float = 0.5) -> MetricsReport:
    return metrics_from_scores(predict_proba(params, X), y, threshold)


def accuracy(params: ModelParams, X, y, threshold: float = 0.5) -> float:
    pred = (predict_proba(params, X) >= threshold).astype(np.int64)
    return float(np.mean(pred == np.asarray(y)))


# ---------------------------------------------------------------- persistence

def save_params(params: ModelParams, path) -> None:
    """Write a versioned ``.npz``: architecture JSON plus row-major arrays."""
    arrays = {}
    for i, (W, b) in enumerate(params.layers):
        arrays[f"W{i}"] = W
        arrays[f"b{i}"] = b
    header = json.dumps({
        "format": MODEL_FORMAT, "version": MODEL_VERSION,
        "architecture": [[a.width, a.activation] for a in params.architecture],
    })
    buf = io.BytesIO()
    np.savez(buf, header=np.array(header), **arrays)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_params(path) -> ModelParams:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format") != MODEL_FORMAT or header.get("version") != MODEL_VERSION:
            raise ValueError(f"{path}: not a {MODEL_FORMAT} v{MODEL_VERSION} file")
        params = ModelParams([LayerSpec(w, a) for w, a in header["architecture"]])
        for i, (W, b) in enumerate(params.layers):
            Wi, bi = data[f"W{i}"], data[f"b{i}"]
            if Wi.shape != W.shape or bi.shape != b.shape:
                raise WidthMismatch(f"{path}: layer {i} shape {Wi.shape} != {W.shape}")
            W[...] = Wi
            b[...] = bi
    if not np.all(np.isfinite(params.flat)):
        raise ValueError(f"{path}: non-finite parameters")
    return params


# ---------------------------------------------------------------- estimator

class MLPDomainClassifier(BaseEstimator, ClassifierMixin):
    """scikit-learn wrapper around :func:`train`.

    ``hidden`` lists ``(width, activation)`` pairs between the input and the
    sigmoid output; the input width is taken from ``X`` at fit time.
    ``predict_proba`` columns follow ``classes_ == [0, 1]``.
    """

    def __init__(self, hidden=((416, "relu"), (32, "selu")), learning_rate=0.01,
                 epochs=5, batch_size=32, random_state=0, warm_start=False):
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state
        self.warm_start = warm_start

    def _arch(self, n_features):
        return [LayerSpec(n_features)] + [LayerSpec(w, a) for w, a in self.hidden] + [LayerSpec(1, "sigmoid")]

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        if not set(np.unique(y)) <= {0, 1}:
            raise ValueError("labels must be 0/1")
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        seed = 0 if self.random_state is None else int(self.random_state)
        if not (self.warm_start and hasattr(self, "params_")):
            self.params_ = init_params(self._arch(X.shape[1]), seed)
        cfg = TrainConfig(self.learning_rate, self.epochs, self.batch_size, seed)
        self.params_, self.loss_curve_ = train(self.params_, X, y, cfg)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        p = predict_proba(self.params_, X)
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)

    def evaluate(self, X, y, threshold=0.5) -> MetricsReport:
        check_is_fitted(self, "params_")
        return evaluate(self.params_, check_array(X, dtype=np.float64), y, threshold)
