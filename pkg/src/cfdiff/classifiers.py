"""Differentiable target classifiers with hand-written input gradients.

Two model families act on ambient vectors: a linear softmax model and a
one-hidden-layer tanh MLP. Loss is cross-entropy toward a chosen class;
``input_grad`` is its exact gradient with respect to the input. Functions
take ``x`` of shape ``(n,)`` or ``(N, n)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgument


@dataclass(eq=False)
class LinearSoftmax:
    weights: np.ndarray  # (K, n)
    biases: np.ndarray  # (K,)
    seed: int | None = None

    kind = "linear"

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"weights": self.weights, "biases": self.biases}


@dataclass(eq=False)
class Mlp1:
    W1: np.ndarray  # (h, n)
    b1: np.ndarray  # (h,)
    W2: np.ndarray  # (K, h)
    b2: np.ndarray  # (K,)
    seed: int | None = None

    kind = "mlp"

    @property
    def in_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def n_classes(self) -> int:
        return self.W2.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}


Model = LinearSoftmax | Mlp1


@dataclass(frozen=True)
class ModelSpec:
    kind: str  # "linear" | "mlp"
    in_dim: int
    n_classes: int
    hidden: int = 64


def _check_x(model: Model, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (model.in_dim,):
        raise InvalidArgument(f"input must have trailing dimension {model.in_dim}, got shape {x.shape}")
    return x


def _check_c(model: Model, c) -> np.ndarray:
    c = np.asarray(c)
    if not np.issubdtype(c.dtype, np.integer) or np.any(c < 0) or np.any(c >= model.n_classes):
        raise InvalidArgument(f"class must be an integer in [0, {model.n_classes}), got {c!r}")
    return c.astype(np.int64)


def logits(model: Model, x) -> np.ndarray:
    x = _check_x(model, x)
    if isinstance(model, LinearSoftmax):
        return x @ model.weights.T + model.biases
    h = np.tanh(x @ model.W1.T + model.b1)
    return h @ model.W2.T + model.b2


def predict(model: Model, x) -> np.ndarray | int:
    """Argmax class; ``np.argmax`` already breaks ties toward the lowest index."""
    out = np.argmax(logits(model, x), axis=-1)
    return int(out) if out.ndim == 0 else out


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(model: Model, x) -> np.ndarray:
    return softmax(logits(model, x))


def ce_loss(model: Model, x, c) -> np.ndarray | float:
    c = _check_c(model, c)
    lg = logits(model, x)
    top = lg.max(axis=-1, keepdims=True)
    lse = (top + np.log(np.exp(lg - top).sum(axis=-1, keepdims=True)))[..., 0]
    picked = np.take_along_axis(lg, np.broadcast_to(c, lse.shape)[..., None], axis=-1)[..., 0]
    out = lse - picked
    return float(out) if out.ndim == 0 else out


def _logit_residual(lg: np.ndarray, c: np.ndarray) -> np.ndarray:
    r = softmax(lg)
    onehot = np.zeros_like(r)
    np.put_along_axis(onehot, np.broadcast_to(c, r.shape[:-1])[..., None], 1.0, axis=-1)
    return r - onehot


def input_grad(model: Model, x, c) -> np.ndarray:
    """d ce_loss(model, x, c) / d x."""
    x = _check_x(model, x)
    c = _check_c(model, c)
    if isinstance(model, LinearSoftmax):
        return _logit_residual(logits(model, x), c) @ model.weights
    h = np.tanh(x @ model.W1.T + model.b1)
    resid = _logit_residual(h @ model.W2.T + model.b2, c)
    return ((resid @ model.W2) * (1.0 - h * h)) @ model.W1


def _param_grads(model: Model, X: np.ndarray, y: np.ndarray) -> dict[str, np.ndarray]:
    """Mean cross-entropy gradient over a minibatch."""
    n = X.shape[0]
    if isinstance(model, LinearSoftmax):
        resid = _logit_residual(logits(model, X), y) / n
        return {"weights": resid.T @ X, "biases": resid.sum(axis=0)}
    h = np.tanh(X @ model.W1.T + model.b1)
    resid = _logit_residual(h @ model.W2.T + model.b2, y) / n
    dpre = (resid @ model.W2) * (1.0 - h * h)
    return {"W1": dpre.T @ X, "b1": dpre.sum(axis=0), "W2": resid.T @ h, "b2": resid.sum(axis=0)}


def init_model(spec: ModelSpec, rng: np.random.Generator, seed: int | None = None) -> Model:
    """Uniform init in +-0.5/sqrt(fan_in)."""
    if spec.kind == "linear":
        lim = 0.5 / np.sqrt(spec.in_dim)
        return LinearSoftmax(
            rng.uniform(-lim, lim, (spec.n_classes, spec.in_dim)), rng.uniform(-lim, lim, spec.n_classes), seed
        )
    if spec.kind == "mlp":
        if spec.hidden < 1:
            raise InvalidArgument("hidden width must be >= 1")
        lim1, lim2 = 0.5 / np.sqrt(spec.in_dim), 0.5 / np.sqrt(spec.hidden)
        return Mlp1(
            rng.uniform(-lim1, lim1, (spec.hidden, spec.in_dim)),
            rng.uniform(-lim1, lim1, spec.hidden),
            rng.uniform(-lim2, lim2, (spec.n_classes, spec.hidden)),
            rng.uniform(-lim2, lim2, spec.n_classes),
            seed,
        )
    raise InvalidArgument(f"unknown model kind {spec.kind!r}")


def train(spec: ModelSpec, X, y, epochs: int, lr: float, batch: int, seed: int) -> Model:
    """Plain minibatch SGD on cross-entropy.

    One generator seeded by ``seed`` draws the initialization and then one
    permutation per epoch, so the result is a pure function of the inputs.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InvalidArgument("training set must be a non-empty (N, n) array")
    if X.shape[0] != y.shape[0]:
        raise InvalidArgument("X and y lengths differ")
    if epochs < 0 or batch < 1:
        raise InvalidArgument("epochs must be >= 0 and batch >= 1")
    rng = np.random.default_rng(seed)
    model = init_model(spec, rng, seed)
    _check_x(model, X)
    _check_c(model, y)
    params = model.params()
    for _ in range(epochs):
        order = rng.permutation(X.shape[0])
        for start in range(0, X.shape[0], batch):
            idx = order[start : start + batch]
            for name, g in _param_grads(model, X[idx], y[idx]).items():
                params[name] -= lr * g
    return model


def accuracy(model: Model, X, y) -> float:
    return float(np.mean(predict(model, X) == np.asarray(y)))


# -- checkpoints -------------------------------------------------------------

def model_to_dict(model: Model) -> dict:
    dims = {"in_dim": model.in_dim, "n_classes": model.n_classes}
    if isinstance(model, Mlp1):
        dims["hidden"] = model.hidden
    return {
        "type": model.kind,
        "dims": dims,
        "seed": model.seed,
        "params": {k: v.tolist() for k, v in model.params().items()},
    }


def model_from_dict(d: dict) -> Model:
    p = {k: np.asarray(v, dtype=np.float64) for k, v in d["params"].items()}
    if d["type"] == "linear":
        model = LinearSoftmax(p["weights"], p["biases"], d.get("seed"))
    elif d["type"] == "mlp":
        model = Mlp1(p["W1"], p["b1"], p["W2"], p["b2"], d.get("seed"))
    else:
        raise InvalidArgument(f"unknown model type {d['type']!r}")
    if model.in_dim != d["dims"]["in_dim"] or model.n_classes != d["dims"]["n_classes"]:
        raise InvalidArgument("checkpoint dims do not match parameter shapes")
    if not all(np.all(np.isfinite(v)) for v in model.params().values()):
        raise InvalidArgument("checkpoint contains non-finite parameters")
    return model


def save_model(model: Model, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)) + "\n")


def load_model(path) -> Model:
    return model_from_dict(json.loads(Path(path).read_text()))
