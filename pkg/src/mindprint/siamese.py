"""Shared-encoder change detector over half-period embeddings.

Each positive user contributes four embeddings: the two halves of their
pre-engagement activity (B1, B2) and of their post-engagement activity
(A1, A2). Same-side pairs are labeled similar, cross-side pairs
dissimilar. A small multilayer encoder maps both members of a pair to
32 dimensions; a logistic head on the absolute difference of the two
encodings scores similarity.
"""

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted, check_X_y

from .errors import DataError, TrainingDivergedError

LAYER_SIZES = (128, 64, 32)
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3", "Wh", "bh")


@dataclass
class WindowQuadruple:
    author: str
    B1: np.ndarray | None
    B2: np.ndarray | None
    A1: np.ndarray | None
    A2: np.ndarray | None

    def complete(self):
        return all(v is not None for v in (self.B1, self.B2, self.A1, self.A2))


@dataclass
class PairExample:
    x1: np.ndarray
    x2: np.ndarray
    label: int
    author: str = ""
    kind: str = ""


def build_pairs(quadruples):
    """Two similar and two dissimilar pairs per complete user.

    Returns ``(pairs, n_skipped)``; users missing a half-window are skipped.
    """
    pairs, skipped = [], 0
    for q in quadruples:
        if not q.complete():
            skipped += 1
            continue
        pairs.append(PairExample(q.B1, q.A1, 0, q.author, "B1-A1"))
        pairs.append(PairExample(q.B2, q.A2, 0, q.author, "B2-A2"))
        pairs.append(PairExample(q.B1, q.B2, 1, q.author, "B1-B2"))
        pairs.append(PairExample(q.A1, q.A2, 1, q.author, "A1-A2"))
    return pairs, skipped


def pairs_to_arrays(pairs):
    if not pairs:
        raise DataError("empty pair set")
    X1 = np.vstack([np.asarray(p.x1, dtype=float) for p in pairs])
    X2 = np.vstack([np.asarray(p.x2, dtype=float) for p in pairs])
    y = np.array([p.label for p in pairs], dtype=int)
    return X1, X2, y


# -- network -----------------------------------------------------------------


def init_params(n_features, seed, dtype=np.float32):
    """Uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = np.random.default_rng(seed)
    sizes = (n_features,) + LAYER_SIZES + (1,)
    params = {}
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        name = str(k + 1) if k < len(LAYER_SIZES) else "h"
        bound = 1.0 / np.sqrt(fan_in)
        params["W" + name] = rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype)
        params["b" + name] = rng.uniform(-bound, bound, fan_out).astype(dtype)
    return params


def encode(params, X, cache=None):
    z1 = X @ params["W1"] + params["b1"]
    h1 = np.maximum(z1, 0)
    z2 = h1 @ params["W2"] + params["b2"]
    h2 = np.maximum(z2, 0)
    e = h2 @ params["W3"] + params["b3"]
    if cache is not None:
        cache.update(X=X, z1=z1, h1=h1, z2=z2, h2=h2)
    return e


def forward_logits(params, X1, X2):
    d = np.abs(encode(params, X1) - encode(params, X2))
    return (d @ params["Wh"] + params["bh"])[:, 0]


def _sigmoid(z):
    return np.where(z >= 0, 1 / (1 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1 + np.exp(-np.abs(z))))


def bce_from_logits(z, y):
    # log(1 + e^z) - y z, written to avoid overflow
    return np.mean(np.maximum(z, 0) - y * z + np.log1p(np.exp(-np.abs(z))))


def _encoder_backward(params, cache, de, grads):
    grads["W3"] += cache["h2"].T @ de
    grads["b3"] += de.sum(axis=0)
    dz2 = (de @ params["W3"].T) * (cache["z2"] > 0)
    grads["W2"] += cache["h1"].T @ dz2
    grads["b2"] += dz2.sum(axis=0)
    dz1 = (dz2 @ params["W2"].T) * (cache["z1"] > 0)
    grads["W1"] += cache["X"].T @ dz1
    grads["b1"] += dz1.sum(axis=0)


def loss_and_grads(params, X1, X2, y):
    """Mean binary cross-entropy and its exact gradient for every parameter."""
    c1, c2 = {}, {}
    e1 = encode(params, X1, c1)
    e2 = encode(params, X2, c2)
    diff = e1 - e2
    d = np.abs(diff)
    z = (d @ params["Wh"] + params["bh"])[:, 0]
    y = y.astype(z.dtype)
    loss = bce_from_logits(z, y)

    dz = ((_sigmoid(z) - y) / len(y)).astype(z.dtype)[:, None]
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    grads["Wh"] = d.T @ dz
    grads["bh"] = dz.sum(axis=0)
    de1 = (dz @ params["Wh"].T) * np.sign(diff)
    _encoder_backward(params, c1, de1, grads)
    _encoder_backward(params, c2, -de1, grads)
    return float(loss), grads


class Adam:
    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr = np.sqrt(1 - b2**self.t) / (1 - b1**self.t)
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            params[k] -= (self.lr * corr * self.m[k] / (np.sqrt(self.v[k]) + self.eps)).astype(
                params[k].dtype
            )


# -- estimator ---------------------------------------------------------------


class SiameseClassifier(ClassifierMixin, BaseEstimator):
    """Pair classifier; ``X`` rows are the two embeddings concatenated.

    Inputs are z-scored with statistics from the training rows of both
    pair members. ``predict`` thresholds the similarity score at 0.5.
    """

    def __init__(self, epochs=300, lr=1e-4, batch_size=32, random_state=0, dtype="float32"):
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.random_state = random_state
        self.dtype = dtype

    def _split(self, X):
        d = X.shape[1] // 2
        return X[:, :d], X[:, d:]

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        if X.shape[1] % 2:
            raise ValueError("pair rows must have an even number of columns")
        self.classes_ = np.array([0, 1])
        dt = np.dtype(self.dtype)
        X1, X2 = self._split(X)
        both = np.vstack([X1, X2])
        self.mean_ = both.mean(axis=0)
        std = both.std(axis=0)
        self.scale_ = np.where(std > 0, std, 1.0)
        X1 = ((X1 - self.mean_) / self.scale_).astype(dt)
        X2 = ((X2 - self.mean_) / self.scale_).astype(dt)

        init_seed, order_seed = np.random.SeedSequence(self.random_state).generate_state(2)
        params = init_params(X1.shape[1], int(init_seed), dt)
        opt = Adam(params, lr=self.lr)
        rng = np.random.default_rng(int(order_seed))
        n = len(y)
        self.loss_trace_ = []
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, self.batch_size):
                idx = order[start : start + self.batch_size]
                loss, grads = loss_and_grads(params, X1[idx], X2[idx], y[idx])
                if not np.isfinite(loss):
                    raise TrainingDivergedError(epoch)
                total += loss * len(idx)
                opt.step(params, grads)
            self.loss_trace_.append(total / n)
        self.params_ = params
        self.n_features_in_ = X.shape[1]
        return self

    def _prep(self, X):
        check_is_fitted(self, "params_")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} columns")
        X1, X2 = self._split(X)
        dt = self.params_["W1"].dtype
        return ((X1 - self.mean_) / self.scale_).astype(dt), ((X2 - self.mean_) / self.scale_).astype(dt)

    def decision_function(self, X):
        return forward_logits(self.params_, *self._prep(X)).astype(np.float64)

    def similarity(self, X):
        return _sigmoid(self.decision_function(X))

    def predict_proba(self, X):
        p = self.similarity(X)
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return (self.similarity(X) >= 0.5).astype(int)

    def to_dict(self):
        check_is_fitted(self, "params_")
        return {
            "format": "mindprint.siamese",
            "version": 1,
            "hyperparameters": self.get_params(),
            "input_mean": self.mean_.tolist(),
            "input_scale": self.scale_.tolist(),
            "layers": [
                {"name": k, "shape": list(self.params_[k].shape), "values": self.params_[k].ravel().tolist()}
                for k in PARAM_NAMES
            ],
            "loss_trace": list(self.loss_trace_),
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format") != "mindprint.siamese":
            raise DataError("not a serialized siamese model")
        model = cls(**doc["hyperparameters"])
        dt = np.dtype(model.dtype)
        model.params_ = {
            layer["name"]: np.asarray(layer["values"], dtype=dt).reshape(layer["shape"])
            for layer in doc["layers"]
        }
        model.mean_ = np.asarray(doc["input_mean"])
        model.scale_ = np.asarray(doc["input_scale"])
        model.n_features_in_ = 2 * len(model.mean_)
        model.classes_ = np.array([0, 1])
        model.loss_trace_ = list(doc["loss_trace"])
        return model


def pair_matrix(pairs):
    X1, X2, y = pairs_to_arrays(pairs)
    return np.hstack([X1, X2]), y


def split_pairs_by_author(pairs, seed, test_fraction=0.2):
    """80/20 split that keeps all pairs of one author on the same side."""
    authors = sorted({p.author for p in pairs})
    rng = np.random.default_rng(seed)
    n_test = max(1, int(round(test_fraction * len(authors)))) if len(authors) > 1 else 0
    test_authors = set(rng.permutation(authors)[:n_test].tolist())
    train = [p for p in pairs if p.author not in test_authors]
    test = [p for p in pairs if p.author in test_authors]
    return train, test


@dataclass
class SiameseRun:
    model: SiameseClassifier
    loss_trace: list
    train_pairs: list
    test_pairs: list
    accuracy: float
    precision: float


def train_siamese(pairs, epochs=300, lr=1e-4, batch=32, seed=0, dtype="float32"):
    """Train on 80% of authors and evaluate on the held-out 20%."""
    labels = np.array([p.label for p in pairs], dtype=int)
    if np.sum(labels == 1) < 2 or np.sum(labels == 0) < 2:
        raise DataError("siamese training needs at least two pairs of each class")
    split_seed, fit_seed = np.random.SeedSequence(seed).generate_state(2)
    train, test = split_pairs_by_author(pairs, int(split_seed))
    if not test:
        train, test = pairs, pairs
    X, y = pair_matrix(train)
    model = SiameseClassifier(epochs, lr, batch, int(fit_seed), dtype).fit(X, y)
    acc, prec = evaluate_siamese(model, test)
    return SiameseRun(model, model.loss_trace_, train, test, acc, prec)


def evaluate_siamese(model, pairs):
    """Accuracy and precision (similar = positive class) at threshold 0.5.

    Precision is NaN when no pair is predicted similar.
    """
    X, y = pair_matrix(pairs)
    pred = model.predict(X)
    return confusion_metrics(pred, y)


def confusion_metrics(pred, y):
    pred, y = np.asarray(pred), np.asarray(y)
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    acc = float(np.mean(pred == y))
    prec = tp / (tp + fp) if tp + fp else float("nan")
    return acc, prec


def write_pairs(pairs, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = len(pairs[0].x1) if pairs else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ["author", "kind", "label"]
            + [f"x1_{k}" for k in range(1, d + 1)]
            + [f"x2_{k}" for k in range(1, d + 1)]
        )
        for p in pairs:
            w.writerow(
                [p.author, p.kind, p.label]
                + [repr(float(v)) for v in p.x1]
                + [repr(float(v)) for v in p.x2]
            )


def save_model(model, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_dict(), fh)
        fh.write("\n")
