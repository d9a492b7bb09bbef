"""Desk-scale federated learning: logistic regression on Gaussian blobs.

A model is a flat vector ``[weights..., bias]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._rng import seed_sequence
from .aggregation import fedavg, gaussian_attack, multi_krum


@dataclass(frozen=True)
class SyntheticDataset:
    features: np.ndarray
    labels: np.ndarray
    owner: int = -1

    def __post_init__(self):
        if len(self.features) != len(self.labels) or len(self.labels) < 1:
            raise ValueError("features and labels must be non-empty and aligned")

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 32
    local_epochs: int = 1
    rounds: int = 100

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.local_epochs < 1 or self.rounds < 1:
            raise ValueError("batch_size, local_epochs and rounds must be positive")


def make_synthetic_task(k_devices: int, samples_per_device: int, dim: int, seed,
                        separation: float = 4.5, test_size: int = 2000, iid: bool = True):
    """Two unit-variance Gaussian blobs with means ``+-separation/2`` along a fixed axis.

    Returns ``(shards, test_set)``. With ``iid=False`` device ``k`` draws its
    positive-class fraction from a spread of label mixtures.
    """
    if min(k_devices, samples_per_device, dim) < 1:
        raise ValueError("all sizes must be positive")
    rng = np.random.default_rng(seed)
    direction = np.zeros(dim)
    direction[0] = 1.0
    mean = 0.5 * separation * direction

    def draw(n, frac_pos):
        y = (rng.uniform(size=n) < frac_pos).astype(float)
        X = rng.standard_normal((n, dim)) + np.where(y[:, None] > 0, mean, -mean)
        return X, y

    shards = []
    for k in range(k_devices):
        frac = 0.5 if iid else (k + 0.5) / k_devices
        X, y = draw(samples_per_device, frac)
        shards.append(SyntheticDataset(X, y, owner=k))
    X, y = draw(test_size, 0.5)
    return shards, SyntheticDataset(X, y, owner=-1)


def _logits(model, X):
    model = np.asarray(model, dtype=float)
    return X @ model[:-1] + model[-1]


def local_loss(model, features, labels) -> float:
    """Mean logistic loss."""
    z = _logits(model, np.asarray(features, dtype=float))
    y = np.asarray(labels, dtype=float)
    # log(1 + e^z) - y*z, stable for large |z|
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def local_gradient(model, features, labels) -> np.ndarray:
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float)
    residual = expit(_logits(model, X)) - y
    n = len(y)
    return np.concatenate([X.T @ residual / n, [residual.sum() / n]])


def local_sgd_round(model, dataset: SyntheticDataset, config: TrainConfig,
                    rng: np.random.Generator) -> np.ndarray:
    w = np.array(model, dtype=float)
    n = len(dataset)
    for _ in range(config.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            w -= config.learning_rate * local_gradient(w, dataset.features[idx], dataset.labels[idx])
    return w


def global_metrics(model, test_set: SyntheticDataset):
    """``(mean loss, accuracy)`` on the held-out set."""
    z = _logits(model, test_set.features)
    acc = float(np.mean((z > 0) == (test_set.labels > 0.5)))
    return local_loss(model, test_set.features, test_set.labels), acc


def run_federated(shards, test_set, config: TrainConfig, aggregator: str = "fedavg",
                  n_attackers: int = 0, krum_f: int | None = None, seed=0):
    """Simulate ``config.rounds`` of FL with Gaussian Byzantine devices.

    Devices ``0..n_attackers-1`` are malicious. Returns ``(model, history)``
    where history holds one ``(round, loss, accuracy, train_loss)`` row per round.
    """
    k = len(shards)
    if not 0 <= n_attackers <= k:
        raise ValueError("n_attackers must lie in [0, K]")
    if krum_f is None:
        krum_f = n_attackers
    dim = shards[0].features.shape[1] + 1
    streams = seed_sequence(seed).spawn(k + 1)
    device_rngs = [np.random.default_rng(s) for s in streams[:k]]
    attack_rng = np.random.default_rng(streams[k])
    sizes = np.array([len(s) for s in shards], dtype=float)
    w = np.zeros(dim)
    history = []
    for t in range(config.rounds):
        local = []
        for d, shard in enumerate(shards):
            if d < n_attackers:
                local.append(gaussian_attack(dim, attack_rng))
            else:
                local.append(local_sgd_round(w, shard, config, device_rngs[d]))
        local = np.vstack(local)
        if aggregator == "fedavg":
            w = fedavg(local, sizes)
        elif aggregator == "multi_krum":
            _, w = multi_krum(local, krum_f)
        else:
            raise ValueError(f"unknown aggregator {aggregator!r}")
        loss, acc = global_metrics(w, test_set)
        honest = shards[n_attackers:] or shards
        train_loss = float(np.mean([local_loss(w, s.features, s.labels) for s in honest]))
        history.append((t + 1, loss, acc, train_loss))
    return w, history


class FederatedLogisticRegression(ClassifierMixin, BaseEstimator):
    """Binary logistic regression trained by simulated federated learning.

    ``fit`` splits the rows into ``n_devices`` equal shards in order, so
    shuffle beforehand for an i.i.d. split.
    """

    def __init__(self, n_devices=10, n_attackers=0, aggregator="fedavg", krum_f=None,
                 rounds=100, learning_rate=0.01, batch_size=32, local_epochs=1,
                 random_state=0):
        self.n_devices = n_devices
        self.n_attackers = n_attackers
        self.aggregator = aggregator
        self.krum_f = krum_f
        self.rounds = rounds
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.local_epochs = local_epochs
        self.random_state = random_state

    def fit(self, X, y, eval_set=None):
        X, y = check_X_y(X, y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) != 2:
            raise ValueError("binary labels required")
        parts = np.array_split(np.arange(len(y)), self.n_devices)
        shards = [SyntheticDataset(X[p], y_idx[p].astype(float), owner=k) for k, p in enumerate(parts)]
        if eval_set is None:
            test = SyntheticDataset(X, y_idx.astype(float))
        else:
            Xe, ye = eval_set
            test = SyntheticDataset(check_array(Xe), np.searchsorted(self.classes_, ye).astype(float))
        config = TrainConfig(self.learning_rate, self.batch_size, self.local_epochs, self.rounds)
        w, self.history_ = run_federated(shards, test, config, self.aggregator, self.n_attackers,
                                         self.krum_f, self.random_state)
        self.coef_ = w[:-1][None, :]
        self.intercept_ = w[-1:]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        return check_array(X) @ self.coef_[0] + self.intercept_[0]

    def predict_proba(self, X):
        p = expit(self.decision_function(X))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return self.classes_[(self.decision_function(X) > 0).astype(int)]
