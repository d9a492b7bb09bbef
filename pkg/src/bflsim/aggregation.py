"""Global aggregation rules and the Byzantine device model."""

from __future__ import annotations

import hashlib

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted


def _stack(models) -> np.ndarray:
    try:
        X = np.asarray(models, dtype=float)
    except ValueError as exc:
        raise ValueError("models must share one dimension") from exc
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError("models must share one dimension")
    if not np.all(np.isfinite(X)):
        raise ValueError("models must be finite")
    return X


def _ordered_mean(X: np.ndarray) -> np.ndarray:
    # sorting each coordinate first makes the float sum independent of row order
    return np.sort(X, axis=0).sum(axis=0) / X.shape[0]


def krum_scores(models, f_dev: int) -> np.ndarray:
    """Sum of squared distances from each model to its ``K - f_dev - 2`` nearest peers."""
    X = _stack(models)
    n = X.shape[0]
    n_neighbors = n - int(f_dev) - 2
    if f_dev < 0 or n_neighbors < 1:
        raise ValueError(f"need K >= f_dev + 3 models, got K={n}, f_dev={f_dev}")
    d2 = cdist(X, X, "sqeuclidean")
    np.fill_diagonal(d2, np.inf)
    nearest = np.sort(d2, axis=1)[:, :n_neighbors]
    return nearest.sum(axis=1)


def multi_krum(models, f_dev: int):
    """Keep the ``K - f_dev`` lowest-scoring models and average them.

    Returns ``(selected, aggregate)`` with ``selected`` sorted ascending.
    Ties in score go to the lower index.
    """
    X = _stack(models)
    scores = krum_scores(X, f_dev)
    order = np.argsort(scores, kind="stable")
    selected = np.sort(order[: X.shape[0] - int(f_dev)])
    return selected, _ordered_mean(X[selected])


def fedavg(models, weights=None) -> np.ndarray:
    X = _stack(models)
    w = np.ones(X.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (X.shape[0],):
        raise ValueError("one weight per model required")
    if np.any(w < 0) or not w.sum() > 0:
        raise ValueError("weights must be non-negative with a positive sum")
    if np.all(w == w[0]):
        return _ordered_mean(X)
    return np.sort(w[:, None] * X, axis=0).sum(axis=0) / w.sum()


def gaussian_attack(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Model upload of a Byzantine device: i.i.d. N(0, 1) parameters."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return rng.standard_normal(dim)


def model_digest(values, signer: int) -> str:
    """Content hash standing in for a signature over ``values`` by ``signer``."""
    arr = np.ascontiguousarray(np.asarray(values, dtype="<f8"))
    h = hashlib.sha256()
    h.update(arr.tobytes())
    h.update(int(signer).to_bytes(8, "little", signed=True))
    return h.hexdigest()


class MultiKrum(BaseEstimator):
    """Multi-Krum aggregator with the estimator interface.

    ``fit`` takes the stacked local models (one row per device).

    Attributes
    ----------
    scores_ : ndarray of shape (n_models,)
    support_ : ndarray of selected row indices
    aggregate_ : ndarray of shape (n_params,)
    """

    def __init__(self, n_byzantine=0):
        self.n_byzantine = n_byzantine

    def fit(self, X, y=None):
        X = check_array(X)
        self.scores_ = krum_scores(X, self.n_byzantine)
        self.support_, self.aggregate_ = multi_krum(X, self.n_byzantine)
        return self

    def transform(self, X):
        check_is_fitted(self, "aggregate_")
        return np.asarray(X)[self.support_]

    def aggregate(self, X):
        return self.fit(X).aggregate_


class FedAvg(BaseEstimator):
    def __init__(self):
        pass

    def fit(self, X, y=None, sample_weight=None):
        X = check_array(X)
        self.support_ = np.arange(X.shape[0])
        self.aggregate_ = fedavg(X, sample_weight)
        return self

    def aggregate(self, X, sample_weight=None):
        return self.fit(X, sample_weight=sample_weight).aggregate_


def make_aggregator(name: str, n_byzantine: int = 0):
    if name == "fedavg":
        return FedAvg()
    if name == "multi_krum":
        return MultiKrum(n_byzantine=n_byzantine)
    raise ValueError(f"unknown aggregator {name!r}")
