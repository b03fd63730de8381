"""Non-parametric case retrieval by exact nearest-neighbour search."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ..errors import DimMismatchError, KTooLargeError, ValidationError
from .preprocessing import check_features


def pairwise_distances(A: np.ndarray, B: np.ndarray, metric: str) -> np.ndarray:
    if metric == "euclidean":
        d2 = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
        return np.sqrt(np.clip(d2, 0.0, None))
    if metric == "cosine":
        na = np.linalg.norm(A, axis=1, keepdims=True)
        nb = np.linalg.norm(B, axis=1, keepdims=True)
        An = np.divide(A, na, out=np.zeros_like(A), where=na > 0)
        Bn = np.divide(B, nb, out=np.zeros_like(B), where=nb > 0)
        return 1.0 - An @ Bn.T
    raise ValidationError(f"unknown metric space {metric!r}")


class CaseRetrieval(ClassifierMixin, BaseEstimator):
    """k-nearest-neighbour retrieval over a training gallery.

    Neighbours are ordered by distance, ties by ascending gallery index.
    ``predict`` is a majority vote; vote ties go to the class of the nearest
    tied neighbour.
    """

    def __init__(self, k=5, metric="cosine"):
        self.k = k
        self.metric = metric

    def fit(self, X, y):
        X = check_features(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValidationError("X and y differ in length")
        self.gallery_ = X
        self.gallery_labels_ = y
        self.classes_ = np.unique(y)
        self.n_features_in_ = X.shape[1]
        return self

    def kneighbors(self, X, k=None):
        check_is_fitted(self, "gallery_")
        k = self.k if k is None else k
        X = check_features(X)
        if X.shape[1] != self.n_features_in_:
            raise DimMismatchError(f"query dim {X.shape[1]} != gallery dim {self.n_features_in_}")
        if k > len(self.gallery_):
            raise KTooLargeError(f"k={k} exceeds gallery size {len(self.gallery_)}")
        dist = pairwise_distances(X, self.gallery_, self.metric)
        idx = np.argsort(dist, axis=1, kind="stable")[:, :k]
        return np.take_along_axis(dist, idx, axis=1), idx

    def predict_proba(self, X):
        _, idx = self.kneighbors(X)
        labels = self.gallery_labels_[idx]
        return np.stack([(labels == c).mean(axis=1) for c in self.classes_], axis=1)

    def predict(self, X):
        _, idx = self.kneighbors(X)
        labels = self.gallery_labels_[idx]
        out = []
        for row in labels:
            counts = {c: int((row == c).sum()) for c in self.classes_}
            best = max(counts.values())
            out.append(next(c for c in row if counts[c] == best))
        return np.array(out)


def average_precision_at_k(hits: np.ndarray, n_relevant: int) -> float:
    """AP@k = sum_i P@i * rel_i / min(k, n_relevant)."""
    if n_relevant == 0:
        return 0.0
    ranks = np.arange(1, len(hits) + 1)
    precision = np.cumsum(hits) / ranks
    return float((precision * hits).sum() / min(len(hits), n_relevant))


def retrieval_eval(train_X, train_y, test_X, test_y, k=5, metric_space="cosine") -> dict:
    """Top-k accuracy (any same-label neighbour) and MAP@k."""
    model = CaseRetrieval(k=k, metric=metric_space).fit(train_X, train_y)
    _, idx = model.kneighbors(test_X)
    test_y = np.asarray(test_y)
    hits = model.gallery_labels_[idx] == test_y[:, None]
    n_rel = {c: int((model.gallery_labels_ == c).sum()) for c in np.unique(test_y)}
    ap = [average_precision_at_k(h.astype(float), n_rel[c]) for h, c in zip(hits, test_y)]
    return {
        "top_k_accuracy": float(hits.any(axis=1).mean()),
        "mean_average_precision_at_k": float(np.mean(ap)),
        "neighbors": idx,
    }
