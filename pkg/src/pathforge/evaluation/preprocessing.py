from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ..errors import NonFiniteError

MIN_STD = 1e-12


def check_features(X, name: str = "X") -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if not np.isfinite(X).all():
        raise NonFiniteError(f"{name} contains NaN or inf")
    return check_array(X, ensure_min_features=0)


class FoldStandardizer(TransformerMixin, BaseEstimator):
    """Z-score with statistics from the fitting data only; near-constant
    features (std < 1e-12) are dropped."""

    def __init__(self, min_std: float = MIN_STD):
        self.min_std = min_std

    def fit(self, X, y=None):
        X = check_features(X)
        self.mean_ = X.mean(axis=0)
        self.scale_ = X.std(axis=0)
        self.keep_ = self.scale_ >= self.min_std
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "keep_")
        X = check_features(X)
        return (X[:, self.keep_] - self.mean_[self.keep_]) / self.scale_[self.keep_]


class IdentityScaler(TransformerMixin, BaseEstimator):
    def fit(self, X, y=None):
        self.n_features_in_ = check_features(X).shape[1]
        return self

    def transform(self, X):
        return check_features(X)


def make_scaler(standardize: bool):
    return FoldStandardizer() if standardize else IdentityScaler()
