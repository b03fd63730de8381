"""Linear probing: ridge-penalised multinomial logistic regression."""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ..errors import NonFiniteError, SingleClassError, ValidationError
from .preprocessing import check_features, make_scaler

DEFAULT_LAMBDAS = (1e-4, 1e-3, 1e-2, 1e-1, 1.0)


def probe_objective(W, b, X, Y, lam):
    """Mean cross-entropy plus ``lam / 2 * ||W||^2`` and its gradients.

    ``W`` is ``(k, d)``, ``b`` is ``(k,)``, ``Y`` is one-hot ``(n, k)``.
    Returns ``(f, grad_W, grad_b)``.
    """
    n = len(X)
    logits = X @ W.T + b
    lse = logsumexp(logits, axis=1)
    f = float(np.sum(lse - np.sum(Y * logits, axis=1)) / n + 0.5 * lam * np.sum(W * W))
    resid = (np.exp(logits - lse[:, None]) - Y) / n
    return f, resid.T @ X + lam * W, resid.sum(axis=0)


def _descend(X, Y, lam, W, b, max_iter, tol):
    """Full-batch gradient descent with Barzilai-Borwein trial steps and
    Armijo backtracking; the objective never increases.

    The weight gradient is scaled by ``1 / (1 + lam)`` (a diagonal
    preconditioner): with a large penalty the weight block is far stiffer
    than the unpenalised bias, and a shared step would stall the bias.
    """
    scale = 1.0 / (1.0 + lam)
    f, gW, gb = probe_objective(W, b, X, Y, lam)
    history = [f]
    step = 1.0
    prev = None
    for it in range(1, max_iter + 1):
        dirW, dirb = scale * gW, gb
        decrease = float(np.sum(gW * dirW) + np.sum(gb * dirb))
        if decrease == 0.0:
            break
        if prev is not None:
            dW, db, dgW, dgb = W - prev[0], b - prev[1], gW - prev[2], gb - prev[3]
            sy = float(np.sum(dW * dgW) + np.sum(db * dgb))
            # BB step in the preconditioned metric
            ss = float(np.sum(dW * dW) / scale + np.sum(db * db))
            if sy > 0:
                step = ss / sy
        while True:
            W_new, b_new = W - step * dirW, b - step * dirb
            f_new, gW_new, gb_new = probe_objective(W_new, b_new, X, Y, lam)
            if f_new <= f - 1e-4 * step * decrease or step < 1e-20:
                break
            step *= 0.5
        if not np.isfinite(f_new):
            raise NonFiniteError("probe objective became non-finite")
        if f_new > f:
            break
        prev = (W, b, gW, gb)
        rel = abs(f - f_new) / max(abs(f), 1e-12)
        W, b, f, gW, gb = W_new, b_new, f_new, gW_new, gb_new
        history.append(f)
        if rel < tol:
            break
    return W, b, history


def _stratified_folds(y, n_splits, rng):
    fold = np.empty(len(y), dtype=int)
    offset = 0
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        fold[idx] = (np.arange(len(idx)) + offset) % n_splits
        offset += len(idx)
    return fold


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Multinomial logistic probe on frozen embeddings.

    Features are standardised with training statistics. With more than one
    entry in ``lambdas`` the penalty is picked by stratified internal
    cross-validation (held-out log-loss) on the training data alone.
    """

    def __init__(self, lambdas=DEFAULT_LAMBDAS, seed=0, max_iter=5000, tol=1e-7, cv_folds=5, standardize=True):
        self.lambdas = lambdas
        self.seed = seed
        self.max_iter = max_iter
        self.tol = tol
        self.cv_folds = cv_folds
        self.standardize = standardize

    def _fit_one(self, X, y_idx, k, lam, rng):
        Y = np.eye(k)[y_idx]
        W0 = rng.normal(scale=0.01, size=(k, X.shape[1]))
        return _descend(X, Y, lam, W0, np.zeros(k), self.max_iter, self.tol)

    def _select_lambda(self, X, y_idx, k):
        lambdas = [float(v) for v in np.atleast_1d(self.lambdas)]
        if not lambdas:
            raise ValidationError("lambdas must be non-empty")
        if len(lambdas) == 1:
            return lambdas[0], {}
        n_splits = min(self.cv_folds, int(np.bincount(y_idx, minlength=k).min()))
        if n_splits < 2:
            return lambdas[len(lambdas) // 2], {}
        rng = np.random.default_rng(self.seed)
        folds = _stratified_folds(y_idx, n_splits, rng)
        losses = {}
        for lam in lambdas:
            total = 0.0
            for f in range(n_splits):
                tr, va = folds != f, folds == f
                scaler = make_scaler(self.standardize).fit(X[tr])
                W, b, _ = self._fit_one(scaler.transform(X[tr]), y_idx[tr], k, lam, np.random.default_rng(self.seed))
                logits = scaler.transform(X[va]) @ W.T + b
                total += float(np.sum(logsumexp(logits, axis=1) - logits[np.arange(va.sum()), y_idx[va]]))
            losses[lam] = total / len(y_idx)
        best = min(lambdas, key=lambda lam: losses[lam])
        return best, losses

    def fit(self, X, y):
        X = check_features(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValidationError("X and y differ in length")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        k = len(self.classes_)
        if k < 2:
            raise SingleClassError("linear probe needs at least two classes")
        self.n_features_in_ = X.shape[1]
        self.lambda_, self.cv_losses_ = self._select_lambda(X, y_idx, k)
        self.scaler_ = make_scaler(self.standardize).fit(X)
        Xs = self.scaler_.transform(X)
        W, b, history = self._fit_one(Xs, y_idx, k, self.lambda_, np.random.default_rng(self.seed))
        if not (np.isfinite(W).all() and np.isfinite(b).all()):
            raise NonFiniteError("probe parameters are not finite")
        self.coef_, self.intercept_ = W, b
        self.train_log_ = history
        self.n_iter_ = len(history) - 1
        self.objective_ = history[-1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        return self.scaler_.transform(X) @ self.coef_.T + self.intercept_

    def predict_proba(self, X):
        logits = self.decision_function(X)
        return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


def train_linear_probe(X, y, lambda_grid=DEFAULT_LAMBDAS, seed=0, **kwargs) -> LinearProbe:
    return LinearProbe(lambdas=tuple(lambda_grid), seed=seed, **kwargs).fit(X, y)
