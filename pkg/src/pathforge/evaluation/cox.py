"""Cox proportional-hazards regression (Breslow ties) by damped Newton."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ..errors import DivergenceError, NoEventsError, ValidationError
from .metrics import metric_c_index
from .preprocessing import check_features, make_scaler

BETA_LIMIT = 50.0


def _risk_groups(time, event):
    """For each distinct event time: (indices of events there, risk-set indices)."""
    groups = []
    for t in np.unique(time[event]):
        groups.append((np.flatnonzero(event & (time == t)), np.flatnonzero(time >= t)))
    return groups


def cox_partial_loglik(beta, X, time, event, ridge=0.0, groups=None):
    """Penalised Breslow partial log-likelihood with gradient and Hessian.

    Terms are written relative to each event's own linear predictor, so the
    gradient stays accurate when risk-set weights become extremely skewed.
    """
    X = np.asarray(X, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=bool)
    groups = _risk_groups(time, event) if groups is None else groups
    eta = X @ beta
    d = X.shape[1]
    ll = 0.0
    grad = np.zeros(d)
    hess = np.zeros((d, d))
    for dead, at_risk in groups:
        e = eta[at_risk]
        m = e.max()
        w = np.exp(e - m)
        p = w / w.sum()
        xr = X[at_risk]
        for i in dead:
            rel = e - eta[i]
            top = int(np.argmax(rel))
            rest = np.exp(rel - rel[top])
            rest[top] = 0.0
            ll -= rel[top] + np.log1p(rest.sum())
            grad += p @ (X[i] - xr)
        centred = xr - p @ xr
        hess -= len(dead) * (centred.T * p) @ centred
    ll -= 0.5 * ridge * float(beta @ beta)
    grad -= ridge * beta
    hess -= ridge * np.eye(d)
    return ll, grad, hess


@dataclass
class CoxResult:
    beta: np.ndarray
    converged: bool
    n_iter: int
    grad_norm: float
    loglik: float


def cox_fit(X, time, event, ridge=1e-4, tol=1e-6, max_iter=500) -> CoxResult:
    """Maximise the penalised partial likelihood; ``X`` is used as given.

    Converged when ``||grad||_inf < tol`` and the Newton step has collapsed.
    Raises ``DivergenceError`` when coefficients run past 50 without
    converging, the signature of a monotone likelihood (separated data).
    """
    X = check_features(X)
    time = np.asarray(time, dtype=np.float64)
    event = np.asarray(event, dtype=bool)
    if not (len(X) == len(time) == len(event)):
        raise ValidationError("X, time and event differ in length")
    if ridge < 0:
        raise ValidationError("ridge must be >= 0")
    if not event.any():
        raise NoEventsError("Cox regression needs at least one event")
    groups = _risk_groups(time, event)
    beta = np.zeros(X.shape[1])
    ll, grad, hess = cox_partial_loglik(beta, X, time, event, ridge, groups)
    for it in range(1, max_iter + 1):
        try:
            delta = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            delta = np.linalg.lstsq(-hess, grad, rcond=None)[0]
        g_inf = float(np.abs(grad).max()) if grad.size else 0.0
        if g_inf < tol and float(np.abs(delta).max(initial=0.0)) < max(tol, 1e-8 * (1 + np.abs(beta).max(initial=0))):
            return CoxResult(beta, True, it - 1, g_inf, ll)
        step = 1.0
        while True:
            cand = beta + step * delta
            ll_c, grad_c, hess_c = cox_partial_loglik(cand, X, time, event, ridge, groups)
            if ll_c >= ll - 1e-12 * (1 + abs(ll)) or step < 1e-10:
                break
            step *= 0.5
        beta, ll, grad, hess = cand, ll_c, grad_c, hess_c
        if np.abs(beta).max(initial=0.0) > BETA_LIMIT:
            raise DivergenceError(
                f"coefficients exceeded {BETA_LIMIT:g} with gradient {np.abs(grad).max():.3g}; "
                "the likelihood is monotone (perfectly separated data?)"
            )
    g_inf = float(np.abs(grad).max()) if grad.size else 0.0
    return CoxResult(beta, g_inf < tol, max_iter, g_inf, ll)


def as_survival(y):
    """Split a survival target into ``(time, event)``.

    Accepts an ``(n, 2)`` array of ``[time, event]`` or a structured array with
    ``time`` and ``event`` fields.
    """
    y = np.asarray(y)
    if y.dtype.names:
        return y["time"].astype(np.float64), y["event"].astype(bool)
    if y.ndim != 2 or y.shape[1] != 2:
        raise ValidationError("survival target must be (n, 2) [time, event]")
    return y[:, 0].astype(np.float64), y[:, 1].astype(bool)


def survival_target(time, event) -> np.ndarray:
    return np.column_stack([np.asarray(time, dtype=np.float64), np.asarray(event, dtype=np.float64)])


class CoxPH(BaseEstimator):
    """sklearn-style Cox model; ``y`` is ``[time, event]`` per row.

    ``predict`` returns the linear risk score, ``score`` the C-index.
    """

    def __init__(self, ridge=1e-4, tol=1e-6, max_iter=500, standardize=True):
        self.ridge = ridge
        self.tol = tol
        self.max_iter = max_iter
        self.standardize = standardize

    def fit(self, X, y):
        X = check_features(X)
        time, event = as_survival(y)
        self.n_features_in_ = X.shape[1]
        self.scaler_ = make_scaler(self.standardize).fit(X)
        res = cox_fit(self.scaler_.transform(X), time, event, self.ridge, self.tol, self.max_iter)
        self.coef_ = res.beta
        self.converged_ = res.converged
        self.n_iter_ = res.n_iter
        self.grad_norm_ = res.grad_norm
        self.loglik_ = res.loglik
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        return self.scaler_.transform(X) @ self.coef_

    def score(self, X, y):
        time, event = as_survival(y)
        return metric_c_index(self.predict(X), time, event)
