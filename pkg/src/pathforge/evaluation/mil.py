"""Attention-based multiple-instance learning on frozen patch features.

Per bag ``H`` (patches x dim)::

    a = softmax(tanh(H V^T) w)      attention over patches
    z = a^T H                       bag embedding
    logits = Wc z + bc

Gradients are derived by hand; :func:`mil_loss_and_grads` is exposed so they
can be checked against finite differences.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp, softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ..errors import EmptyBagError, NonFiniteError, SingleClassError, ValidationError
from .preprocessing import FoldStandardizer, IdentityScaler, check_features

PARAM_NAMES = ("V", "w", "Wc", "bc")


def init_params(dim: int, d_att: int, k: int, rng: np.random.Generator) -> dict:
    return {
        "V": rng.normal(scale=1.0 / np.sqrt(dim), size=(d_att, dim)),
        "w": rng.normal(scale=1.0 / np.sqrt(d_att), size=d_att),
        "Wc": rng.normal(scale=0.01, size=(k, dim)),
        "bc": np.zeros(k),
    }


def attention(params: dict, H: np.ndarray) -> np.ndarray:
    return softmax(np.tanh(H @ params["V"].T) @ params["w"])


def forward(params: dict, H: np.ndarray):
    """Return ``(logits, attention, bag_embedding)`` for one bag."""
    a = attention(params, H)
    z = a @ H
    return params["Wc"] @ z + params["bc"], a, z


def mil_loss_and_grads(params: dict, bags, y) -> tuple[float, dict, float]:
    """Mean cross-entropy over ``bags`` and gradients for every parameter.

    The third value is the largest deviation of any bag's attention sum from 1.
    """
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    V, w, Wc = params["V"], params["w"], params["Wc"]
    loss = 0.0
    att_err = 0.0
    n = len(bags)
    for H, label in zip(bags, y):
        U = np.tanh(H @ V.T)
        a = softmax(U @ w)
        att_err = max(att_err, abs(float(a.sum()) - 1.0))
        z = a @ H
        logits = Wc @ z + params["bc"]
        lse = logsumexp(logits)
        loss += float(lse - logits[label])
        dlogits = np.exp(logits - lse)
        dlogits[label] -= 1.0
        dlogits /= n
        grads["Wc"] += np.outer(dlogits, z)
        grads["bc"] += dlogits
        da = H @ (Wc.T @ dlogits)
        ds = a * (da - a @ da)
        grads["w"] += U.T @ ds
        dpre = np.outer(ds, w) * (1.0 - U * U)
        grads["V"] += dpre.T @ H
    return loss / n, grads, att_err


class AttentionMIL(ClassifierMixin, BaseEstimator):
    """Attention-MIL head trained with seeded mini-batch Adam over bags.

    ``fit`` takes a list of ``(n_i, dim)`` arrays. Instance features are
    standardised with statistics pooled over all training patches.
    """

    def __init__(self, d_att=32, lr=1e-2, epochs=40, batch_size=8, seed=0, weight_decay=0.0, standardize=True):
        self.d_att = d_att
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.weight_decay = weight_decay
        self.standardize = standardize

    def _check_bags(self, bags):
        out = []
        for i, b in enumerate(bags):
            b = check_features(b, f"bag {i}") if len(np.asarray(b)) else np.zeros((0, 0))
            if len(b) == 0:
                raise EmptyBagError(f"bag {i} has no patches")
            out.append(b)
        dims = {b.shape[1] for b in out}
        if len(dims) != 1:
            raise ValidationError(f"bags have differing feature dims {sorted(dims)}")
        return out

    def fit(self, bags, y):
        bags = self._check_bags(bags)
        y = np.asarray(y)
        if len(y) != len(bags):
            raise ValidationError("bags and y differ in length")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        k = len(self.classes_)
        if k < 2:
            raise SingleClassError("MIL needs at least two classes")
        self.scaler_ = (FoldStandardizer() if self.standardize else IdentityScaler()).fit(np.vstack(bags))
        bags = [self.scaler_.transform(b) for b in bags]
        dim = bags[0].shape[1]
        self.n_features_in_ = dim
        rng = np.random.default_rng(self.seed)
        params = init_params(dim, self.d_att, k, rng)
        m = {p: np.zeros_like(v) for p, v in params.items()}
        v = {p: np.zeros_like(val) for p, val in params.items()}
        beta1, beta2, eps = 0.9, 0.999, 1e-8
        step = 0
        losses, att_errors = [], []
        for _ in range(self.epochs):
            order = rng.permutation(len(bags))
            epoch_loss = 0.0
            for start in range(0, len(order), self.batch_size):
                idx = order[start : start + self.batch_size]
                loss, grads, att_err = mil_loss_and_grads(params, [bags[i] for i in idx], y_idx[idx])
                if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                    raise NonFiniteError(f"MIL training diverged at step {step} (learning rate {self.lr} too high?)")
                att_errors.append(att_err)
                epoch_loss += loss * len(idx)
                step += 1
                for p in PARAM_NAMES:
                    g = grads[p] + self.weight_decay * params[p]
                    m[p] = beta1 * m[p] + (1 - beta1) * g
                    v[p] = beta2 * v[p] + (1 - beta2) * g * g
                    mhat = m[p] / (1 - beta1**step)
                    vhat = v[p] / (1 - beta2**step)
                    params[p] = params[p] - self.lr * mhat / (np.sqrt(vhat) + eps)
            losses.append(epoch_loss / len(bags))
        self.params_ = params
        self.loss_curve_ = losses
        self.max_attention_error_ = max(att_errors) if att_errors else 0.0
        return self

    def _transform_bags(self, bags):
        check_is_fitted(self, "params_")
        return [self.scaler_.transform(b) for b in self._check_bags(bags)]

    def decision_function(self, bags):
        return np.array([forward(self.params_, H)[0] for H in self._transform_bags(bags)])

    def predict_proba(self, bags):
        return softmax(self.decision_function(bags), axis=1)

    def predict(self, bags):
        return self.classes_[np.argmax(self.decision_function(bags), axis=1)]

    def attention(self, bag) -> np.ndarray:
        (H,) = self._transform_bags([bag])
        return attention(self.params_, H)


def finetune_mil(bags, y, d_att=32, lr=1e-2, epochs=40, seed=0, **kwargs) -> AttentionMIL:
    return AttentionMIL(d_att=d_att, lr=lr, epochs=epochs, seed=seed, **kwargs).fit(bags, y)
