import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, max_rel_error
from pathforge.errors import SingleClassError
from pathforge.evaluation.probe import LinearProbe, probe_objective, train_linear_probe


def blobs(rng, n=60, dim=5, gap=6.0, k=2):
    centres = rng.normal(size=(k, dim)) * gap
    y = np.arange(n) % k
    return centres[y] + rng.normal(size=(n, dim)), y


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 4), st.sampled_from([0.0, 1e-3, 0.5]))
def test_gradient_matches_finite_differences(seed, k, lam):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(12, 4))
    Y = np.eye(k)[rng.integers(0, k, 12)]
    W, b = rng.normal(size=(k, 4)), rng.normal(size=k)
    _, gW, gb = probe_objective(W, b, X, Y, lam)
    nW = central_difference(lambda w: probe_objective(w, b, X, Y, lam)[0], W)
    nb = central_difference(lambda v: probe_objective(W, v, X, Y, lam)[0], b)
    assert max_rel_error(np.r_[gW.ravel(), gb], np.r_[nW.ravel(), nb]) < 1e-5


def test_separable_blobs(rng):
    X, y = blobs(rng)
    probe = train_linear_probe(X, y, [1e-4])
    assert (probe.predict(X) == y).mean() == 1.0
    assert np.allclose(probe.predict_proba(X).sum(axis=1), 1.0)


def test_huge_penalty_collapses(rng):
    X, y = blobs(rng, n=61)
    probe = train_linear_probe(X, y, [1e6])
    assert np.linalg.norm(probe.coef_) < 1e-3
    majority = np.bincount(y).argmax()
    assert (probe.predict(X) == majority).all()


def test_objective_monotone_and_converged(rng):
    X, y = blobs(rng, gap=1.0, k=3)
    probe = train_linear_probe(X, y, [1e-2])
    log = np.array(probe.train_log_)
    assert (np.diff(log) <= 1e-15).all()
    assert probe.n_iter_ < 5000


def test_seed_independent_optimum(rng):
    X, y = blobs(rng, gap=1.0, k=3)
    a = train_linear_probe(X, y, [1e-2], seed=0)
    b = train_linear_probe(X, y, [1e-2], seed=99)
    assert abs(a.objective_ - b.objective_) / abs(a.objective_) < 1e-5


def test_lambda_selection_is_deterministic(rng):
    X, y = blobs(rng, gap=0.8)
    a = LinearProbe(seed=3).fit(X, y)
    b = LinearProbe(seed=3).fit(X, y)
    assert a.lambda_ == b.lambda_ and np.array_equal(a.coef_, b.coef_)
    assert set(a.cv_losses_) == set(LinearProbe().lambdas)


def test_string_labels_and_errors(rng):
    X, y = blobs(rng)
    labels = np.array(["neg", "pos"])[y]
    probe = LinearProbe(lambdas=[1e-3]).fit(X, labels)
    assert set(probe.predict(X)) <= {"neg", "pos"}
    with pytest.raises(SingleClassError):
        LinearProbe().fit(X, np.zeros(len(X)))


def test_constant_feature_dropped(rng):
    X, y = blobs(rng)
    X = np.c_[X, np.full(len(X), 4.2)]
    probe = LinearProbe(lambdas=[1e-3]).fit(X, y)
    assert np.isfinite(probe.coef_).all()
    assert (probe.predict(X) == y).all()
