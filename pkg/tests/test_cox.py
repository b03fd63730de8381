import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import breslow_loglik, central_difference, max_rel_error
from pathforge.errors import DivergenceError, NoEventsError
from pathforge.evaluation.cox import CoxPH, cox_fit, cox_partial_loglik, survival_target


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 1e-4, 0.3]))
def test_gradient_and_hessian_vs_finite_differences(seed, ridge):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(15, 3))
    time = rng.integers(1, 6, 15).astype(float)  # tied times exercise Breslow
    event = rng.random(15) < 0.7
    event[0] = True
    beta = rng.normal(size=3) * 0.5
    _, grad, hess = cox_partial_loglik(beta, X, time, event, ridge)
    num_g = central_difference(lambda b: cox_partial_loglik(b, X, time, event, ridge)[0], beta)
    num_h = np.vstack(
        [central_difference(lambda b: cox_partial_loglik(b, X, time, event, ridge)[1][j], beta) for j in range(3)]
    )
    assert max_rel_error(grad, num_g) < 1e-4
    assert max_rel_error(hess, num_h) < 1e-4


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-2, 2))
def test_loglik_matches_direct_sum(seed, beta):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=10)
    time = rng.integers(1, 5, 10).astype(float)
    event = rng.random(10) < 0.6
    event[0] = True
    got = cox_partial_loglik(np.array([beta]), x[:, None], time, event)[0]
    assert got == pytest.approx(breslow_loglik(beta, x, time, event), rel=1e-10, abs=1e-10)


def test_constant_covariate_gives_zero():
    res = cox_fit(np.ones((6, 1)), [1, 2, 3, 4, 5, 6], [1, 1, 0, 1, 1, 0])
    assert res.converged and abs(res.beta[0]) < 1e-8


def test_two_subject_divergence():
    with pytest.raises(DivergenceError):
        cox_fit(np.array([[1.0], [-1.0]]), [1, 2], [1, 1], ridge=0.0)


def test_five_subject_grid_search():
    x = np.array([0.5, 1.2, 2.0, 0.1, -0.4])
    time = np.array([2.0, 5.0, 1.0, 3.0, 4.0])
    event = np.array([1, 0, 1, 1, 0], dtype=bool)
    grid = np.round(np.arange(-50000, 50001) * 1e-4, 4)
    ll = [breslow_loglik(b, x, time, event) for b in grid[::100]]
    # coarse pass, then the full 1e-4 grid around the coarse maximum
    centre = grid[::100][int(np.argmax(ll))]
    fine = grid[(grid >= centre - 0.02) & (grid <= centre + 0.02)]
    best = fine[int(np.argmax([breslow_loglik(b, x, time, event) for b in fine]))]
    res = cox_fit(x[:, None], time, event, ridge=0.0)
    assert res.converged
    assert abs(res.beta[0] - best) < 1e-3


def test_no_events():
    with pytest.raises(NoEventsError):
        cox_fit(np.ones((3, 1)), [1, 2, 3], [0, 0, 0])


def test_estimator_recovers_signal(rng):
    n = 300
    X = rng.normal(size=(n, 3))
    hazard = np.exp(1.2 * X[:, 0] - 0.6 * X[:, 1])
    t = rng.exponential(1 / hazard)
    c = rng.exponential(2.0, n)
    model = CoxPH().fit(X, survival_target(np.minimum(t, c), t <= c))
    assert model.converged_
    assert model.coef_[0] > 0.8 and model.coef_[1] < -0.3 and abs(model.coef_[2]) < 0.25
    assert model.score(X, survival_target(np.minimum(t, c), t <= c)) > 0.7
