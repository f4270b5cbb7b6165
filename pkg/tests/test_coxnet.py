import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import direct_nlpl, newton_cox

from survfuse.coxnet import (CoxnetConfig, CoxnetModel, _standardize, breslow_baseline, fit_path, kkt_violation,
                             lambda_max, neg_log_partial_likelihood, pl_gradient, predict_risk, select_lambda,
                             soft_threshold)
from survfuse.exceptions import AlphaZero, DimensionMismatch, EmptyPath, NoEvents
from survfuse.survival import SurvivalDataset, concordance_index


def ds(events, times):
    return SurvivalDataset(np.array(events, bool), np.array(times, float))


def instance(seed, n=40, d=3, censor=0.3, scale=0.8):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    beta = rng.uniform(-scale, scale, d)
    t = rng.exponential(1.0 / np.exp(X @ beta)) + 1e-9
    return X, SurvivalDataset(rng.random(n) > censor, t)


def fd_gradient(f, beta, h=1e-5):
    g = np.zeros_like(beta)
    for j in range(beta.size):
        e = np.zeros_like(beta)
        e[j] = h
        g[j] = (f(beta + e) - f(beta - e)) / (2 * h)
    return g


# ------------------------------------------------------------------ likelihood


def test_nlpl_zero_beta_all_events():
    val = neg_log_partial_likelihood([0.0], np.zeros((3, 1)), ds([1, 1, 1], [1, 2, 3]))
    assert val == pytest.approx(math.log(6), abs=1e-14)


def test_nlpl_zero_beta_one_event():
    assert neg_log_partial_likelihood([0.0], np.ones((2, 1)), ds([1, 0], [1, 5])) == pytest.approx(math.log(2))


def test_nlpl_matches_direct_evaluation():
    X = np.array([[1.0], [-1.0]])
    d = ds([1, 1], [1, 2])
    expected = direct_nlpl([0.5], X, d.event, d.time)
    assert expected == pytest.approx(-(0.5 - math.log(math.exp(0.5) + math.exp(-0.5))), abs=1e-14)
    assert neg_log_partial_likelihood([0.5], X, d) == pytest.approx(expected, abs=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_nlpl_matches_direct_with_ties(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((25, 4))
    e = rng.random(25) < 0.6
    e[0] = True
    t = rng.integers(1, 6, 25).astype(float)  # heavy ties
    beta = rng.normal(size=4)
    assert neg_log_partial_likelihood(beta, X, SurvivalDataset(e, t)) == pytest.approx(
        direct_nlpl(beta, X, e, t), rel=1e-12)


def test_nlpl_errors():
    with pytest.raises(NoEvents):
        neg_log_partial_likelihood([0.0], np.ones((2, 1)), ds([0, 0], [1, 2]))
    with pytest.raises(DimensionMismatch):
        neg_log_partial_likelihood([0.0, 1.0], np.ones((2, 1)), ds([1, 0], [1, 2]))
    with pytest.raises(DimensionMismatch):
        neg_log_partial_likelihood([0.0], np.ones((3, 1)), ds([1, 0], [1, 2]))


# ------------------------------------------------------------------ gradient


def test_gradient_symmetric_instance():
    X = np.array([[1.0], [-1.0]])
    d = ds([1, 1], [1, 2])
    num = fd_gradient(lambda b: neg_log_partial_likelihood(b, X, d), np.zeros(1))
    assert pl_gradient([0.0], X, d) == pytest.approx(num, abs=1e-8)


def test_gradient_vanishes_at_unpenalized_optimum():
    X, d = instance(3, n=50, d=2)
    beta = newton_cox(X, d.event, d.time)
    assert np.linalg.norm(pl_gradient(beta, X, d)) <= 1e-8


def test_gradient_duplicated_columns_equal():
    X, d = instance(4, d=2)
    X = np.column_stack([X, X[:, 0]])
    g = pl_gradient(np.array([0.3, -0.2, 0.1]), X, d)
    assert g[0] == pytest.approx(g[2], abs=1e-13)


@settings(max_examples=40)
@given(st.integers(0, 10_000))
def test_gradient_matches_finite_differences(seed):
    X, d = instance(seed, n=20, d=3)
    if d.n_events == 0:
        return
    beta = np.random.default_rng(seed).normal(size=3)
    num = fd_gradient(lambda b: neg_log_partial_likelihood(b, X, d), beta)
    ana = pl_gradient(beta, X, d)
    assert np.max(np.abs(ana - num) / np.maximum(1e-8, np.abs(ana) + np.abs(num))) <= 1e-6


# ------------------------------------------------------------------ soft threshold / lambda max


@pytest.mark.parametrize("z, g, expected", [(3, 1, 2), (-3, 1, -2), (0.5, 1, 0), (-0.5, 1, 0), (2, 0, 2)])
def test_soft_threshold(z, g, expected):
    assert soft_threshold(z, g) == expected


def test_soft_threshold_negative_gamma():
    with pytest.raises(ValueError):
        soft_threshold(1.0, -0.1)


def test_lambda_max_ignores_zero_column():
    X, d = instance(5, d=2)
    Xz = np.column_stack([X, np.zeros(len(d))])
    assert lambda_max(Xz, d, 1.0) == lambda_max(X, d, 1.0)


def test_lambda_max_one_dimensional():
    X, d = instance(6, d=1)
    expected = abs(fd_gradient(lambda b: direct_nlpl(b, X, d.event, d.time), np.zeros(1))[0]) / (len(d) * 0.5)
    assert lambda_max(X, d, 0.5) == pytest.approx(expected, rel=1e-8)


def test_lambda_max_alpha_zero():
    X, d = instance(7)
    with pytest.raises(AlphaZero):
        lambda_max(X, d, 0.0)


# ------------------------------------------------------------------ path fitting


def test_path_starts_at_zero_and_is_geometric():
    X, d = instance(8, n=60, d=5)
    path = fit_path(X, d, CoxnetConfig(alpha=1.0, n_lambdas=20))
    assert len(path) == 20
    assert np.all(path[0].beta == 0)
    lams = np.array([m.lam for m in path])
    np.testing.assert_allclose(lams[1:] / lams[:-1], (1e-4) ** (1 / 19), rtol=1e-12)


def test_path_min_ratio_when_wide():
    X, d = instance(9, n=20, d=30)
    lams = [m.lam for m in fit_path(X, d, CoxnetConfig(n_lambdas=10))]
    assert lams[-1] / lams[0] == pytest.approx(0.01)


def test_tiny_lambda_matches_newton_small_instance():
    X, d = instance(10, n=30, d=2)
    Z, *_ = _standardize(X)
    lmax = lambda_max(Z, d, 1.0)
    path = fit_path(X, d, CoxnetConfig(alpha=1.0, lambdas=tuple(lmax * np.geomspace(1, 1e-9, 30))))
    np.testing.assert_allclose(path[-1].beta, newton_cox(Z, d.event, d.time), atol=1e-4, rtol=0)


def test_ridge_duplicate_columns_share_weight():
    X, d = instance(11, n=50, d=2)
    X = np.column_stack([X, X[:, 0]])
    model = fit_path(X, d, CoxnetConfig(alpha=0.0, lambdas=(0.1, 0.01)))[-1]
    assert model.converged
    assert model.beta[0] == pytest.approx(model.beta[2], abs=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_path_kkt_and_sparsity_monotone(seed):
    X, d = instance(100 + seed, n=50, d=15, scale=0.5)
    Z, *_ = _standardize(X)
    path = fit_path(X, d, CoxnetConfig(alpha=1.0, n_lambdas=30))
    nnz = [np.count_nonzero(m.beta) for m in path]
    for m in path:
        if m.converged:
            assert kkt_violation(m.beta, Z, d, m.lam, m.alpha) <= 1e-6
    # the support may wobble near ties; it must grow overall and stay mostly monotone
    drops = sum(b < a for a, b in zip(nnz, nnz[1:]))
    assert drops <= 2 and nnz[-1] >= nnz[0]


def test_zero_variance_column_dropped():
    X, d = instance(12, n=40, d=3)
    X[:, 1] = 4.2
    for m in fit_path(X, d, CoxnetConfig(n_lambdas=10)):
        assert m.beta[1] == 0.0
        assert np.all(np.isfinite(m.beta))


def test_fit_path_errors():
    X, _ = instance(13)
    with pytest.raises(NoEvents):
        fit_path(X, SurvivalDataset(np.zeros(len(X), bool), np.arange(1.0, len(X) + 1)))
    with pytest.raises(ValueError):
        CoxnetConfig(alpha=1.5)
    with pytest.raises(EmptyPath):
        fit_path(X, instance(13)[1], CoxnetConfig(lambdas=()))


def test_fit_is_deterministic():
    X, d = instance(14, n=50, d=8)
    a = fit_path(X, d, CoxnetConfig(n_lambdas=15))
    b = fit_path(X, d, CoxnetConfig(n_lambdas=15))
    assert all(np.array_equal(m.beta, k.beta) for m, k in zip(a, b))


# ------------------------------------------------------------------ selection / prediction


def _model(beta, lam=1.0):
    beta = np.asarray(beta, float)
    return CoxnetModel(beta, lam, 1.0, True, 1, np.zeros(beta.size), np.ones(beta.size))


def test_select_lambda_cases():
    X = np.array([[3.0], [2.0], [1.0]])
    d = ds([1, 1, 1], [1, 2, 3])
    good, bad = _model([1.0], 0.5), _model([-1.0], 0.2)
    assert select_lambda([bad], X, d) is bad
    assert select_lambda([bad, good], X, d) is good
    tie_small, tie_large = _model([1.0], 0.1), _model([2.0], 0.3)
    assert select_lambda([tie_small, tie_large], X, d) is tie_large
    with pytest.raises(EmptyPath):
        select_lambda([], X, d)


def test_predict_risk():
    rng = np.random.default_rng(15)
    X = rng.normal(size=(10, 4))
    assert np.all(predict_risk(_model(np.zeros(4)), X) == 0)
    np.testing.assert_array_equal(predict_risk(_model([1, 0, 0, 0]), X), X[:, 0])
    beta = rng.normal(size=4)
    center, scale = rng.normal(size=4), rng.uniform(0.5, 2, 4)
    m = CoxnetModel(beta, 1.0, 1.0, True, 1, center, scale)
    expected = [sum((X[i, j] - center[j]) / scale[j] * beta[j] for j in range(4)) for i in range(10)]
    np.testing.assert_allclose(predict_risk(m, X), expected, rtol=1e-13)
    with pytest.raises(DimensionMismatch):
        predict_risk(m, X[:, :3])


def test_prediction_order_invariant_to_positive_rescaling():
    X, d = instance(16, n=50, d=4)
    m = fit_path(X, d, CoxnetConfig(n_lambdas=20))[-1]
    scaled = CoxnetModel(m.beta * 3.7, m.lam, m.alpha, True, 1, m.center, m.scale)
    assert concordance_index(d, predict_risk(m, X)).c_index == concordance_index(d, predict_risk(scaled, X)).c_index


def test_model_dict_round_trip():
    X, d = instance(17)
    m = fit_path(X, d, CoxnetConfig(n_lambdas=5))[-1]
    back = CoxnetModel.from_dict(m.to_dict())
    assert np.array_equal(back.beta, m.beta) and back.lam == m.lam and np.array_equal(back.scale, m.scale)


# ------------------------------------------------------------------ Breslow baseline


def test_breslow_zero_beta():
    base = breslow_baseline(_model([0.0]), np.zeros((2, 1)), ds([1, 1], [1, 2]))
    assert base.times.tolist() == [1.0, 2.0]
    assert base.increments.tolist() == [0.5, 1.0]
    assert base(0.5) == 0.0 and base(1.5) == 0.5 and base(3) == 1.5


def test_breslow_no_step_at_censoring():
    base = breslow_baseline(_model([0.0]), np.zeros((3, 1)), ds([1, 0, 1], [1, 2, 3]))
    assert base.times.tolist() == [1.0, 3.0]
    assert base(2) == base(1)


def test_breslow_fitted_one_dimensional():
    X, d = instance(18, d=1)
    m = fit_path(X, d, CoxnetConfig(n_lambdas=10))[-1]
    eta = (X[:, 0] - m.center[0]) / m.scale[0] * m.beta[0]
    base = breslow_baseline(m, X, d)
    for t, inc in zip(base.times, base.increments):
        expected = sum(d.event[i] for i in range(len(d)) if d.time[i] == t) / sum(
            math.exp(eta[j]) for j in range(len(d)) if d.time[j] >= t)
        assert inc == pytest.approx(expected, rel=1e-12)
    assert np.all(np.diff(base.cumulative) >= 0)
