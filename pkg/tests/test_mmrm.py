import numpy as np
import pytest
import statsmodels.api as sm
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize, stats

from conftest import random_monotone
from pmmdirect.errors import InsufficientRetrievedDropouts, RankDeficient
from pmmdirect.mmrm import DesignSpec, fit_endpoint_regression, fit_mmrm, marginal_mean, uee_contributions


def _problem(seed, n=80, K=3, m=1, p_stay=0.85):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, m))
    L = np.tril(rng.normal(scale=0.4, size=(K, K))) + np.eye(K)
    B = rng.normal(size=(K, m + 1))
    Z = np.column_stack([np.ones(n), X])
    y = Z @ B.T + rng.normal(size=(n, K)) @ L.T
    R = random_monotone(rng, n, K, p_stay)
    return X, np.where(R, y, 0.0), R


def _observed_loglik(B, S, X, y, R):
    """Independent observed-data log-likelihood via scipy's MVN density."""
    Z = np.column_stack([np.ones(len(X)), X])
    total = 0.0
    for j in range(len(y)):
        o = R[j]
        if not o.any():
            continue
        mean = (Z[j] @ B.T)[o]
        total += stats.multivariate_normal.logpdf(y[j, o], mean, S[np.ix_(o, o)])
    return total


def test_complete_data_gls_equals_per_visit_ols():
    X, y, R = _problem(3, n=60, K=4, m=2)
    R[:] = True
    fit = fit_mmrm(X, y, R)
    Z = np.column_stack([np.ones(len(X)), X])
    ols = np.linalg.lstsq(Z, y, rcond=None)[0].T
    np.testing.assert_allclose(fit.coef, ols, rtol=0, atol=1e-10)
    resid = y - Z @ ols.T
    np.testing.assert_allclose(fit.sigma, resid.T @ resid / len(y), atol=1e-8)


def test_em_matches_direct_likelihood_maximisation():
    X, y, R = _problem(11, n=60, K=3, m=1)
    fit = fit_mmrm(X, y, R, tol=1e-12)
    K, p = 3, 2
    tril = np.tril_indices(K)

    def unpack(v):
        B = v[: K * p].reshape(K, p)
        L = np.zeros((K, K))
        L[tril] = v[K * p:]
        return B, L @ L.T

    def nll(v):
        B, S = unpack(v)
        return -_observed_loglik(B, S, X, y, R)

    v0 = np.concatenate([fit.coef.ravel() + 0.05, np.linalg.cholesky(fit.sigma * 1.1)[tril]])
    opt = optimize.minimize(nll, v0, method="BFGS", options=dict(gtol=1e-8, maxiter=5000))
    B_opt, S_opt = unpack(opt.x)
    assert fit.loglik >= -opt.fun - 1e-6
    np.testing.assert_allclose(fit.loglik, _observed_loglik(fit.coef, fit.sigma, X, y, R), rtol=1e-10)
    np.testing.assert_allclose(fit.coef, B_opt, atol=2e-4)
    np.testing.assert_allclose(fit.sigma, S_opt, atol=2e-4)


@pytest.mark.filterwarnings("ignore::pmmdirect.errors.NotConvergedWarning")
@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), K=st.integers(2, 5), p_stay=st.floats(0.6, 0.95))
def test_em_loglik_is_monotone(seed, K, p_stay):
    X, y, R = _problem(seed, n=70, K=K, p_stay=p_stay)
    fit = fit_mmrm(X, y, R)
    trace = fit.loglik_trace
    assert np.all(np.diff(trace) >= -1e-8 * np.maximum(1.0, np.abs(trace[1:])))


def test_score_vanishes_at_estimate():
    X, y, R = _problem(5)
    fit = fit_mmrm(X, y, R)
    u = uee_contributions(fit, X, y, R)
    scale = np.abs(u.psi).sum(axis=0)
    assert np.all(np.abs(u.psi.sum(axis=0)) <= 1e-9 * np.maximum(scale, 1.0))


def test_uee_jacobian_matches_finite_differences():
    X, y, R = _problem(8)
    fit = fit_mmrm(X, y, R)
    u = uee_contributions(fit, X, y, R, per_subject_jacobian=True)
    np.testing.assert_allclose(u.jacobian.sum(axis=0), u.bread, rtol=1e-12, atol=1e-12)
    beta = fit.beta
    num = np.zeros_like(u.bread)
    for a in range(len(beta)):
        h = 1e-6 * (1 + abs(beta[a]))
        up = uee_contributions(fit, X, y, R, beta=beta + h * np.eye(len(beta))[a]).psi.sum(axis=0)
        dn = uee_contributions(fit, X, y, R, beta=beta - h * np.eye(len(beta))[a]).psi.sum(axis=0)
        num[:, a] = (up - dn) / (2 * h)
    rel = np.abs(num - u.bread) / np.maximum(np.abs(u.bread), 1e-8)
    assert rel.max() < 1e-4


def test_subjects_without_observations_are_dropped():
    X, y, R = _problem(9)
    R[:4] = False
    fit = fit_mmrm(X, y, R)
    assert fit.n_used == len(y) - 4
    assert set(fit.index) == set(range(4, len(y)))


def test_rank_deficient_visit():
    X, y, R = _problem(10, K=3)
    R[:, 2] = False
    R[0, 2] = True
    with pytest.raises(RankDeficient):
        fit_mmrm(X, y, R)


def test_reml_scales_covariance():
    X, y, R = _problem(12)
    ml = fit_mmrm(X, y, R)
    reml = fit_mmrm(X, y, R, reml=True)
    np.testing.assert_allclose(reml.sigma, ml.sigma * ml.n_used / (ml.n_used - 2))


def test_warm_start_reaches_same_optimum():
    X, y, R = _problem(13)
    cold = fit_mmrm(X, y, R, tol=1e-12)
    warm = fit_mmrm(X, y, R, tol=1e-12, start=(cold.coef, cold.sigma))
    np.testing.assert_allclose(warm.beta, cold.beta, atol=1e-7)
    assert warm.iterations <= cold.iterations


def test_design_spec_selects_covariates():
    X, y, R = _problem(14, m=3)
    fit = fit_mmrm(X, y, R, DesignSpec(covariates=(0,)))
    assert fit.coef.shape == (3, 2)


def test_marginal_mean():
    X, y, R = _problem(15, m=2)
    fit = fit_mmrm(X, y, R)
    nu = np.array([0.3, -0.2])
    assert marginal_mean(fit, 2, nu) == pytest.approx(fit.coef[1] @ np.r_[1, nu])
    with pytest.raises(ValueError):
        marginal_mean(fit, 0, nu)


def test_fit_serialises():
    X, y, R = _problem(16)
    d = fit_mmrm(X, y, R).to_dict()
    assert len(d["sigma"]) == 9 and len(d["beta"]) == 6


def test_endpoint_regression_matches_ols_with_hc0():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(12, 1))
    yK = 1 + 2 * X[:, 0] + rng.normal(size=12)
    fit = fit_endpoint_regression(X, yK)
    ref = sm.OLS(yK, sm.add_constant(X)).fit(cov_type="HC0")
    np.testing.assert_allclose(fit.beta_minus, ref.params, rtol=1e-12)
    assert fit.residual_variance == pytest.approx(ref.scale)
    # sandwich from the estimating function Z * residual with bread Z'Z
    Z = sm.add_constant(X)
    psi = Z * (yK - Z @ fit.beta_minus)[:, None]
    bread = np.linalg.inv(Z.T @ Z)
    np.testing.assert_allclose(bread @ psi.T @ psi @ bread, ref.cov_params(), rtol=1e-10)


def test_endpoint_regression_needs_enough_subjects():
    X = np.array([[0.0], [1.0]])
    with pytest.raises(InsufficientRetrievedDropouts):
        fit_endpoint_regression(X, np.array([1.0, 2.0]))
    with pytest.raises(RankDeficient):
        fit_endpoint_regression(np.ones((4, 1)), np.arange(4.0))
