import numpy as np
import pytest
import statsmodels.api as sm
from scipy import stats

from conftest import make_dataset
from pmmdirect.errors import InsufficientRetrievedDropouts, NotMonotone
from pmmdirect.mi import (
    ancova,
    apply_pattern_shift,
    impute,
    impute_mar_monotone,
    mi_estimate,
    pooled_baseline_anchor,
    rubin_pool,
)


def test_rubin_pool_hand_computation():
    q = np.array([1.0, 1.4, 0.8, 1.2])
    u = np.array([0.04, 0.05, 0.045, 0.05])
    res = rubin_pool(q, u, df_complete=100)
    m = 4
    W, B = u.mean(), q.var(ddof=1)
    T = W + (1 + 1 / m) * B
    lam = (1 + 1 / m) * B / T
    nu_old = (m - 1) / lam ** 2
    nu_obs = (100 + 1) / (100 + 3) * 100 * (1 - lam)
    df = nu_old * nu_obs / (nu_old + nu_obs)
    assert res.estimate == pytest.approx(q.mean())
    assert res.total == pytest.approx(T)
    assert res.df == pytest.approx(df)
    half = stats.t.ppf(0.975, df) * np.sqrt(T)
    assert res.ci == pytest.approx((q.mean() - half, q.mean() + half))
    assert res.p == pytest.approx(2 * stats.t.sf(q.mean() / np.sqrt(T), df))
    assert res.df <= 100


def test_rubin_pool_without_between_variance():
    res = rubin_pool(np.ones(5), np.full(5, 0.25))
    assert res.between == 0 and res.total == 0.25
    assert np.isinf(res.df)
    assert res.ci[1] - 1 == pytest.approx(stats.norm.ppf(0.975) * 0.5)
    with pytest.raises(ValueError):
        rubin_pool([1.0], [0.1])


def test_posterior_draws_center_on_ols():
    rng = np.random.default_rng(0)
    n = 60
    X = rng.normal(size=(n, 1))
    y = np.column_stack([1 + X[:, 0] + rng.normal(size=n)])
    R = np.ones((n, 1), bool)
    R[:10] = False
    done = impute_mar_monotone(X, y, R, 4000, np.random.default_rng(1))
    obs = R[:, 0]
    ols = sm.OLS(y[obs, 0], sm.add_constant(X[obs])).fit()
    pred = ols.params @ sm.add_constant(X[~obs], has_constant="add").T
    # posterior predictive mean equals the OLS prediction
    np.testing.assert_allclose(done[:, ~obs, 0].mean(axis=0), pred, atol=0.08)
    # and its variance is sigma^2 (1 + leverage) inflated by the posterior of sigma^2
    Z = sm.add_constant(X[~obs], has_constant="add")
    lev = np.einsum("ip,pq,iq->i", Z, ols.normalized_cov_params, Z)
    df = obs.sum() - 2
    expect = ols.scale * df / (df - 2) * (1 + lev)
    np.testing.assert_allclose(done[:, ~obs, 0].var(axis=0), expect, rtol=0.1)


def test_mar_imputation_keeps_observed_and_recovers_mean():
    rng = np.random.default_rng(2)
    n = 3000
    S = np.array([[1.0, 0.7], [0.7, 1.0]])
    y = rng.multivariate_normal([0.0, 1.0], S, size=n)
    X = rng.normal(size=(n, 1))
    R = np.ones((n, 2), bool)
    R[:, 1] = rng.random(n) > 1 / (1 + np.exp(-2 * y[:, 0]))  # MAR on the first visit
    done = impute_mar_monotone(X, y, R, 5, np.random.default_rng(3))
    np.testing.assert_array_equal(done[:, R], np.broadcast_to(y[R], (5, R.sum())))
    assert abs(done[:, :, 1].mean() - y[:, 1].mean()) < 0.05
    assert abs(y[R[:, 1], 1].mean() - y[:, 1].mean()) > 0.2  # complete cases are biased


def test_non_monotone_is_rejected():
    R = np.array([[True, False, True], [True, True, True]] * 5)
    with pytest.raises(NotMonotone):
        impute_mar_monotone(np.zeros((10, 1)), np.zeros((10, 3)), R, 2, np.random.default_rng(0))


def test_j2r_shift_moves_only_pattern_b_missing_cells(pmm_ds):
    rng = np.random.default_rng(4)
    ds = pmm_ds.replace(A=pmm_ds.R.copy())
    done = [impute_mar_monotone(ds.X[r], ds.y[r], ds.R[r], 3, rng)
            for r in (ds.arm_index(0), ds.arm_index(1))]
    shifted = apply_pattern_shift(done, ds, "j2r")
    np.testing.assert_array_equal(shifted[0], done[0])
    r1 = ds.arm_index(1)
    cell = ~ds.A[r1] & ~ds.R[r1]
    delta = done[0].mean(axis=1) - done[1].mean(axis=1)  # (m, K)
    np.testing.assert_allclose(shifted[1], np.where(cell[None], done[1] + delta[:, None, :], done[1]))


def test_pooled_baseline_anchor(pmm_ds):
    y0 = pmm_ds.baseline_outcome()
    a = pooled_baseline_anchor(pmm_ds)
    assert a[1] == pytest.approx(y0.mean() - y0[pmm_ds.arm == 1].mean())


def test_ancova_matches_ols():
    rng = np.random.default_rng(5)
    n = 90
    arm = np.repeat([0, 1, 2], 30)
    X = rng.normal(size=(n, 2))
    y = X @ [0.5, -0.2] + 0.4 * arm + rng.normal(size=n)
    fits = ancova(y[None], X, arm)
    D = (arm[:, None] == np.arange(3)).astype(float)
    ols = sm.OLS(y, np.column_stack([D, X])).fit()
    xbar = X.mean(axis=0)
    for i in range(3):
        c = np.r_[np.eye(3)[i], xbar]
        assert fits.means[0, i] == pytest.approx(c @ ols.params)
        assert fits.mean_var[0, i] == pytest.approx(c @ ols.cov_params() @ c)
    d = np.r_[-1, 0, 1, 0, 0]
    assert fits.diffs[0, 1] == pytest.approx(d @ ols.params)
    assert fits.diff_var[0, 1] == pytest.approx(d @ ols.cov_params() @ d)
    assert fits.df_complete == n - 5
    own = ancova(y[None], X, arm, at="arm")
    for i in range(3):
        # at the arm's own covariate mean the LS-mean is the arm's sample mean
        assert own.means[0, i] == pytest.approx(y[arm == i].mean())


def test_mi_on_complete_data_is_the_complete_analysis():
    rng = np.random.default_rng(6)
    n, K = 80, 2
    X = rng.normal(size=(n, 1))
    arm = np.repeat([0, 1], n // 2)
    y = X + arm[:, None] + rng.normal(size=(n, K))
    ds = make_dataset(y, np.ones((n, K), bool), arm, X)
    res = mi_estimate(ds, "j2r", 5, np.random.default_rng(0))
    ref = ancova(y[:, -1][None], X, arm)
    assert res.contrasts[0].between == pytest.approx(0, abs=1e-20)
    assert res.contrasts[0].estimate == pytest.approx(ref.diffs[0, 0])
    assert res.contrasts[0].total == pytest.approx(ref.diff_var[0, 0])


def test_mi_is_reproducible(pmm_ds):
    a = mi_estimate(pmm_ds, "pw", 10, np.random.default_rng(9))
    b = mi_estimate(pmm_ds, "pw", 10, np.random.default_rng(9))
    assert a.to_dict() == b.to_dict()
    assert len(list(a)) == 3


@pytest.mark.parametrize("method", ["mar", "r2b", "j2r", "pw"])
def test_imputation_completes_every_endpoint(pmm_ds, method):
    done = impute(pmm_ds, method, 4, np.random.default_rng(1))
    for i, d in enumerate(done):
        r = pmm_ds.arm_index(i)
        assert d.shape == (4, len(r))
        obs = pmm_ds.R[r, -1]
        np.testing.assert_array_equal(d[:, obs], np.broadcast_to(pmm_ds.y[r, -1][obs], (4, obs.sum())))
        assert np.isfinite(d).all()


def test_rd_imputation(rd_ds):
    done = impute(rd_ds, "rd", 3, np.random.default_rng(2))
    assert all(np.isfinite(d).all() for d in done)
    R = rd_ds.R.copy()
    r0 = rd_ds.arm_index(0)
    rd = r0[~rd_ds.A[r0, -1] & R[r0, -1]]
    R[rd[1:], -1] = False
    with pytest.raises(InsufficientRetrievedDropouts):
        impute(rd_ds.replace(R=R), "rd", 3, np.random.default_rng(2))


def test_imputation_argument_checks(pmm_ds):
    with pytest.raises(ValueError):
        impute(pmm_ds, "j2r", 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        impute(pmm_ds, "copy-increment", 3, np.random.default_rng(0))
