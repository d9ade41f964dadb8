import numpy as np
import pytest
import statsmodels.api as sm
from scipy import stats

from conftest import make_dataset, random_monotone
from pmmdirect.data import derive_indicators
from pmmdirect.errors import InsufficientRetrievedDropouts, PreconditionViolated
from pmmdirect.estimators import (
    METHODS,
    Workspace,
    adjust_baseline,
    estimate,
    estimate_j2r,
    estimate_mar,
    estimate_pw,
    estimate_r2b,
    estimate_rd,
    estimate_rd_pure,
)
from pmmdirect.mmrm import fit_mmrm


def _ols_mean_at(X, y, nu):
    fit = sm.OLS(y, sm.add_constant(X, has_constant="add")).fit()
    return float(fit.params @ np.r_[1.0, nu])


def test_complete_data_every_method_equals_mar():
    rng = np.random.default_rng(0)
    n, K = 160, 3
    X = rng.normal(size=(n, 1))
    arm = np.repeat([0, 1], n // 2)
    y = X + 0.5 * arm[:, None] + rng.normal(size=(n, K))
    ds = make_dataset(y, np.ones((n, K), bool), arm, X)
    mar = estimate_mar(ds)
    for m in ("r2b", "j2r", "pw"):
        res = estimate(ds, m)
        np.testing.assert_allclose(res.mu, mar.mu, atol=1e-10)
        np.testing.assert_allclose(res.cov, mar.cov, atol=1e-12)
        assert res.pi.tolist() == [0.0, 0.0]


def test_mar_mean_is_regression_at_arm_covariate_mean(pmm_ds):
    res = estimate_mar(pmm_ds)
    for i in range(2):
        r = pmm_ds.arm_index(i)
        fit = fit_mmrm(pmm_ds.X[r], pmm_ds.y[r], pmm_ds.R[r])
        nu = pmm_ds.X[r].mean(axis=0)
        assert res.mu[i] == pytest.approx(fit.coef[-1] @ np.r_[1, nu], abs=1e-10)
        np.testing.assert_allclose(res.nu[i], nu)


def test_j2r_and_r2b_mixtures(pmm_ds):
    mar = estimate_mar(pmm_ds)
    pi = np.array([(~pmm_ds.R[pmm_ds.arm == i, -1]).mean() for i in range(2)])
    j2r = estimate_j2r(pmm_ds)
    r2b = estimate_r2b(pmm_ds)
    np.testing.assert_allclose(j2r.pi, pi)
    assert j2r.mu[0] == pytest.approx(mar.mu[0])
    assert j2r.mu[1] == pytest.approx((1 - pi[1]) * mar.mu[1] + pi[1] * mar.mu[0])
    # change scale: the arm-specific baseline anchor is zero change
    np.testing.assert_allclose(r2b.mu, (1 - pi) * mar.mu)


def test_r2b_pooled_baseline_anchor(pmm_ds):
    mar = estimate_mar(pmm_ds)
    r2b = estimate_r2b(pmm_ds, pooled_baseline=True)
    y0 = pmm_ds.baseline_outcome()
    for i in range(2):
        pi = r2b.pi[i]
        anchor = y0.mean() - y0[pmm_ds.arm == i].mean()
        assert r2b.mu[i] == pytest.approx((1 - pi) * mar.mu[i] + pi * anchor)


def test_r2b_raw_scale_anchor_is_arm_baseline(pmm_ds):
    raw = pmm_ds.replace(y=np.where(pmm_ds.R, pmm_ds.y + pmm_ds.baseline_outcome()[:, None], 0.0),
                         response="raw")
    change = estimate_r2b(pmm_ds)
    res = estimate_r2b(raw)
    nu = res.nu[:, 0]
    # raw = change + baseline when the anchor is the arm's own baseline mean
    np.testing.assert_allclose(res.mu, change.mu + nu, atol=1e-9)
    assert np.all(np.isfinite(res.se)) and np.all(res.se > 0)


def test_pw_reconstruction(pmm_ds):
    res = estimate_pw(pmm_ds)
    K = pmm_ds.K
    r0, r1 = pmm_ds.arm_index(0), pmm_ds.arm_index(1)
    fit0 = fit_mmrm(pmm_ds.X[r0], pmm_ds.y[r0], pmm_ds.R[r0])
    A1 = pmm_ds.R[r1, -1]  # A3 collapse: Pattern A at K means observed at K
    fitA = fit_mmrm(pmm_ds.X[r1][A1], pmm_ds.y[r1][A1], pmm_ds.R[r1][A1])
    pi = 1 - A1.mean()
    nu_A1 = pmm_ds.X[r1][A1].mean(axis=0)
    nu_B = pmm_ds.X[r1][~A1].mean(axis=0)
    expect = (1 - pi) * (fitA.coef[K - 1] @ np.r_[1, nu_A1]) + pi * (fit0.coef[K - 1] @ np.r_[1, nu_B])
    assert res.mu[1] == pytest.approx(expect, abs=1e-9)
    assert res.mu[0] == pytest.approx(fit0.coef[K - 1] @ np.r_[1, pmm_ds.X[r0].mean(axis=0)], abs=1e-9)


def test_rd_reconstruction(rd_ds):
    res = estimate_rd(rd_ds)
    for i in range(2):
        r = rd_ds.arm_index(i)
        X, y, R, A = rd_ds.X[r], rd_ds.y[r], rd_ds.R[r], rd_ds.A[r]
        a1 = A[:, -1]
        phi = a1.mean()
        fitA = fit_mmrm(X[a1], y[a1], R[a1])
        adherent = fitA.coef[-1] @ np.r_[1, X[a1].mean(axis=0)]
        rd = ~a1 & R[:, -1]
        nonadherent = _ols_mean_at(X[rd], y[rd, -1], X[~a1].mean(axis=0))
        assert res.mu[i] == pytest.approx(phi * adherent + (1 - phi) * nonadherent, abs=1e-9)


def test_rd_pure_equals_rd_when_adherers_are_observed(rd_ds):
    # adherers are always observed in this design, so the two forms coincide
    a = estimate_rd(rd_ds)
    b = estimate_rd_pure(rd_ds)
    np.testing.assert_allclose(a.mu, b.mu, atol=1e-9)
    np.testing.assert_allclose(a.se, b.se, rtol=1e-6)


def test_rd_pure_rejects_missing_adherers(pmm_ds):
    ds = derive_indicators(pmm_ds.replace(A=None)).replace(A=np.ones_like(pmm_ds.R))
    with pytest.raises(PreconditionViolated):
        estimate_rd_pure(ds)


def test_rd_needs_retrieved_dropouts(rd_ds):
    A = rd_ds.A.copy()
    R = rd_ds.R.copy()
    r0 = rd_ds.arm_index(0)
    rd = r0[~A[r0, -1] & R[r0, -1]]
    R[rd[1:], -1] = False
    with pytest.raises(InsufficientRetrievedDropouts) as info:
        estimate_rd(rd_ds.replace(R=R))
    assert info.value.arm == 0


def test_contrast_inference(pmm_ds):
    res = estimate_j2r(pmm_ds)
    c = res.contrast(1)
    assert c.estimate == pytest.approx(res.mu[1] - res.mu[0])
    var = res.cov[0, 0] + res.cov[1, 1] - 2 * res.cov[0, 1]
    assert c.se == pytest.approx(np.sqrt(var), rel=1e-10)
    assert c.p == pytest.approx(2 * stats.norm.sf(abs(c.estimate) / c.se))
    assert c.ci_low == pytest.approx(c.estimate - stats.norm.ppf(0.975) * c.se)
    with pytest.raises(ValueError):
        res.contrast(0)


def test_j2r_reference_covariance_enters_treatment_arm(pmm_ds):
    # J2R borrows the reference mean, so the two arm means are correlated
    res = estimate_j2r(pmm_ds)
    assert res.cov[0, 1] > 0
    assert estimate_mar(pmm_ds).cov[0, 1] == 0


def test_intermediate_visit(pmm_ds):
    res = estimate_mar(pmm_ds, visit=2)
    r = pmm_ds.arm_index(0)
    fit = fit_mmrm(pmm_ds.X[r], pmm_ds.y[r], pmm_ds.R[r])
    assert res.mu[0] == pytest.approx(fit.coef[1] @ np.r_[1, pmm_ds.X[r].mean(axis=0)])
    with pytest.raises(ValueError):
        estimate_mar(pmm_ds, visit=9)


def test_variance_false_gives_same_point_estimates(pmm_ds):
    for m in ("r2b", "j2r", "pw", "mar"):
        a = estimate(pmm_ds, m)
        b = estimate(pmm_ds, m, variance=False)
        np.testing.assert_allclose(a.mu, b.mu)
        assert np.isnan(b.cov).all()


def test_workspace_shares_fits(pmm_ds):
    ws = Workspace(pmm_ds)
    estimate_j2r(ws)
    n = len(ws._fits)
    estimate_r2b(ws)
    assert len(ws._fits) == n


def test_unknown_method(pmm_ds):
    with pytest.raises(ValueError):
        estimate(pmm_ds, "copy-reference")
    assert set(METHODS) == {"mar", "r2b", "j2r", "pw", "rd", "rd-pure"}


def test_adjust_baseline_standardises_to_pooled_mean(pmm_ds):
    res = estimate_mar(pmm_ds)
    adj = adjust_baseline(res)
    assert adj.adjusted
    np.testing.assert_allclose(adj.nu, np.tile(pmm_ds.X.mean(axis=0), (2, 1)))
    # the regression of the arm mean on its covariate mean recovers the slope
    for i in range(2):
        r = pmm_ds.arm_index(i)
        fit = fit_mmrm(pmm_ds.X[r], pmm_ds.y[r], pmm_ds.R[r])
        slope = fit.coef[-1, 1]
        shift = pmm_ds.X.mean() - pmm_ds.X[r].mean()
        assert adj.mu[i] == pytest.approx(res.mu[i] + slope * shift, abs=0.05 * abs(shift) + 1e-9)
    assert np.all(adj.se > 0)
    with pytest.raises(PreconditionViolated):
        adjust_baseline(adj)


def test_three_arm_dataset():
    rng = np.random.default_rng(5)
    n, K = 240, 2
    X = rng.normal(size=(n, 1))
    arm = np.repeat([0, 1, 2], n // 3)
    y = X + 0.3 * arm[:, None] + rng.normal(size=(n, K))
    R = random_monotone(rng, n, K, 0.8)
    ds = make_dataset(y, R, arm, X, labels=("p", "a", "b"))
    res = estimate_j2r(ds)
    assert len(res.contrasts()) == 2
    mar = estimate_mar(ds)
    for i in (1, 2):
        assert res.mu[i] == pytest.approx((1 - res.pi[i]) * mar.mu[i] + res.pi[i] * mar.mu[0])
    assert res.cov[1, 2] > 0  # both borrow the reference mean


def test_result_serialises(pmm_ds):
    d = estimate_j2r(pmm_ds).to_dict()
    assert d["method"] == "j2r" and len(d["arms"]) == 2 and len(d["contrasts"]) == 1
