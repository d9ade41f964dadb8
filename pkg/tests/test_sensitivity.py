import numpy as np
import pytest
from scipy import stats

from conftest import make_dataset
from pmmdirect.errors import NoBoundary, PreconditionViolated
from pmmdirect.estimators import adjust_baseline, estimate
from pmmdirect.sensitivity import (
    DeltaAdjustment,
    boundary_residual,
    delta_adjust,
    pvalue_grid,
    tipping_boundary,
    variance_quadratic,
)


@pytest.fixture(scope="module")
def j2r(pmm_ds):
    return estimate(pmm_ds, "j2r")


@pytest.fixture(scope="module")
def rd(rd_ds):
    return estimate(rd_ds, "rd")


def test_zero_penalty_reproduces_contrast(j2r, rd):
    for res in (j2r, rd):
        c = res.contrast(1)
        a = delta_adjust(res, DeltaAdjustment())
        assert a.estimate == c.estimate
        assert a.se == pytest.approx(c.se, rel=1e-13)
        assert a.p == pytest.approx(c.p, rel=1e-12)


def test_penalty_moves_estimate_by_imputed_share(j2r, pmm_ds):
    # every subject missing at the final visit is imputed
    q = np.array([(~pmm_ds.R[pmm_ds.arm == i, -1]).mean() for i in range(2)])
    base = delta_adjust(j2r, DeltaAdjustment()).estimate
    a = delta_adjust(j2r, DeltaAdjustment(-1.5, 2.0))
    assert a.estimate - base == pytest.approx(2.0 * q[1] + 1.5 * q[0], abs=1e-12)


def test_pattern_b_only_uses_pi(rd, rd_ds):
    base = delta_adjust(rd, DeltaAdjustment(), pattern_b_only=True).estimate
    a = delta_adjust(rd, DeltaAdjustment(0.0, 1.0), pattern_b_only=True)
    assert a.estimate - base == pytest.approx(rd.pi[1], abs=1e-12)
    full = delta_adjust(rd, DeltaAdjustment(0.0, 1.0))
    assert full.estimate - base == pytest.approx(rd.pi[1] + rd.tau[1], abs=1e-12)


@pytest.mark.parametrize("pattern_b_only", [False, True])
def test_quadratic_matches_pointwise_variance(rd, pattern_b_only):
    quad = variance_quadratic(rd, pattern_b_only=pattern_b_only)
    rng = np.random.default_rng(0)
    for d0, d1 in rng.uniform(-10, 10, size=(100, 2)):
        se = delta_adjust(rd, DeltaAdjustment(d0, d1), pattern_b_only=pattern_b_only).se
        assert abs(quad(d0, d1) - se ** 2) < 1e-10


def test_boundary_points_solve_the_unsquared_equation(j2r, rd):
    for res in (j2r, rd):
        b = tipping_boundary(res, delta0_grid=np.linspace(-5, 5, 41))
        assert len(b.points) > 0
        assert np.abs(boundary_residual(res, b)).max() < 1e-8


def test_boundary_points_are_at_the_significance_level(rd):
    b = tipping_boundary(rd, alpha=0.1, delta0_grid=[-5.0, 0.0, 3.0])
    for d0, d1 in b.points:
        p = delta_adjust(rd, DeltaAdjustment(d0, d1)).p
        assert p == pytest.approx(0.1, abs=1e-8)


def test_one_way_boundary(rd):
    b = tipping_boundary(rd)
    z = stats.norm.ppf(0.975)
    for d1 in b.one_way:
        a = delta_adjust(rd, DeltaAdjustment(0.0, d1))
        assert abs(a.estimate) == pytest.approx(z * a.se, abs=1e-8)


def test_direction_argument(rd):
    with pytest.raises(ValueError):
        tipping_boundary(rd, direction="sideways")
    with pytest.raises(ValueError):
        tipping_boundary(rd, alpha=1.5)


def test_no_boundary_without_imputed_outcomes():
    rng = np.random.default_rng(1)
    n, K = 60, 2
    X = rng.normal(size=(n, 1))
    arm = np.repeat([0, 1], n // 2)
    ds = make_dataset(X + arm[:, None] + rng.normal(size=(n, K)), np.ones((n, K), bool), arm, X)
    with pytest.raises(NoBoundary):
        tipping_boundary(estimate(ds, "j2r"))


def test_adjusted_result_is_rejected(j2r):
    with pytest.raises(PreconditionViolated):
        delta_adjust(adjust_baseline(j2r), DeltaAdjustment(1.0, 1.0))
    with pytest.raises(ValueError):
        delta_adjust(j2r, DeltaAdjustment(0.0, 1.0), arm=0)
    with pytest.raises(ValueError):
        DeltaAdjustment(np.inf, 0.0)


def test_pvalue_grid_shape_and_values(rd):
    g = pvalue_grid(rd, resolution=21)
    assert g.shape == (21 * 21, 3)
    assert list(g.columns) == ["delta0", "delta1", "p"]
    row = g[(g.delta0 == 0) & (g.delta1 == 0)]
    assert row.p.iloc[0] == pytest.approx(rd.contrast(1).p, rel=1e-12)
    for r in g.sample(10, random_state=0).itertuples():
        assert r.p == pytest.approx(delta_adjust(rd, DeltaAdjustment(r.delta0, r.delta1)).p, rel=1e-10)
