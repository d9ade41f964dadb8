"""Multiple-imputation comparator.

MAR imputation is sequential regression on monotone data: visit ``k`` is
regressed on ``(1, X, Y_1..Y_{k-1})`` over subjects observed at ``k`` and
missing values are drawn from the posterior predictive under the usual
normal / scaled-inverse-chi-square posterior. All imputations are drawn at
once as arrays of shape ``(m, n, K)``.

Completed datasets are analysed by ANCOVA of the final-visit outcome on
treatment indicators and the covariates, and pooled with Rubin's rules using
the Barnard-Rubin degrees of freedom.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .data import LongitudinalDataset, derive_indicators
from .errors import InsufficientRetrievedDropouts, NotMonotone, PreconditionViolated, RankDeficient

MI_METHODS = ("mar", "r2b", "j2r", "pw", "rd")


def _is_monotone(R):
    return bool(np.all(~(R[:, 1:] & ~R[:, :-1])))


def _posterior_draws(Z, yv, m, rng):
    """Coefficient and variance draws for the regression of ``yv`` on ``Z``."""
    n, p = Z.shape
    if n < p + 1:
        raise RankDeficient(f"{n} observed cases cannot support a {p}-parameter imputation model")
    ZtZ = Z.T @ Z
    try:
        L = np.linalg.cholesky(np.linalg.inv(ZtZ))
    except np.linalg.LinAlgError:
        raise RankDeficient("imputation regression design is singular") from None
    coef = np.linalg.solve(ZtZ, Z.T @ yv)
    resid = yv - Z @ coef
    df = n - p
    sigma2 = (resid @ resid) / rng.chisquare(df, size=m)
    beta = coef + np.sqrt(sigma2)[:, None] * (rng.standard_normal((m, p)) @ L.T)
    return beta, sigma2


def impute_mar_monotone(X, y, R, m: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``m`` MAR completions of one arm's outcome matrix.

    Returns an ``(m, n, K)`` array; observed cells are copied unchanged.

    Raises
    ------
    NotMonotone
        Some subject returns after a missing visit.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float).T).T
    R = np.asarray(R, dtype=bool)
    y = np.where(R, np.asarray(y, dtype=float), 0.0)
    if not _is_monotone(R):
        raise NotMonotone("sequential-regression imputation needs monotone missingness")
    n, K = y.shape
    out = np.repeat(y[None], m, axis=0)
    for k in range(K):
        mis = ~R[:, k]
        if not mis.any():
            continue
        obs = R[:, k]
        Z = np.column_stack([np.ones(obs.sum()), X[obs], y[obs, :k]])
        beta, sigma2 = _posterior_draws(Z, y[obs, k], m, rng)
        nm = int(mis.sum())
        Zm = np.concatenate([np.ones((m, nm, 1)), np.broadcast_to(X[mis], (m, nm, X.shape[1])),
                             out[:, mis, :k]], axis=2)
        out[:, mis, k] = (np.einsum("rjp,rp->rj", Zm, beta)
                          + np.sqrt(sigma2)[:, None] * rng.standard_normal((m, nm)))
    return out


def _regression_predictive(Zfit, yfit, Znew, m, rng):
    """Posterior-predictive draws at ``Znew``; ``Zfit``/``yfit`` may carry a leading imputation axis."""
    if Zfit.ndim == 2:
        beta, sigma2 = _posterior_draws(Zfit, yfit, m, rng)
    else:
        draws = [_posterior_draws(Zfit[r], yfit[r], 1, rng) for r in range(m)]
        beta = np.vstack([b for b, _ in draws])
        sigma2 = np.concatenate([s for _, s in draws])
    return Znew @ beta.T + np.sqrt(sigma2)[None, :] * rng.standard_normal((len(Znew), m))


def apply_pattern_shift(completed: list[np.ndarray], ds: LongitudinalDataset, method: str,
                        anchor=None) -> list[np.ndarray]:
    """Shift imputed Pattern-B cells of MAR completions.

    Parameters
    ----------
    completed : per-arm ``(m, n_i, K)`` MAR completions (analysis scale)
    method : "r2b" or "j2r"
    anchor : per-arm return-to-baseline targets on the analysis scale;
        defaults to the pooled baseline mean expressed on that scale

    ``mu_ik^(r)`` is the completed-data mean of arm ``i`` at visit ``k`` in
    imputation ``r``. Return to baseline replaces it with the anchor; jump
    to reference replaces it with the reference arm's ``mu_0k^(r)``.
    Observed cells are never touched.
    """
    if method not in ("r2b", "j2r"):
        raise ValueError(f"no pattern shift for method {method!r}")
    means = [c.mean(axis=1) for c in completed]  # (m, K)
    if method == "r2b" and anchor is None:
        anchor = pooled_baseline_anchor(ds)
    out = []
    for i, c in enumerate(completed):
        rows = ds.arm_index(i)
        cell = ~ds.A[rows] & ~ds.R[rows]
        if method == "r2b":
            target = np.broadcast_to(np.atleast_1d(anchor[i]), (c.shape[0], c.shape[2]))
        else:
            target = means[0]
        shift = (target - means[i])[:, None, :]
        out.append(np.where(cell[None], c + shift, c))
    return out


def pooled_baseline_anchor(ds: LongitudinalDataset) -> np.ndarray:
    """Pooled baseline mean per arm on the analysis scale."""
    if ds.baseline_col is None:
        raise PreconditionViolated("return to baseline needs the baseline outcome among the covariates")
    y0 = ds.baseline_outcome()
    grand = y0.mean()
    if ds.response == "change":
        return np.array([grand - y0[ds.arm == i].mean() for i in range(ds.arm_count)])
    return np.full(ds.arm_count, grand)


def impute_pw(ds: LongitudinalDataset, m: int, rng) -> list[np.ndarray]:
    """Final-visit completions under placebo washout, per arm ``(m, n_i)``.

    The reference arm is MAR-imputed. In other arms, missing endpoints of
    Pattern-B subjects ignore their intermediate visits and are drawn from
    the endpoint-on-covariates regression fitted to each MAR-completed
    reference copy; missing Pattern-A endpoints are MAR-imputed within the
    arm's Pattern-A subjects.
    """
    ref = ds.arm_index(0)
    ref_done = impute_mar_monotone(ds.X[ref], ds.y[ref], ds.R[ref], m, rng)
    Zref = np.column_stack([np.ones(len(ref)), ds.X[ref]])
    out = [ref_done[:, :, -1]]
    for i in range(1, ds.arm_count):
        rows = ds.arm_index(i)
        yK = np.repeat(np.where(ds.R[rows, -1], ds.y[rows, -1], 0.0)[None], m, axis=0)
        A, R = ds.A[rows, -1], ds.R[rows, -1]
        b = ~A & ~R
        if b.any():
            Znew = np.column_stack([np.ones(b.sum()), ds.X[rows][b]])
            Zfit = np.broadcast_to(Zref, (m,) + Zref.shape)
            yK[:, b] = _regression_predictive(Zfit, ref_done[:, :, -1], Znew, m, rng).T
        a_mis = A & ~R
        if a_mis.any():
            sub = rows[A]
            done = impute_mar_monotone(ds.X[sub], ds.y[sub], ds.R[sub], m, rng)
            yK[:, a_mis] = done[:, ~ds.R[sub, -1], -1]
        out.append(yK)
    return out


def impute_rd(ds: LongitudinalDataset, m: int, rng) -> list[np.ndarray]:
    """Final-visit completions under retrieved-dropout imputation, per arm.

    Missing Pattern-B endpoints are drawn from the posterior predictive of
    the arm's retrieved-dropout regression of the endpoint on ``(1, X)``;
    missing Pattern-A endpoints are MAR-imputed within Pattern A.
    """
    out = []
    for i in range(ds.arm_count):
        rows = ds.arm_index(i)
        A, R = ds.A[rows, -1], ds.R[rows, -1]
        yK = np.repeat(np.where(R, ds.y[rows, -1], 0.0)[None], m, axis=0)
        b = ~A & ~R
        if b.any():
            rd = ~A & R
            Zrd = np.column_stack([np.ones(rd.sum()), ds.X[rows][rd]])
            if rd.sum() < Zrd.shape[1] + 1:
                raise InsufficientRetrievedDropouts(int(rd.sum()), Zrd.shape[1] + 1, arm=i)
            Znew = np.column_stack([np.ones(b.sum()), ds.X[rows][b]])
            yK[:, b] = _regression_predictive(Zrd, ds.y[rows][rd, -1], Znew, m, rng).T
        a_mis = A & ~R
        if a_mis.any():
            sub = rows[A]
            done = impute_mar_monotone(ds.X[sub], ds.y[sub], ds.R[sub], m, rng)
            yK[:, a_mis] = done[:, ~ds.R[sub, -1], -1]
        out.append(yK)
    return out


def impute(ds: LongitudinalDataset, method: str, m: int, rng) -> list[np.ndarray]:
    """Final-visit completions per arm for any method in :data:`MI_METHODS`."""
    if m < 2:
        raise ValueError("at least two imputations are required")
    if ds.A is None:
        ds = derive_indicators(ds)
    if method == "pw":
        return impute_pw(ds, m, rng)
    if method == "rd":
        return impute_rd(ds, m, rng)
    if method not in MI_METHODS:
        raise ValueError(f"unknown imputation method {method!r}")
    done = [impute_mar_monotone(ds.X[r], ds.y[r], ds.R[r], m, rng)
            for r in (ds.arm_index(i) for i in range(ds.arm_count))]
    if method in ("r2b", "j2r"):
        done = apply_pattern_shift(done, ds, method)
    return [d[:, :, -1] for d in done]


@dataclass(frozen=True)
class AncovaFits:
    """Per-imputation arm means and contrasts with model-based variances."""

    means: np.ndarray        # (m, I+1)
    mean_var: np.ndarray     # (m, I+1)
    diffs: np.ndarray        # (m, I)
    diff_var: np.ndarray     # (m, I)
    df_complete: int


def ancova(yK, X, arm, at: str = "pooled") -> AncovaFits:
    """Endpoint on arm indicators plus covariates, fitted for every imputation.

    ``yK`` is ``(m, n)``. Arm means are evaluated at the pooled covariate mean
    (``at="pooled"``) or at each arm's own covariate mean (``at="arm"``,
    which reproduces the completed-data arm means). Contrasts are arm ``i``
    minus arm 0 at the same evaluation points.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float).T).T
    arm = np.asarray(arm)
    n = len(arm)
    I1 = int(arm.max()) + 1
    D = (arm[:, None] == np.arange(I1)).astype(float)
    Z = np.column_stack([D, X])
    df = n - I1 - X.shape[1]
    if df <= 0:
        raise RankDeficient("no residual degrees of freedom in the analysis model")
    ZtZinv = np.linalg.inv(Z.T @ Z)
    coef = yK @ Z @ ZtZinv  # (m, p)
    resid = yK - coef @ Z.T
    s2 = np.sum(resid ** 2, axis=1) / df
    if at == "pooled":
        pts = np.tile(X.mean(axis=0), (I1, 1))
    elif at == "arm":
        pts = np.vstack([X[arm == i].mean(axis=0) for i in range(I1)])
    else:
        raise ValueError(f"unknown evaluation point {at!r}")
    C = np.column_stack([np.eye(I1), pts])
    Cd = C[1:] - C[0]
    q = np.einsum("ip,pq,iq->i", C, ZtZinv, C)
    qd = np.einsum("ip,pq,iq->i", Cd, ZtZinv, Cd)
    return AncovaFits(coef @ C.T, s2[:, None] * q, coef @ Cd.T, s2[:, None] * qd, df)


@dataclass(frozen=True)
class PooledResult:
    estimate: float
    within: float
    between: float
    total: float
    df: float
    ci: tuple
    p: float
    m: int

    @property
    def se(self) -> float:
        return float(np.sqrt(self.total))

    def to_dict(self) -> dict:
        return dict(estimate=self.estimate, se=self.se, within=self.within, between=self.between,
                    total=self.total, df=self.df, ci_low=self.ci[0], ci_high=self.ci[1], p=self.p,
                    m=self.m)


def rubin_pool(estimates, variances, df_complete: float | None = None, alpha: float = 0.05) -> PooledResult:
    """Combine per-imputation estimates with Rubin's rules.

    The degrees of freedom follow Barnard and Rubin's small-sample formula
    when ``df_complete`` is given, otherwise the large-sample formula.
    """
    q = np.asarray(estimates, dtype=float)
    u = np.asarray(variances, dtype=float)
    m = len(q)
    if m < 2:
        raise ValueError("between-imputation variance needs at least two imputations")
    qbar = float(q.mean())
    W = float(u.mean())
    B = float(q.var(ddof=1))
    T = W + (1 + 1 / m) * B
    lam = (1 + 1 / m) * B / T if T > 0 else 0.0
    df_m = (m - 1) / lam ** 2 if lam > 0 else np.inf
    if df_complete is None:
        df = df_m
    else:
        df_obs = (df_complete + 1) / (df_complete + 3) * df_complete * (1 - lam)
        df = df_obs if not np.isfinite(df_m) else df_m * df_obs / (df_m + df_obs)
    se = np.sqrt(T)
    tq = stats.t.ppf(1 - alpha / 2, df) if np.isfinite(df) else stats.norm.ppf(1 - alpha / 2)
    if se > 0:
        p = float(2 * stats.t.sf(abs(qbar) / se, df))
    else:
        p = 1.0 if qbar == 0 else 0.0
    return PooledResult(qbar, W, B, T, float(df), (qbar - tq * se, qbar + tq * se), p, m)


@dataclass(frozen=True)
class MIResult:
    method: str
    arms: list            # PooledResult per arm
    contrasts: list       # PooledResult per arm i vs reference
    per_imputation: AncovaFits

    def __iter__(self):
        return iter(self.arms + self.contrasts)

    def to_dict(self) -> dict:
        return dict(method=self.method, arms=[a.to_dict() for a in self.arms],
                    contrasts=[c.to_dict() for c in self.contrasts])


def mi_estimate(ds: LongitudinalDataset, method: str, m: int, rng, at: str = "pooled",
                alpha: float = 0.05) -> MIResult:
    """Impute, analyse each completion by ANCOVA, and pool."""
    if ds.A is None:
        ds = derive_indicators(ds)
    done = impute(ds, method, m, rng)
    order = np.concatenate([ds.arm_index(i) for i in range(ds.arm_count)])
    yK = np.concatenate(done, axis=1)
    fits = ancova(yK, ds.X[order], ds.arm[order], at)
    arms = [rubin_pool(fits.means[:, i], fits.mean_var[:, i], fits.df_complete, alpha)
            for i in range(ds.arm_count)]
    cons = [rubin_pool(fits.diffs[:, i], fits.diff_var[:, i], fits.df_complete, alpha)
            for i in range(ds.arm_count - 1)]
    return MIResult(method, arms, cons, fits)
