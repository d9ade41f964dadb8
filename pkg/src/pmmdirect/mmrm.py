"""Per-arm multivariate-normal repeated-measures fits.

The mean model is saturated in visit: each post-baseline visit ``k`` has its
own intercept and covariate slopes, so the design for subject ``j`` is
``kron(I_K, [1, x_j])``. The within-subject covariance is unstructured.
Parameters are fit by EM under ignorable missingness; missing visits are
handled through Gaussian conditioning on the observed block.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from .errors import (
    InsufficientRetrievedDropouts,
    NotConvergedWarning,
    RankDeficient,
    SingularCovariance,
)

LOG2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class DesignSpec:
    """Which covariate columns enter the per-visit regressions."""

    covariates: tuple[int, ...] | None = None  # None means all columns of X

    def matrix(self, X: np.ndarray) -> np.ndarray:
        """Per-subject row ``[1, x_j]`` (n x (m+1))."""
        cols = X if self.covariates is None else X[:, list(self.covariates)]
        return np.column_stack([np.ones(len(X)), cols])

    def covariate_columns(self, m: int) -> list[int]:
        return list(range(m)) if self.covariates is None else list(self.covariates)


@dataclass(frozen=True, eq=False)
class ArmFit:
    """ML fit for one arm (or one pattern subset of it).

    ``beta`` has length ``K*(m+1)`` ordered visit-major:
    ``(b_{1,0}, b_{1,1}', b_{2,0}, ...)``.
    """

    beta: np.ndarray
    sigma: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    subset: str
    n_used: int
    loglik_trace: np.ndarray = field(repr=False, default=None)
    index: np.ndarray = field(repr=False, default=None)  # row indices used
    spec: DesignSpec = field(repr=False, default=DesignSpec())

    @property
    def K(self) -> int:
        return self.sigma.shape[0]

    @property
    def coef(self) -> np.ndarray:
        """Coefficients as a (K, m+1) matrix."""
        return self.beta.reshape(self.K, -1)

    def to_dict(self) -> dict:
        return dict(beta=self.beta.tolist(), sigma=self.sigma.ravel().tolist(),
                    K=self.K, loglik=self.loglik, iterations=self.iterations,
                    converged=self.converged, subset=self.subset, n_used=self.n_used)


@dataclass(frozen=True, eq=False)
class CrossSectionalFit:
    beta_minus: np.ndarray
    residual_variance: float
    n_used: int
    index: np.ndarray = field(repr=False, default=None)
    xtx_inv: np.ndarray = field(repr=False, default=None)


class _Pattern:
    """Subjects sharing one observation pattern, with cached index arrays."""

    __slots__ = ("o", "oi", "mi", "rows", "n", "yo", "Z", "oo", "om", "mm", "rmi")

    def __init__(self, o, rows, y, Z):
        self.o = o
        self.oi = np.flatnonzero(o)
        self.mi = np.flatnonzero(~o)
        self.rows = rows
        self.n = len(rows)
        self.yo = y[rows][:, self.oi]
        self.Z = Z[rows]
        self.oo = np.ix_(self.oi, self.oi)
        self.om = np.ix_(self.oi, self.mi)
        self.mm = np.ix_(self.mi, self.mi)
        self.rmi = np.ix_(rows, self.mi)


def _groups(R):
    """Map each distinct observation pattern to the rows sharing it."""
    R = np.asarray(R, dtype=bool)
    keys = R @ (1 << np.arange(R.shape[1], dtype=np.int64))
    uniq, inverse = np.unique(keys, return_inverse=True)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(len(uniq) + 1))
    return [(R[order[bounds[g]]].copy(), order[bounds[g]:bounds[g + 1]])
            for g in range(len(uniq))]


def _patterns(R, y, Z):
    return [_Pattern(o, rows, y, Z) for o, rows in _groups(R) if o.any()]


def _loglik(pats, B, S):
    ll = 0.0
    for g in pats:
        So = S[g.oo]
        L = np.linalg.cholesky(So)
        r = g.yo - g.Z @ B[g.oi].T
        v = np.linalg.solve(L, r.T)
        logdet = 2 * np.sum(np.log(np.diag(L)))
        ll -= 0.5 * (g.n * (len(g.oi) * LOG2PI + logdet) + np.sum(v * v))
    return ll


def _start(Z, y, R, p):
    n, K = y.shape
    B = np.zeros((K, p))
    resid = np.zeros((n, K))
    for k in range(K):
        obs = R[:, k]
        coef, *_ = np.linalg.lstsq(Z[obs], y[obs, k], rcond=None)
        B[k] = coef
        resid[obs, k] = y[obs, k] - Z[obs] @ coef
    S = np.zeros((K, K))
    for k in range(K):
        for l in range(k, K):
            both = R[:, k] & R[:, l]
            if both.sum() > 0:
                S[k, l] = S[l, k] = np.mean(resid[both, k] * resid[both, l])
    w, V = np.linalg.eigh(S)
    S = (V * np.maximum(w, 1e-6)) @ V.T
    return B, S


def _gls_beta(pats, S, K, p):
    """Exact GLS solve for beta with the covariance held fixed."""
    info = np.zeros((K * p, K * p))
    score = np.zeros(K * p)
    for g in pats:
        W = np.zeros((K, K))
        W[g.oo] = np.linalg.inv(S[g.oo])
        info += np.kron(W, g.Z.T @ g.Z)
        yw = g.yo @ W[g.oi]
        score += (yw.T @ g.Z).ravel()
    return np.linalg.solve(info, score).reshape(K, p)


def _regularize(S, ridged):
    K = S.shape[0]
    S = 0.5 * (S + S.T)
    if np.linalg.eigvalsh(S)[0] >= 1e-10:
        return S, ridged
    if not ridged:
        S = S + 1e-8 * np.trace(S) / K * np.eye(K)
        if np.linalg.eigvalsh(S)[0] >= 1e-10:
            return S, True
    raise SingularCovariance("estimated covariance is singular (eigenvalue < 1e-10)")


def _em(Z, y, R, max_iter, tol, start=None):
    n, K = y.shape
    p = Z.shape[1]
    pats = _patterns(R, y, Z)
    if start is None:
        B, S = _start(Z, y, R, p)
    else:
        B, S = (np.array(a, dtype=float) for a in start)
    S, ridged = _regularize(S, False)
    Zpinv = np.linalg.pinv(Z)
    ll = _loglik(pats, B, S)
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        M = Z @ B.T
        Yhat = np.where(R, y, M)
        Cacc = np.zeros((K, K))
        for g in pats:
            if not len(g.mi):
                continue
            Som = S[g.om]
            coef = np.linalg.solve(S[g.oo], Som).T
            Mg = M[g.rows]
            Yhat[g.rmi] = Mg[:, g.mi] + (g.yo - Mg[:, g.oi]) @ coef.T
            Cacc[g.mm] += g.n * (S[g.mm] - coef @ Som)
        B = (Zpinv @ Yhat).T
        E = Yhat - Z @ B.T
        S, ridged = _regularize((E.T @ E + Cacc) / n, ridged)
        ll_new = _loglik(pats, B, S)
        trace.append(ll_new)
        if abs(ll_new - ll) < tol:
            ll = ll_new
            converged = True
            break
        ll = ll_new
    # final GLS polish makes the beta score vanish exactly at the reported sigma
    B = _gls_beta(pats, S, K, p)
    ll = _loglik(pats, B, S)
    trace.append(ll)
    return B, S, ll, it, converged, np.array(trace)


def fit_mmrm(X, y, R, spec: DesignSpec | None = None, subset: str = "all",
             max_iter: int = 500, tol: float = 1e-8, reml: bool = False,
             start=None, index=None) -> ArmFit:
    """Fit the saturated-mean, unstructured-covariance model to one arm.

    Parameters
    ----------
    X, y, R : arrays for the subjects in the fitting subset
        Subjects with no observed post-baseline value are dropped; they carry
        no information under ignorability.
    subset : label recorded on the fit ("all" or "pattern-A")
    reml : scale the covariance by n/(n-p) after fitting
    start : optional (B, S) warm start, B of shape (K, m+1)

    Raises
    ------
    RankDeficient
        A visit has too few observations to identify its regression.
    SingularCovariance
        The covariance estimate stays singular after one ridge step.
    """
    spec = spec or DesignSpec()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    R = np.asarray(R, dtype=bool)
    idx = np.arange(len(y)) if index is None else np.asarray(index)
    keep = R.any(axis=1)
    X, y, R, idx = X[keep], y[keep], R[keep], idx[keep]
    Z = spec.matrix(X)
    n, p = Z.shape
    K = y.shape[1]
    if n < p:
        raise RankDeficient(f"{n} subjects cannot identify {p} coefficients per visit")
    for k in range(K):
        nk = R[:, k].sum()
        if nk == 0 or np.linalg.matrix_rank(Z[R[:, k]]) < p:
            raise RankDeficient(f"visit {k + 1} has {nk} observations; design not identifiable")
    y = np.where(R, y, 0.0)
    B, S, ll, it, conv, trace = _em(Z, y, R, max_iter, tol, start)
    if not conv:
        warnings.warn(f"EM did not converge in {max_iter} iterations", NotConvergedWarning)
    if reml:
        S = S * n / (n - p)
    return ArmFit(beta=B.ravel(), sigma=S, loglik=ll, iterations=it, converged=conv,
                  subset=subset, n_used=n, loglik_trace=trace, index=idx, spec=spec)


def fit_endpoint_regression(X, y_end, spec: DesignSpec | None = None, index=None) -> CrossSectionalFit:
    """OLS of the endpoint on ``[1, x]`` over an already-filtered subject set."""
    spec = spec or DesignSpec()
    Z = spec.matrix(np.asarray(X, dtype=float))
    n, p = Z.shape
    if n < p + 1:
        raise InsufficientRetrievedDropouts(n, p + 1)
    if np.linalg.matrix_rank(Z) < p:
        raise RankDeficient(f"endpoint regression design has rank below {p}")
    xtx_inv = np.linalg.inv(Z.T @ Z)
    coef = xtx_inv @ Z.T @ y_end
    resid = y_end - Z @ coef
    return CrossSectionalFit(beta_minus=coef, residual_variance=float(resid @ resid / (n - p)),
                             n_used=n, index=index, xtx_inv=xtx_inv)


@dataclass(frozen=True)
class UEEContributions:
    """Per-subject estimating functions ``psi`` (n x q) and the summed
    Jacobian ``bread`` (q x q); ``jacobian`` holds per-subject blocks when
    requested."""

    psi: np.ndarray
    bread: np.ndarray
    jacobian: np.ndarray | None = None


def uee_contributions(fit: ArmFit, X, y, R, beta=None, per_subject_jacobian=False) -> UEEContributions:
    """GLS estimating function with the fitted covariance plugged in.

    ``psi_j = Xo_j' So^{-1} (yo_j - Xo_j beta)``; its derivative with respect
    to beta is ``-Xo_j' So^{-1} Xo_j``. Subjects with no observed visit
    contribute zeros.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    R = np.asarray(R, dtype=bool)
    Z = fit.spec.matrix(X)
    n, p = Z.shape
    K = fit.K
    B = (fit.beta if beta is None else np.asarray(beta)).reshape(K, p)
    resid = np.where(R, y - Z @ B.T, 0.0)
    U = np.zeros((n, K))
    bread = np.zeros((K * p, K * p))
    jac = np.zeros((n, K * p, K * p)) if per_subject_jacobian else None
    for o, rows in _groups(R):
        if not o.any():
            continue
        W = np.zeros((K, K))
        W[np.ix_(o, o)] = np.linalg.inv(fit.sigma[np.ix_(o, o)])
        U[rows] = resid[rows] @ W
        Zg = Z[rows]
        bread -= np.kron(W, Zg.T @ Zg)
        if per_subject_jacobian:
            jac[rows] = -np.einsum("kl,ja,jb->jkalb", W, Zg, Zg).reshape(len(rows), K * p, K * p)
    psi = (U[:, :, None] * Z[:, None, :]).reshape(n, K * p)
    return UEEContributions(psi=psi, bread=bread, jacobian=jac)


def marginal_mean(fit: ArmFit, k: int, nu) -> float:
    """``b_{k,0} + nu' b_{k,1}`` for 1-based visit ``k``."""
    if not 1 <= k <= fit.K:
        raise ValueError(f"visit {k} outside 1..{fit.K}")
    row = fit.coef[k - 1]
    return float(row[0] + np.dot(np.atleast_1d(nu), row[1:]))
