"""Direct pattern-mixture estimators with sandwich variances.

Every estimator is a smooth function of a stacked parameter vector built
from per-arm blocks (repeated-measures coefficients, endpoint regressions on
retrieved dropouts, pattern proportions, covariate means). Means are computed
with :class:`~pmmdirect.sandwich.Lin` values, so their gradients with respect
to the stack are exact and the delta method needs no finite differences.

All estimators target the final visit unless a ``visit`` is given (only the
MAR, return-to-baseline and jump-to-reference estimators accept one).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .data import LongitudinalDataset, PatternRule, derive_indicators
from .errors import (
    IllConditioned,
    InsufficientRetrievedDropouts,
    PreconditionViolated,
)
from .mmrm import DesignSpec, fit_endpoint_regression, fit_mmrm, uee_contributions
from .sandwich import Block, Lin, ThetaStack, assemble_stack, lin_dot, mean_block

METHODS = ("mar", "r2b", "j2r", "pw", "rd", "rd-pure")


@dataclass(frozen=True)
class Contrast:
    arm: int
    label: str
    estimate: float
    se: float
    ci_low: float
    ci_high: float
    p: float

    def to_dict(self) -> dict:
        return dict(arm=self.label, estimate=self.estimate, se=self.se,
                    ci_low=self.ci_low, ci_high=self.ci_high, p=self.p)


def normal_inference(estimate, se, alpha=0.05):
    """Two-sided normal-quantile confidence interval and p-value."""
    z = stats.norm.ppf(1 - alpha / 2)
    if se > 0:
        p = float(2 * stats.norm.sf(abs(estimate) / se))
    else:
        p = 1.0 if estimate == 0 else 0.0
    return estimate - z * se, estimate + z * se, p


@dataclass(frozen=True, eq=False)
class EstimandResult:
    """Per-arm means at one visit with their joint covariance.

    Attributes
    ----------
    mu : (I+1,) arm means
    cov : (I+1, I+1) covariance of ``mu`` (cross-arm terms included)
    nu : (I+1, m) arm covariate means
    grads : gradients of ``mu``, ``pi``, ``tau`` and ``nu`` with respect to
        the stacked parameters; ``None`` for baseline-adjusted results
    pi, tau : (I+1,) Pattern-B-missing and Pattern-A-missing proportions
    """

    method: str
    visit: int
    arm_labels: tuple[str, ...]
    mu: np.ndarray
    cov: np.ndarray
    nu: np.ndarray
    pi: np.ndarray
    tau: np.ndarray
    n_arm: np.ndarray
    pooled_mean: np.ndarray
    x_cov: np.ndarray
    stack: ThetaStack | None = field(repr=False, default=None)
    grads: dict | None = field(repr=False, default=None)
    adjusted: bool = False

    @property
    def arm_count(self) -> int:
        return len(self.mu)

    @property
    def q(self) -> np.ndarray:
        return self.pi + self.tau

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.cov), 0.0))

    def covariance(self, a: str, b: str) -> np.ndarray:
        """Covariance between two gradient families, e.g. ``("mu", "pi")``."""
        if self.grads is None or self.stack is None:
            raise PreconditionViolated("result carries no stacked gradients")
        return self.grads[a] @ self.stack.cov @ self.grads[b].T

    def joint_cov(self) -> np.ndarray:
        """Covariance of ``(mu_0..mu_I, nu_0..nu_I)`` with ``nu`` flattened arm-major."""
        G = np.vstack([self.grads["mu"], self.grads["nu"]])
        return G @ self.stack.cov @ G.T

    def contrast(self, i: int, alpha: float = 0.05) -> Contrast:
        return contrast(self, i, alpha)

    def contrasts(self, alpha: float = 0.05) -> list[Contrast]:
        return [contrast(self, i, alpha) for i in range(1, self.arm_count)]

    def to_dict(self, alpha: float = 0.05) -> dict:
        return dict(
            method=self.method, visit=self.visit, adjusted=self.adjusted,
            arms=[dict(arm=lab, mean=float(m), se=float(s), n=int(n), pi=float(p), tau=float(t))
                  for lab, m, s, n, p, t in zip(self.arm_labels, self.mu, self.se,
                                                self.n_arm, self.pi, self.tau)],
            cov=self.cov.tolist(),
            contrasts=[c.to_dict() for c in self.contrasts(alpha)],
        )


def contrast(result: EstimandResult, i: int, alpha: float = 0.05) -> Contrast:
    """Arm ``i`` minus the reference arm with normal-quantile inference."""
    if i == 0 or not 0 < i < result.arm_count:
        raise ValueError(f"contrast arm must be in 1..{result.arm_count - 1}")
    est = float(result.mu[i] - result.mu[0])
    if result.grads is not None and result.stack is not None:
        g = result.grads["mu"][i] - result.grads["mu"][0]
        var = float(g @ result.stack.cov @ g)
    else:
        C = result.cov
        var = C[i, i] + C[0, 0] - 2 * C[i, 0]
    se = float(np.sqrt(max(var, 0.0)))
    lo, hi, p = normal_inference(est, se, alpha)
    return Contrast(i, result.arm_labels[i], est, se, lo, hi, p)


class Workspace:
    """Fits and estimating-function blocks for one dataset, computed once.

    Parameters
    ----------
    ds : dataset; indicators are derived with the A3 collapse when absent
    spec : covariate selection for every regression
    reml : apply the n/(n-p) covariance multiplier to the repeated-measures fits
    """

    def __init__(self, ds: LongitudinalDataset, spec: DesignSpec | None = None, reml: bool = False,
                 rule: PatternRule | None = None):
        if ds.A is None:
            ds = derive_indicators(ds, rule)
        self.ds = ds
        self.spec = spec or DesignSpec()
        self.reml = reml
        self.rows = [ds.arm_index(i) for i in range(ds.arm_count)]
        self._fits = {}
        self._blocks = {}
        self._starts = {}

    @property
    def K(self) -> int:
        return self.ds.K

    def arm_data(self, i):
        r = self.rows[i]
        return self.ds.X[r], self.ds.y[r], self.ds.R[r], self.ds.A[r]

    def warm_start(self, starts: dict):
        """Seed repeated-measures fits with ``{(arm, subset): (B, S)}``."""
        self._starts.update(starts)

    def fit(self, i: int, subset: str):
        key = (i, subset)
        if key not in self._fits:
            X, y, R, A = self.arm_data(i)
            if subset == "pattern-A":
                sel = A[:, -1]
                X, y, R = X[sel], y[sel], R[sel]
            self._fits[key] = fit_mmrm(X, y, R, self.spec, subset=subset, reml=self.reml,
                                       start=self._starts.get(key))
        return self._fits[key]

    def endpoint_fit(self, i: int):
        key = (i, "rd")
        if key not in self._fits:
            X, y, R, A = self.arm_data(i)
            sel = ~A[:, -1] & R[:, -1]
            try:
                self._fits[key] = fit_endpoint_regression(X[sel], y[sel, -1], self.spec,
                                                          index=np.flatnonzero(sel))
            except InsufficientRetrievedDropouts as exc:
                raise InsufficientRetrievedDropouts(exc.count, exc.required, arm=i) from None
        return self._fits[key]

    def block(self, i: int, name: str) -> Block:
        key = (i, name)
        if key not in self._blocks:
            self._blocks[key] = self._make_block(i, name)
        return self._blocks[key]

    def _make_block(self, i, name) -> Block:
        X, y, R, A = self.arm_data(i)
        n = len(X)
        aK, rK = A[:, -1], R[:, -1]
        if name in ("beta_all", "beta_A"):
            subset = "all" if name == "beta_all" else "pattern-A"
            fit = self.fit(i, subset)
            sel = np.ones(n, dtype=bool) if subset == "all" else aK
            u = uee_contributions(fit, X[sel], y[sel], R[sel])
            psi = np.zeros((n, u.psi.shape[1]))
            psi[sel] = u.psi
            return Block(i, name, fit.beta.copy(), psi, u.bread)
        if name == "beta_minus":
            fit = self.endpoint_fit(i)
            Z = self.spec.matrix(X)
            sel = ~aK & rK
            resid = np.where(sel, y[:, -1] - Z @ fit.beta_minus, 0.0)
            Zs = Z[sel]
            return Block(i, name, fit.beta_minus.copy(), Z * resid[:, None], -(Zs.T @ Zs))
        cov_cols = self.spec.covariate_columns(self.ds.m)
        Xc = X[:, cov_cols]
        if name == "pi":
            return mean_block(i, name, (~A & ~R).astype(float))
        if name == "tau":
            return mean_block(i, name, (A & ~R).astype(float))
        if name == "phi":
            return mean_block(i, name, A.astype(float))
        if name == "nu":
            return mean_block(i, name, Xc)
        masks = {"nu_A1": aK, "nu_A0": ~aK, "nu_B": ~aK & ~rK, "nu_R0": ~rK}
        if name in masks:
            return mean_block(i, name, Xc, masks[name], allow_empty=True)
        if name == "completer":
            return mean_block(i, name, y[:, -1], rK, allow_empty=True)
        if name == "nu_full":
            return mean_block(i, name, X)
        raise KeyError(name)


def _stack(ws: Workspace, names_per_arm, variance=True) -> ThetaStack:
    blocks = [ws.block(i, nm) for i, names in enumerate(names_per_arm) for nm in names]
    if variance:
        return assemble_stack(blocks)
    index, pos = {}, 0
    for b in blocks:
        index[(b.arm, b.name)] = slice(pos, pos + b.size)
        pos += b.size
    return ThetaStack(np.concatenate([b.value for b in blocks]), None, index, tuple(blocks))


def _visit_mean(coef_lins, p, k, nu_lins):
    """``b_{k,0} + nu' b_{k,1}`` from a visit-major coefficient block."""
    row = coef_lins[(k - 1) * p:k * p]
    return row[0] + lin_dot(row[1:], nu_lins)


def _pooled(stack, name, col, weights):
    out = None
    for i, w in enumerate(weights):
        term = stack.lin(i, name)[col] * w
        out = term if out is None else out + term
    return out


def _baseline_anchor(ws, stack, i, pooled):
    """Return-to-baseline mean on the analysis scale for arm ``i``."""
    ds = ws.ds
    if ds.baseline_col is None:
        raise PreconditionViolated("return-to-baseline needs the baseline outcome among the covariates")
    cols = ws.spec.covariate_columns(ds.m)
    if ds.baseline_col not in cols:
        raise PreconditionViolated("the baseline outcome must be a model covariate")
    b = cols.index(ds.baseline_col)
    own = stack.lin(i, "nu")[b]
    if not pooled:
        return Lin.const(0.0, stack.size) if ds.response == "change" else own
    w = np.array([len(r) for r in ws.rows], dtype=float)
    grand = _pooled(stack, "nu", b, w / w.sum())
    return grand - own if ds.response == "change" else grand


def _result(ws, method, visit, stack, mu_lins, variance):
    ds = ws.ds
    I1 = ds.arm_count
    k = visit
    P = stack.size
    pi, tau, nu = [], [], []
    for i in range(I1):
        pi.append(stack.lin(i, "pi")[k - 1])
        tau.append(stack.lin(i, "tau")[k - 1])
        nu.extend(stack.lin(i, "nu"))
    grads = dict(mu=np.vstack([x.grad for x in mu_lins]),
                 pi=np.vstack([x.grad for x in pi]),
                 tau=np.vstack([x.grad for x in tau]),
                 nu=np.vstack([x.grad for x in nu]).reshape(-1, P))
    mu = np.array([x.value for x in mu_lins])
    if variance:
        cov = grads["mu"] @ stack.cov @ grads["mu"].T
        cov = 0.5 * (cov + cov.T)
    else:
        cov = np.full((I1, I1), np.nan)
    Xc = ds.X[:, ws.spec.covariate_columns(ds.m)]
    return EstimandResult(
        method=method, visit=k, arm_labels=ds.arm_labels, mu=mu, cov=cov,
        nu=np.array([x.value for x in nu]).reshape(I1, -1),
        pi=np.array([x.value for x in pi]), tau=np.array([x.value for x in tau]),
        n_arm=np.array([len(r) for r in ws.rows]),
        pooled_mean=Xc.mean(axis=0), x_cov=np.atleast_2d(np.cov(Xc, rowvar=False, ddof=1)),
        stack=stack if variance else None, grads=grads,
    )


def _workspace(data, **kw) -> Workspace:
    return data if isinstance(data, Workspace) else Workspace(data, **kw)


def _check_visit(ws, visit):
    k = ws.K if visit is None else int(visit)
    if not 1 <= k <= ws.K:
        raise ValueError(f"visit {k} outside 1..{ws.K}")
    return k


def estimate_mar(data, visit=None, variance=True) -> EstimandResult:
    """Repeated-measures MAR mean at the arm covariate mean."""
    ws = _workspace(data)
    k = _check_visit(ws, visit)
    names = ["beta_all", "pi", "tau", "nu"]
    stack = _stack(ws, [names] * ws.ds.arm_count, variance)
    p = ws.spec.matrix(ws.ds.X[:1]).shape[1]
    mu = [_visit_mean(stack.lin(i, "beta_all"), p, k, stack.lin(i, "nu"))
          for i in range(ws.ds.arm_count)]
    return _result(ws, "mar", k, stack, mu, variance)


def estimate_r2b(data, visit=None, pooled_baseline=False, variance=True) -> EstimandResult:
    """Return to baseline: missing Pattern-B outcomes take the baseline mean.

    ``mu_i = (1 - pi_i) mu_i^MAR + pi_i b_i`` with ``b_i`` the arm baseline
    mean, or the mean pooled over arms when ``pooled_baseline`` is set. On
    the change-from-baseline scale the arm-specific anchor is zero.
    """
    ws = _workspace(data)
    k = _check_visit(ws, visit)
    names = ["beta_all", "pi", "tau", "nu"]
    stack = _stack(ws, [names] * ws.ds.arm_count, variance)
    p = ws.spec.matrix(ws.ds.X[:1]).shape[1]
    mu = []
    for i in range(ws.ds.arm_count):
        mar = _visit_mean(stack.lin(i, "beta_all"), p, k, stack.lin(i, "nu"))
        pi = stack.lin(i, "pi")[k - 1]
        mu.append((1 - pi) * mar + pi * _baseline_anchor(ws, stack, i, pooled_baseline))
    return _result(ws, "r2b", k, stack, mu, variance)


def estimate_j2r(data, visit=None, variance=True) -> EstimandResult:
    """Jump to reference: ``mu_i = (1 - pi_i) mu_i^MAR + pi_i mu_0^MAR``."""
    ws = _workspace(data)
    k = _check_visit(ws, visit)
    names = ["beta_all", "pi", "tau", "nu"]
    stack = _stack(ws, [names] * ws.ds.arm_count, variance)
    p = ws.spec.matrix(ws.ds.X[:1]).shape[1]
    mar = [_visit_mean(stack.lin(i, "beta_all"), p, k, stack.lin(i, "nu"))
           for i in range(ws.ds.arm_count)]
    mu = [mar[0]]
    for i in range(1, ws.ds.arm_count):
        pi = stack.lin(i, "pi")[k - 1]
        mu.append((1 - pi) * mar[i] + pi * mar[0])
    return _result(ws, "j2r", k, stack, mu, variance)


def estimate_pw(data, variance=True) -> EstimandResult:
    """Placebo washout at the final visit.

    Experimental arms: ``(1 - pi_i) mu_i^{MAR,A=1} + pi_i (b_0 + nu_B' b_1)``
    where ``(b_0, b_1)`` are the reference arm's final-visit coefficients and
    ``nu_B`` is the covariate mean of the arm's missing Pattern-B subjects.
    The reference arm keeps its MAR estimate.
    """
    ws = _workspace(data)
    K = ws.K
    I1 = ws.ds.arm_count
    names = [["beta_all", "pi", "tau", "nu"]] + [["beta_A", "pi", "tau", "nu", "nu_A1", "nu_B"]] * (I1 - 1)
    stack = _stack(ws, names, variance)
    p = ws.spec.matrix(ws.ds.X[:1]).shape[1]
    ref = stack.lin(0, "beta_all")
    mu = [_visit_mean(ref, p, K, stack.lin(0, "nu"))]
    for i in range(1, I1):
        pi = stack.lin(i, "pi")[K - 1]
        adherent = _visit_mean(stack.lin(i, "beta_A"), p, K, stack.lin(i, "nu_A1"))
        washout = _visit_mean(ref, p, K, stack.lin(i, "nu_B"))
        mu.append((1 - pi) * adherent + pi * washout)
    return _result(ws, "pw", K, stack, mu, variance)


def _rd_names(ws, i, base):
    """Skip the retrieved-dropout regression when an arm has no Pattern B."""
    if (~ws.ds.A[ws.rows[i], -1]).any():
        return base + ["beta_minus"]
    return base


def estimate_rd(data, variance=True) -> EstimandResult:
    """Retrieved dropout at the final visit.

    ``mu_i = phi_i mu_i^{MAR,A=1} + (1 - phi_i)(b0^- + nu_{A=0}' b1^-)``
    with ``b^-`` the endpoint regression on the arm's retrieved dropouts.
    """
    ws = _workspace(data)
    K = ws.K
    I1 = ws.ds.arm_count
    names = [_rd_names(ws, i, ["beta_A", "pi", "tau", "phi", "nu", "nu_A1", "nu_A0"]) for i in range(I1)]
    stack = _stack(ws, names, variance)
    p = ws.spec.matrix(ws.ds.X[:1]).shape[1]
    mu = []
    for i in range(I1):
        phi = stack.lin(i, "phi")[K - 1]
        adherent = _visit_mean(stack.lin(i, "beta_A"), p, K, stack.lin(i, "nu_A1"))
        if stack.has(i, "beta_minus"):
            bm = stack.lin(i, "beta_minus")
            nonadherent = bm[0] + lin_dot(bm[1:], stack.lin(i, "nu_A0"))
            mu.append(phi * adherent + (1 - phi) * nonadherent)
        else:
            mu.append(phi * adherent)
    return _result(ws, "rd", K, stack, mu, variance)


def estimate_rd_pure(data, variance=True) -> EstimandResult:
    """Retrieved dropout when every Pattern-A subject is observed.

    ``mu_i = (1 - pi_i) mean(completers) + pi_i (b0^- + nu_{R=0}' b1^-)``.
    """
    ws = _workspace(data)
    K = ws.K
    I1 = ws.ds.arm_count
    for i in range(I1):
        A, R = ws.ds.A[ws.rows[i], -1], ws.ds.R[ws.rows[i], -1]
        if np.any(A & ~R):
            raise PreconditionViolated(
                f"arm {ws.ds.arm_labels[i]!r} has missing Pattern-A outcomes; use estimate_rd")
    names = [_rd_names(ws, i, ["pi", "tau", "nu", "completer", "nu_R0"]) for i in range(I1)]
    stack = _stack(ws, names, variance)
    mu = []
    for i in range(I1):
        pi = stack.lin(i, "pi")[K - 1]
        comp = stack.lin(i, "completer")[0]
        if stack.has(i, "beta_minus"):
            bm = stack.lin(i, "beta_minus")
            mu.append((1 - pi) * comp + pi * (bm[0] + lin_dot(bm[1:], stack.lin(i, "nu_R0"))))
        else:
            mu.append((1 - pi) * comp)
    return _result(ws, "rd-pure", K, stack, mu, variance)


def estimate(data, method: str, **kw) -> EstimandResult:
    """Dispatch on a method name from :data:`METHODS`."""
    fn = {"mar": estimate_mar, "r2b": estimate_r2b, "j2r": estimate_j2r,
          "pw": estimate_pw, "rd": estimate_rd, "rd-pure": estimate_rd_pure}.get(method)
    if fn is None:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    return fn(data, **kw)


def adjust_baseline(result: EstimandResult, pooled_mean=None) -> EstimandResult:
    """Re-standardize the arm means to the pooled covariate mean.

    ``mu_adj = mu + S_yx S_xx^{-1} (xbar - nu)`` with the unconditional
    variance ``S_yy - S_yx S_xx^{-1} S_xy + n^{-1} S_yx S_xx^{-1} A' S_x A S_xx^{-1} S_xy``
    where ``A`` stacks one identity per arm and ``S_x`` is the sample
    covariance of the covariates.

    Raises
    ------
    IllConditioned
        The covariance of the covariate means has condition number above 1e12.
    """
    if result.adjusted:
        raise PreconditionViolated("result is already baseline adjusted")
    I1, m = result.nu.shape
    xbar = result.pooled_mean if pooled_mean is None else np.atleast_1d(np.asarray(pooled_mean, float))
    J = result.joint_cov()
    Syy, Syx, Sxx = J[:I1, :I1], J[:I1, I1:], J[I1:, I1:]
    if not np.isfinite(np.linalg.cond(Sxx)) or np.linalg.cond(Sxx) > 1e12:
        raise IllConditioned("covariance of the covariate means is ill conditioned")
    H = np.linalg.solve(Sxx, Syx.T).T  # S_yx S_xx^{-1}
    mu = result.mu + H @ (np.tile(xbar, I1) - result.nu.ravel())
    stackA = np.tile(np.eye(m), I1)
    n = int(result.n_arm.sum())
    V = Syy - H @ Syx.T + H @ stackA.T @ result.x_cov @ stackA @ H.T / n
    V = 0.5 * (V + V.T)
    return EstimandResult(
        method=result.method, visit=result.visit, arm_labels=result.arm_labels, mu=mu, cov=V,
        nu=np.tile(xbar, (I1, 1)), pi=result.pi, tau=result.tau, n_arm=result.n_arm,
        pooled_mean=xbar, x_cov=result.x_cov, stack=None, grads=None, adjusted=True,
    )
