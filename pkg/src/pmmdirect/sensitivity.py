"""Delta-adjusted sensitivity analysis and tipping-point boundaries.

A penalty ``delta_i`` added to every imputed outcome of arm ``i`` moves the
arm mean by ``delta_i * q_i`` where ``q_i`` is the arm's proportion of
imputed subjects at the final visit (Pattern-B missing plus Pattern-A
missing, or Pattern-B missing alone on request). Because ``q`` is itself
estimated, the contrast variance is a quadratic in ``(delta_0, delta_i)``.
The tipping boundary is the set of penalties at which the contrast is just
significant; it is solved column by column in closed form.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import stats

from .errors import NoBoundary, PreconditionViolated
from .estimators import EstimandResult


@dataclass(frozen=True)
class DeltaAdjustment:
    delta0: float = 0.0
    delta1: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.delta0) and np.isfinite(self.delta1)):
            raise ValueError("delta values must be finite")


@dataclass(frozen=True)
class AdjustedContrast:
    estimate: float
    se: float
    p: float


def _pieces(result: EstimandResult, arm: int, pattern_b_only: bool):
    if result.grads is None or result.stack is None:
        raise PreconditionViolated("delta adjustment needs an unadjusted result with its stack")
    if not 0 < arm < result.arm_count:
        raise ValueError(f"arm must be in 1..{result.arm_count - 1}")
    G = result.grads
    gq = G["pi"] if pattern_b_only else G["pi"] + G["tau"]
    q = result.pi if pattern_b_only else result.pi + result.tau
    gd = G["mu"][arm] - G["mu"][0]
    d = float(result.mu[arm] - result.mu[0])
    return d, gd, q[0], q[arm], gq[0], gq[arm]


@dataclass(frozen=True)
class VarianceQuadratic:
    """``Var(diff) = a0 d0^2 + ai di^2 + b0 d0 + bi di + e d0 di + c``.

    The cross coefficient ``e`` is zero whenever the two arms' proportions
    are independent, which holds for the stacked sandwich.
    """

    a0: float
    ai: float
    b0: float
    bi: float
    c: float
    e: float = 0.0

    def __call__(self, delta0, delta1):
        d0 = np.asarray(delta0, dtype=float)
        d1 = np.asarray(delta1, dtype=float)
        return (self.a0 * d0 ** 2 + self.ai * d1 ** 2 + self.b0 * d0 + self.bi * d1
                + self.e * d0 * d1 + self.c)


def variance_quadratic(result: EstimandResult, arm: int = 1, pattern_b_only: bool = False) -> VarianceQuadratic:
    """Coefficients of the contrast variance as a function of the penalties."""
    _, gd, _, _, g0, gi = _pieces(result, arm, pattern_b_only)
    V = result.stack.cov
    return VarianceQuadratic(
        a0=float(g0 @ V @ g0), ai=float(gi @ V @ gi),
        b0=float(-2 * gd @ V @ g0), bi=float(2 * gd @ V @ gi),
        c=float(gd @ V @ gd), e=float(-2 * g0 @ V @ gi),
    )


def delta_adjust(result: EstimandResult, d: DeltaAdjustment, arm: int = 1,
                 pattern_b_only: bool = False) -> AdjustedContrast:
    """Contrast after shifting imputed outcomes of arm 0 by ``delta0`` and arm ``arm`` by ``delta1``."""
    est0, gd, q0, qi, g0, gi = _pieces(result, arm, pattern_b_only)
    est = est0 + d.delta1 * qi - d.delta0 * q0
    g = gd + d.delta1 * gi - d.delta0 * g0
    var = float(g @ result.stack.cov @ g)
    se = float(np.sqrt(max(var, 0.0)))
    if se > 0:
        p = float(2 * stats.norm.sf(abs(est) / se))
    else:
        p = 1.0 if est == 0 else 0.0
    return AdjustedContrast(float(est), se, p)


@dataclass
class TippingBoundary:
    """Boundary points ``(delta0, delta1)`` where the contrast is just significant.

    ``table`` has one row per ``delta0`` with up to two roots (NaN when the
    column has fewer). ``sign`` is +1 when the boundary solves
    ``estimate + z SE = 0`` (favourable negative contrast) and -1 for
    ``estimate - z SE = 0``.
    """

    alpha: float
    arm: int
    sign: int
    table: pd.DataFrame
    one_way: list
    quadratic: VarianceQuadratic

    @property
    def points(self) -> list[tuple[float, float]]:
        out = []
        for row in self.table.itertuples(index=False):
            for r in (row.delta1_root1, row.delta1_root2):
                if np.isfinite(r):
                    out.append((row.delta0, r))
        return out


def _solve_column(u, qi, quad: VarianceQuadratic, d0, z, s):
    """Roots in ``delta1`` of ``u + qi*d1 + s*z*sqrt(V(d0, d1)) = 0``."""
    lin_v = quad.bi + quad.e * d0
    const_v = quad.a0 * d0 ** 2 + quad.b0 * d0 + quad.c
    A = qi ** 2 - z ** 2 * quad.ai
    B = 2 * u * qi - z ** 2 * lin_v
    C = u ** 2 - z ** 2 * const_v
    scale = max(abs(A), abs(B), abs(C), 1e-300)
    if abs(A) <= 1e-14 * scale:
        if abs(B) <= 1e-14 * scale:
            return []
        cands = [-C / B]
    else:
        disc = B * B - 4 * A * C
        if disc < 0:
            return []
        sq = np.sqrt(disc)
        # numerically stable pair
        t = -0.5 * (B + np.copysign(sq, B))
        cands = [t / A, C / t] if t != 0 else [-B / (2 * A)]

    def f(x):
        return u + qi * x + s * z * np.sqrt(max(float(quad(d0, x)), 0.0))

    roots = []
    for x in cands:
        v = max(float(quad(d0, x)), 0.0)
        # squaring admits roots of u + qi*x - s*z*SE = 0; keep the signed ones
        if s * (u + qi * x) > 1e-9 * max(1.0, z * np.sqrt(v)):
            continue
        for _ in range(8):  # Newton polish on the un-squared equation
            fx = f(x)
            if abs(fx) < 1e-13:
                break
            v = max(float(quad(d0, x)), 1e-300)
            deriv = qi + s * z * (2 * quad.ai * x + lin_v) / (2 * np.sqrt(v))
            if deriv == 0:
                break
            x = x - fx / deriv
        if abs(f(x)) < 1e-9:
            roots.append(float(x))
    roots = sorted(roots)
    if len(roots) == 2 and abs(roots[1] - roots[0]) < 1e-9 * max(1.0, abs(roots[0])):
        roots = roots[:1]
    return roots


def tipping_boundary(result: EstimandResult, alpha: float = 0.05, delta0_grid=None, arm: int = 1,
                     direction: str = "auto", pattern_b_only: bool = False) -> TippingBoundary:
    """Solve the significance boundary for each ``delta0`` in the grid.

    Parameters
    ----------
    direction : "auto" uses the sign of the unadjusted contrast; "negative"
        means smaller outcomes favour the treatment, "positive" the opposite.

    Raises
    ------
    NoBoundary
        The penalties cannot move the contrast (no imputed subjects in
        either arm) so significance can never change.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    d, _, q0, qi, _, _ = _pieces(result, arm, pattern_b_only)
    quad = variance_quadratic(result, arm, pattern_b_only)
    if direction == "auto":
        s = 1 if d < 0 else -1
    elif direction in ("negative", "positive"):
        s = 1 if direction == "negative" else -1
    else:
        raise ValueError(f"unknown direction {direction!r}")
    if qi == 0 and quad.ai == 0 and q0 == 0 and quad.a0 == 0:
        raise NoBoundary("no imputed outcomes in either arm; penalties have no effect")
    z = stats.norm.ppf(1 - alpha / 2)
    grid = np.linspace(-5, 5, 201) if delta0_grid is None else np.asarray(delta0_grid, dtype=float)
    rows = []
    for d0 in grid:
        roots = _solve_column(d - d0 * q0, qi, quad, d0, z, s)
        roots = roots + [np.nan] * (2 - len(roots))
        rows.append(dict(delta0=float(d0), delta1_root1=roots[0], delta1_root2=roots[1]))
    table = pd.DataFrame(rows)
    one = _solve_column(d, qi, quad, 0.0, z, s)
    if qi == 0 and quad.ai == 0 and not one and table["delta1_root1"].isna().all():
        raise NoBoundary("the treatment-arm penalty cannot move the contrast")
    return TippingBoundary(alpha, arm, s, table, one, quad)


def boundary_residual(result: EstimandResult, boundary: TippingBoundary, pattern_b_only=False) -> np.ndarray:
    """Un-squared boundary equation evaluated at every emitted point."""
    z = stats.norm.ppf(1 - boundary.alpha / 2)
    out = []
    for d0, d1 in boundary.points:
        a = delta_adjust(result, DeltaAdjustment(d0, d1), boundary.arm, pattern_b_only)
        out.append(a.estimate + boundary.sign * z * a.se)
    return np.array(out)


def pvalue_grid(result: EstimandResult, delta0_range=(-5, 5), delta1_range=(-5, 5), resolution: int = 201,
                arm: int = 1, pattern_b_only: bool = False) -> pd.DataFrame:
    """Two-sided p-values over a rectangle of penalties (long format)."""
    d, _, q0, qi, _, _ = _pieces(result, arm, pattern_b_only)
    quad = variance_quadratic(result, arm, pattern_b_only)
    d0 = np.linspace(*delta0_range, resolution)
    d1 = np.linspace(*delta1_range, resolution)
    D0, D1 = np.meshgrid(d0, d1, indexing="ij")
    est = d + D1 * qi - D0 * q0
    se = np.sqrt(np.maximum(quad(D0, D1), 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(se > 0, 2 * stats.norm.sf(np.abs(est) / se), np.where(est == 0, 1.0, 0.0))
    return pd.DataFrame(dict(delta0=D0.ravel(), delta1=D1.ravel(), p=p.ravel()))
