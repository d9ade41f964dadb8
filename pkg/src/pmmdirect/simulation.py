"""Monte Carlo study harness for the two-arm, four-visit trial design.

Outcomes (baseline plus four visits) are multivariate normal. Dropout is
monotone: at each visit a subject still observed stays observed with
probability ``expit(g1 + g2 * Y_{k-1})``. The retrieved-dropout design
generates treatment adherence the same way, observes adherers always and
non-adherers with probability one half, fixes the number of retrieved
dropouts per arm, and halves the final change from baseline of non-adherers.

Random numbers come from counter-based Philox streams keyed by
``(seed, replicate, arm, purpose)``. Every subject consumes a fixed block of
uniforms, so subject ``j`` always sees the same draws regardless of arm
size, worker count or execution order.
"""
from __future__ import annotations

import dataclasses
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit, ndtri

from .data import LongitudinalDataset, VisitSchedule
from .errors import InfeasibleTarget, PMMError, StudyAborted
from .estimators import Workspace, estimate

MU0 = (0.0, 1.0, 1.8, 2.5, 3.0)
MU1 = (0.0, 1.3, 2.3, 3.2, 4.0)
SIGMA = (2.0, 1.8, 2.0, 2.1, 2.2)
RHO = (
    (1.0, 0.6, 0.3, 0.2, 0.1),
    (0.6, 1.0, 0.7, 0.5, 0.2),
    (0.3, 0.7, 1.0, 0.6, 0.4),
    (0.2, 0.5, 0.6, 1.0, 0.5),
    (0.1, 0.2, 0.4, 0.5, 1.0),
)
_N_UNIFORM = 11  # per subject: 5 outcomes, 4 visit transitions, 1 retrieval, 1 spare

_PURPOSE = {"subjects": 0, "rd-count": 1, "mi": 2, "bootstrap": 3}


def keyed_rng(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for one ``(seed, key...)`` stream."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, key)])))


@dataclass(frozen=True)
class Scenario:
    """Generative parameters for one simulation setting.

    ``dropout`` and ``adherence`` hold one ``(intercept, slope)`` pair per
    arm for the logit of remaining observed (or adherent) at each visit.
    """

    kind: str = "pmm"                 # "pmm" or "rd"
    effect: str = "diff"              # "null" or "diff"
    n_per_arm: int = 100
    mu0: tuple = MU0
    mu1: tuple = MU1
    sigma: tuple = SIGMA
    rho: tuple = RHO
    dropout: tuple = ((3.2, -0.2), (2.8, -0.2))
    adherence: tuple = ((4.0, -0.2), (3.6, -0.2))
    retrieval: float = 0.5
    rd_target: int | None = 5
    deterioration: float = 0.5

    def __post_init__(self):
        if self.kind not in ("pmm", "rd"):
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.effect not in ("null", "diff"):
            raise ValueError(f"unknown effect {self.effect!r}")
        rho = np.asarray(self.rho)
        if not np.allclose(rho, rho.T) or np.linalg.eigvalsh(rho)[0] <= 0:
            raise ValueError("correlation matrix must be symmetric positive definite")
        if np.any(np.asarray(self.sigma) <= 0):
            raise ValueError("standard deviations must be positive")
        if not len(self.mu0) == len(self.mu1) == len(self.sigma) == len(rho):
            raise ValueError("inconsistent parameter lengths")

    @classmethod
    def standard(cls, kind="pmm", effect="diff", **kw) -> "Scenario":
        """Standard settings: the null effect uses the placebo parameters in both arms."""
        if kind == "pmm":
            drop = ((3.0, -0.2), (3.0, -0.2)) if effect == "null" else ((3.2, -0.2), (2.8, -0.2))
            kw.setdefault("dropout", drop)
        else:
            adh = ((4.0, -0.2), (4.0, -0.2)) if effect == "null" else ((4.0, -0.2), (3.6, -0.2))
            kw.setdefault("adherence", adh)
        return cls(kind=kind, effect=effect, **kw)

    @property
    def K(self) -> int:
        return len(self.mu0) - 1

    def arm_mean(self, arm: int) -> np.ndarray:
        return np.asarray(self.mu0 if arm == 0 or self.effect == "null" else self.mu1, dtype=float)

    @property
    def covariance(self) -> np.ndarray:
        s = np.asarray(self.sigma, dtype=float)
        return np.asarray(self.rho) * np.outer(s, s)

    def label(self) -> str:
        return f"{self.kind}-{self.effect}"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True, eq=False)
class ArmDraw:
    """Full (counterfactual-free) data for one arm before masking."""

    Y: np.ndarray   # (n, K+1) raw outcomes including baseline
    R: np.ndarray   # (n, K)
    A: np.ndarray   # (n, K)


def _draw_arm(sc: Scenario, arm: int, n: int, rng: np.random.Generator) -> ArmDraw:
    K = sc.K
    U = rng.random((n, _N_UNIFORM))
    Z = ndtri(U[:, :K + 1])
    Y = sc.arm_mean(arm) + Z @ np.linalg.cholesky(sc.covariance).T
    trans = U[:, K + 1:2 * K + 1]
    if sc.kind == "pmm":
        g1, g2 = sc.dropout[arm]
        stay = trans < expit(g1 + g2 * Y[:, :K])
        R = np.logical_and.accumulate(stay, axis=1)
        return ArmDraw(Y, R, R.copy())
    e1, e2 = sc.adherence[arm]
    stay = trans < expit(e1 + e2 * Y[:, :K])
    A = np.logical_and.accumulate(stay, axis=1)
    # non-adherers are observed from discontinuation onward with one coin flip
    retrieved = U[:, 2 * K + 1] < sc.retrieval
    R = A | retrieved[:, None]
    return ArmDraw(Y, R, A)


def enforce_rd_count(A, R, target: int, rng: np.random.Generator):
    """Force exactly ``target`` retrieved dropouts at the final visit.

    With ``a`` retrieved dropouts and ``b`` missing non-adherers: when
    ``a > target`` the surplus become missing at the final visit; when
    ``a + b >= target`` enough missing non-adherers become fully observed;
    otherwise all of them do and adherers are switched to non-adherent at
    the final visit to fill the gap.

    Returns new ``(A, R)`` arrays for one arm.
    """
    A = np.array(A, dtype=bool)
    R = np.array(R, dtype=bool)
    if len(A) < target:
        raise InfeasibleTarget(f"arm of {len(A)} subjects cannot hold {target} retrieved dropouts")
    rd = np.flatnonzero(~A[:, -1] & R[:, -1])
    miss = np.flatnonzero(~A[:, -1] & ~R[:, -1])
    a, b = len(rd), len(miss)
    if a > target:
        drop = rng.choice(rd, a - target, replace=False)
        R[drop, -1] = False
    elif a < target:
        if a + b >= target:
            R[rng.choice(miss, target - a, replace=False)] = True
        else:
            R[miss] = True
            adherers = np.flatnonzero(A[:, -1])
            need = target - a - b
            if len(adherers) < need:
                raise InfeasibleTarget("not enough adherers to reach the retrieved-dropout target")
            A[rng.choice(adherers, need, replace=False), -1] = False
    return A, R


def _finish(sc: Scenario, draws: list[ArmDraw], ids=None) -> LongitudinalDataset:
    Y = np.vstack([d.Y for d in draws])
    R = np.vstack([d.R for d in draws])
    A = np.vstack([d.A for d in draws])
    arm = np.concatenate([np.full(len(d.Y), i) for i, d in enumerate(draws)])
    change = Y[:, 1:] - Y[:, :1]
    if sc.kind == "rd":
        change[:, -1] = np.where(A[:, -1], change[:, -1], sc.deterioration * change[:, -1])
    if ids is None:
        ids = np.array([f"{i}-{j}" for i, d in enumerate(draws) for j in range(len(d.Y))])
    return LongitudinalDataset(
        schedule=VisitSchedule(tuple(f"t{k}" for k in range(sc.K + 1))),
        subject_ids=ids, arm=arm, X=Y[:, :1], y=change, R=R, A=A,
        arm_labels=("placebo", "experimental"), covariate_names=("baseline",),
        baseline_col=0, response="change",
    )


def generate_dataset(sc: Scenario, seed: int, replicate: int = 0, n_per_arm: int | None = None,
                     enforce: bool = True) -> LongitudinalDataset:
    """One simulated trial on the change-from-baseline scale.

    The baseline outcome is the only covariate. The retrieved-dropout
    target is enforced (when configured) before the deterioration is applied.
    """
    n = sc.n_per_arm if n_per_arm is None else n_per_arm
    draws = []
    for arm in (0, 1):
        d = _draw_arm(sc, arm, n, keyed_rng(seed, replicate, arm, _PURPOSE["subjects"]))
        if sc.kind == "rd" and enforce and sc.rd_target is not None:
            A, R = enforce_rd_count(d.A, d.R, sc.rd_target,
                                    keyed_rng(seed, replicate, arm, _PURPOSE["rd-count"]))
            d = ArmDraw(d.Y, R, A)
        draws.append(d)
    return _finish(sc, draws)


def cohort_proportions(sc: Scenario, n: int = 100_000, seed: int = 0) -> pd.DataFrame:
    """Final-visit missing and adherent percentages for large cohorts per arm."""
    ds = generate_dataset(sc, seed, replicate=0, n_per_arm=n, enforce=False)
    rows = []
    for i, lab in enumerate(("P", "E")):
        r = ds.arm_index(i)
        rows.append(dict(group=lab, missing_pct=100 * (1 - ds.R[r, -1].mean()),
                         adherent_pct=100 * ds.A[r, -1].mean()))
    return pd.DataFrame(rows)


def bootstrap_se(ds: LongitudinalDataset, methods, n_boot: int = 2000, seed: int = 1,
                 replicate: int = 0, keep_rd_count: bool = False) -> tuple[dict, dict]:
    """Nonparametric bootstrap SEs of (reference mean, arm-1 mean, contrast).

    Subjects are resampled with replacement within each arm. With
    ``keep_rd_count`` the retrieved dropouts (non-adherent and observed at the
    final visit) form their own stratum, mirroring designs that fix their
    number. Fits are warm
    started from the original data. Resamples on which an estimator raises a
    library error are skipped for that estimator and counted.

    Returns
    -------
    se : {method: (3,) array}
    failures : {method: count}
    """
    base = Workspace(ds)
    starts = {}
    for method in methods:
        estimate(base, method, variance=False)
    for (i, subset), fit in base._fits.items():
        if subset in ("all", "pattern-A"):
            starts[(i, subset)] = (fit.coef, fit.sigma)
    rng = keyed_rng(seed, replicate, 0, _PURPOSE["bootstrap"])
    rows = [ds.arm_index(i) for i in range(ds.arm_count)]
    if keep_rd_count:
        rd = ~base.ds.A[:, -1] & base.ds.R[:, -1]
        rows = [part for r in rows for part in (r[rd[r]], r[~rd[r]]) if len(part)]
    draws = {m: [] for m in methods}
    failures = {m: 0 for m in methods}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for _ in range(n_boot):
            idx = np.concatenate([r[rng.integers(0, len(r), len(r))] for r in rows])
            ws = Workspace(ds.take(idx))
            ws.warm_start(starts)
            for method in methods:
                try:
                    mu = estimate(ws, method, variance=False).mu
                except PMMError:
                    failures[method] += 1
                    continue
                draws[method].append((mu[0], mu[1], mu[1] - mu[0]))
    se = {m: np.asarray(v).std(axis=0, ddof=1) for m, v in draws.items()}
    return se, failures


# ---------------------------------------------------------------------------
# population values


def _plug_in(method: str, ch, y0, A, R, ref):
    """Estimand from full data of one arm; ``ref`` carries reference-arm pieces."""
    aK, rK = A[:, -1], R[:, -1]
    full = ch.mean()
    pi = np.mean(~aK & ~rK)
    if method == "mar":
        return full
    if method == "r2b":
        return (1 - pi) * full
    if method == "j2r":
        return (1 - pi) * full + pi * ref["mar"]
    if method == "pw":
        if ref is None:
            return full
        return (1 - pi) * ch[aK].mean() + pi * (ref["b0"] + ref["b1"] * y0[~aK & ~rK].mean())
    if method in ("rd", "rd-pure"):
        phi = aK.mean()
        if phi == 1:
            return ch[aK].mean()
        b1, b0 = np.polyfit(y0[~aK], ch[~aK], 1)
        return phi * ch[aK].mean() + (1 - phi) * (b0 + b1 * y0[~aK].mean())
    raise ValueError(method)


def _truth_batch(sc, method, n, seed, batch):
    d0 = _draw_arm(sc, 0, n, keyed_rng(seed, batch, 0, 9))
    d1 = _draw_arm(sc, 1, n, keyed_rng(seed, batch, 1, 9))
    out = []
    refs = None
    for arm, d in enumerate((d0, d1)):
        ch = d.Y[:, -1] - d.Y[:, 0]
        if sc.kind == "rd":
            ch = np.where(d.A[:, -1], ch, sc.deterioration * ch)
        y0 = d.Y[:, 0]
        if arm == 0:
            b1, b0 = np.polyfit(y0, ch, 1)
            refs = dict(mar=ch.mean(), b0=b0, b1=b1)
            out.append(_plug_in(method, ch, y0, d.A, d.R, None if method == "pw" else refs))
        else:
            out.append(_plug_in(method, ch, y0, d.A, d.R, refs))
    return np.array([out[0], out[1], out[1] - out[0]])


def true_value(sc: Scenario, method: str, n_oracle: int = 1_000_000, seed: int = 20240601,
               batches: int = 10) -> dict:
    """Population estimand by plugging full-data quantities from a giant cohort.

    The cohort is split into ``batches`` equal parts; the reported MC SE is
    the between-batch standard deviation divided by the square root of the
    batch count. Returns ``{"P": (value, se), "E": ..., "E-P": ...}``.
    """
    if n_oracle < batches:
        raise ValueError("n_oracle must exceed the batch count")
    per = n_oracle // batches
    vals = np.array([_truth_batch(sc, method, per, seed, b) for b in range(batches)])
    mean = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / np.sqrt(batches)
    return {g: (float(m), float(s)) for g, m, s in zip(("P", "E", "E-P"), mean, se)}


# ---------------------------------------------------------------------------
# study


@dataclass
class StudyResult:
    """Per-replicate records plus the aggregated metric table."""

    scenario: Scenario
    records: pd.DataFrame
    table: pd.DataFrame
    failures: dict = field(default_factory=dict)
    truths: dict = field(default_factory=dict)


def _replicate(args):
    sc, methods, seed, rep, mi_m, alpha = args
    ds = generate_dataset(sc, seed, rep)
    ws = Workspace(ds)
    rows, failed = [], []
    z = float(ndtri(1 - alpha / 2))
    for method in methods:
        try:
            res = estimate(ws, method)
            c = res.contrast(1, alpha)
            for g, est, se in (("P", res.mu[0], res.se[0]), ("E", res.mu[1], res.se[1]),
                               ("E-P", c.estimate, c.se)):
                rows.append(dict(rep=rep, approach="Direct", method=method, group=g, estimate=est,
                                 se=se, lo=est - z * se, hi=est + z * se))
        except PMMError as exc:
            failed.append((rep, "Direct", method, type(exc).__name__))
        if mi_m:
            from .mi import mi_estimate

            try:
                pooled = mi_estimate(ds, method, mi_m, keyed_rng(seed, rep, 0, _PURPOSE["mi"]))
                for g, pr in zip(("P", "E", "E-P"), pooled):
                    rows.append(dict(rep=rep, approach="MI", method=method, group=g,
                                     estimate=pr.estimate, se=pr.se, lo=pr.ci[0], hi=pr.ci[1]))
            except PMMError as exc:
                failed.append((rep, "MI", method, type(exc).__name__))
    return rows, failed


def summarize(records: pd.DataFrame, truths: dict) -> pd.DataFrame:
    """Bias, SD, mean SE and coverage with Monte Carlo standard errors."""
    out = []
    for (approach, method, group), g in records.groupby(["approach", "method", "group"], sort=False):
        true = truths[method][group][0]
        est = g["estimate"].to_numpy()
        se = g["se"].to_numpy()
        cover = ((g["lo"] <= true) & (true <= g["hi"])).to_numpy()
        n = len(g)
        sd = est.std(ddof=1)
        cp = cover.mean()
        out.append(dict(
            Method=approach, Estimator=method.upper(), Group=group, True_=true,
            Bias=est.mean() - true, SD=sd, SE=se.mean(), CP=cp, n=n,
            Bias_mcse=sd / np.sqrt(n), SD_mcse=sd / np.sqrt(2 * (n - 1)),
            SE_mcse=se.std(ddof=1) / np.sqrt(n), CP_mcse=np.sqrt(cp * (1 - cp) / n),
        ))
    return pd.DataFrame(out).rename(columns={"True_": "True"})


def run_study(sc: Scenario, methods=("r2b",), n_reps: int = 2000, seed: int = 1,
              mi_imputations: int | None = None, alpha: float = 0.05, threads: int = 1,
              n_oracle: int = 1_000_000, max_failure_rate: float = 0.01) -> StudyResult:
    """Simulate, estimate and aggregate.

    Failed replicates (any library error) are excluded and counted; the
    study aborts when the failure rate reaches ``max_failure_rate``.
    """
    if n_reps < 1:
        raise ValueError("n_reps must be positive")
    methods = tuple(methods)
    jobs = [(sc, methods, seed, rep, mi_imputations, alpha) for rep in range(n_reps)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if threads > 1:
            with ProcessPoolExecutor(threads) as pool:
                results = list(pool.map(_replicate, jobs, chunksize=max(1, n_reps // (4 * threads))))
        else:
            results = [_replicate(j) for j in jobs]
    rows = [r for res, _ in results for r in res]
    failed = [f for _, fl in results for f in fl]
    failures = {}
    for _, approach, method, kind in failed:
        failures[(approach, method)] = failures.get((approach, method), 0) + 1
    for key, count in failures.items():
        if count / n_reps >= max_failure_rate:
            raise StudyAborted(f"{count} of {n_reps} replicates failed for {key[0]} {key[1]}")
    truths = {m: true_value(sc, m, n_oracle) for m in methods}
    records = pd.DataFrame(rows)
    table = summarize(records, truths)
    table.insert(0, "Setting", sc.label())
    return StudyResult(sc, records, table, failures, truths)
