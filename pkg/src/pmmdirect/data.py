"""Longitudinal trial data: representation, CSV ingestion and pattern indicators.

A dataset is stored column-wise as numpy arrays. Outcome presence is tracked by
the boolean mask ``R``; entries of ``y`` where ``R`` is false carry no meaning
and every routine in the package reads them through the mask.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import (
    DuplicateRow,
    IncompleteBaseline,
    PatternViolation,
    SchemaError,
)

MISSING_TOKENS = ("", "NA")


@dataclass(frozen=True)
class VisitSchedule:
    """Ordered visit labels ``t0, t1, ..., tK``; ``t0`` is baseline."""

    labels: tuple[str, ...]

    def __post_init__(self):
        if len(self.labels) < 2:
            raise SchemaError("schedule needs a baseline and at least one visit")
        if len(set(self.labels)) != len(self.labels):
            raise SchemaError(f"duplicate visit labels in {self.labels}")

    @property
    def K(self) -> int:
        return len(self.labels) - 1

    @property
    def baseline(self) -> str:
        return self.labels[0]

    @property
    def post_baseline(self) -> tuple[str, ...]:
        return self.labels[1:]


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    arm: int
    X: np.ndarray
    y: np.ndarray
    R: np.ndarray
    A: np.ndarray | None


@dataclass(frozen=True)
class PatternRule:
    """How the Pattern-A indicator is obtained.

    ``mode`` is one of

    * ``"a3-collapse"``: A := R. With ``strict`` set, an existing adherence
      indicator that marks an observed visit as Pattern B raises
      :class:`PatternViolation`, since retrieved dropouts cannot exist when
      every Pattern-B value is missing.
    * ``"explicit-column"``: A is the adherence column as given.
    * ``"adherence-derived"``: A is the adherence column forced monotone
      (once non-adherent, always non-adherent).

    ``missing_as_b`` additionally moves every missing visit into Pattern B;
    ``enforce_monotone`` rejects non-monotone explicit indicators.
    """

    mode: str = "a3-collapse"
    enforce_monotone: bool = False
    missing_as_b: bool = False
    strict: bool = False

    def __post_init__(self):
        if self.mode not in ("a3-collapse", "explicit-column", "adherence-derived"):
            raise ValueError(f"unknown pattern rule mode {self.mode!r}")


def _readonly(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LongitudinalDataset:
    """Per-subject outcome vectors with arm, covariates and indicators.

    Attributes
    ----------
    schedule : VisitSchedule
    subject_ids : (n,) array of str
    arm : (n,) int array, 0 is the reference arm
    X : (n, m) baseline covariates, never missing
    y : (n, K) outcomes at post-baseline visits
    R : (n, K) bool, True where the outcome is observed
    A : (n, K) bool or None, True for Pattern A
    adherence : (n, K) bool or None, raw adherence column as read
    arm_labels : original arm labels, index = dense arm code
    covariate_names : names of the X columns
    baseline_col : index of the baseline outcome within X, or None
    response : "change" if y is change from baseline, else "raw"
    """

    schedule: VisitSchedule
    subject_ids: np.ndarray
    arm: np.ndarray
    X: np.ndarray
    y: np.ndarray
    R: np.ndarray
    A: np.ndarray | None = None
    adherence: np.ndarray | None = None
    arm_labels: tuple[str, ...] = ()
    covariate_names: tuple[str, ...] = ()
    baseline_col: int | None = None
    response: str = "raw"

    def __post_init__(self):
        n, K = np.shape(self.y)
        if K != self.schedule.K:
            raise SchemaError(f"outcome matrix has {K} visits, schedule has {self.schedule.K}")
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        R = np.asarray(self.R, dtype=bool)
        y = np.where(R, np.asarray(self.y, dtype=float), 0.0)
        if not np.all(np.isfinite(y)):
            raise SchemaError("non-finite observed outcome")
        if not np.all(np.isfinite(X)):
            raise IncompleteBaseline("baseline covariates must be complete and finite")
        arm = np.asarray(self.arm, dtype=int)
        n_arms = int(arm.max()) + 1 if n else 0
        if n == 0 or arm.min() < 0 or np.any(np.bincount(arm, minlength=n_arms) == 0):
            raise SchemaError("every arm 0..I needs at least one subject")
        labels = tuple(self.arm_labels) or tuple(str(i) for i in range(n_arms))
        if len(labels) != n_arms:
            raise SchemaError("arm_labels does not match the arm codes")
        names = tuple(self.covariate_names) or tuple(f"x{a}" for a in range(X.shape[1]))
        if self.response not in ("raw", "change"):
            raise SchemaError(f"unknown response scale {self.response!r}")
        set_ = object.__setattr__
        set_(self, "X", _readonly(X))
        set_(self, "y", _readonly(y))
        set_(self, "R", _readonly(R))
        set_(self, "arm", _readonly(arm))
        set_(self, "subject_ids", _readonly(np.asarray(self.subject_ids, dtype=str)))
        set_(self, "arm_labels", labels)
        set_(self, "covariate_names", names)
        if self.A is not None:
            set_(self, "A", _readonly(np.asarray(self.A, dtype=bool)))
        if self.adherence is not None:
            set_(self, "adherence", _readonly(np.asarray(self.adherence, dtype=bool)))

    @property
    def n(self) -> int:
        return len(self.arm)

    @property
    def K(self) -> int:
        return self.schedule.K

    @property
    def m(self) -> int:
        return self.X.shape[1]

    @property
    def arm_count(self) -> int:
        return len(self.arm_labels)

    def subject(self, j: int) -> SubjectRecord:
        return SubjectRecord(
            subject_id=str(self.subject_ids[j]),
            arm=int(self.arm[j]),
            X=self.X[j],
            y=self.y[j],
            R=self.R[j],
            A=None if self.A is None else self.A[j],
        )

    def replace(self, **changes) -> "LongitudinalDataset":
        return dataclasses.replace(self, **changes)

    def take(self, index) -> "LongitudinalDataset":
        """Subset (or resample) subjects; arm coding is preserved."""
        index = np.asarray(index)
        pick = lambda a: None if a is None else a[index]
        return dataclasses.replace(
            self,
            subject_ids=self.subject_ids[index],
            arm=self.arm[index],
            X=self.X[index],
            y=self.y[index],
            R=self.R[index],
            A=pick(self.A),
            adherence=pick(self.adherence),
        )

    def arm_index(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.arm == i)

    def baseline_outcome(self) -> np.ndarray:
        if self.baseline_col is None:
            raise SchemaError("dataset has no baseline outcome column")
        return self.X[:, self.baseline_col]

    def to_change(self) -> "LongitudinalDataset":
        """Return the dataset with outcomes expressed as change from baseline."""
        if self.response == "change":
            return self
        y0 = self.baseline_outcome()
        return dataclasses.replace(self, y=np.where(self.R, self.y - y0[:, None], 0.0),
                                   response="change")


# ---------------------------------------------------------------------------
# ingestion

@dataclass
class Schema:
    """Column mapping for long-format CSV files.

    The manifest JSON written next to a dataset uses the same keys.
    """

    subject: str = "subject"
    arm: str = "arm"
    visit: str = "visit"
    outcome: str = "y"
    adherent: str | None = "adherent"
    covariates: list[str] = field(default_factory=list)
    visits: list[str] | None = None
    arms: list[str] | None = None
    reference: str | None = None
    include_baseline: bool = True
    response: str = "change"
    pattern: dict | None = None

    def pattern_rule(self) -> PatternRule | None:
        """Indicator rule declared in the manifest, if any."""
        return None if self.pattern is None else PatternRule(**self.pattern)

    @classmethod
    def from_json(cls, path) -> "Schema":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known - {"schema_version"}
        if unknown:
            raise SchemaError(f"unknown manifest keys: {sorted(unknown)}")
        return cls(**{k: v for k, v in raw.items() if k in known})

    def to_json(self, path):
        payload = {"schema_version": 1, **dataclasses.asdict(self)}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)


def _visit_order(values, declared):
    if declared is not None:
        return [str(v) for v in declared]
    uniq = list(dict.fromkeys(values))
    try:
        return sorted(uniq, key=float)
    except ValueError:
        return uniq


def load_dataset(path, schema: Schema | None = None, reference: str | None = None) -> LongitudinalDataset:
    """Read a long-format CSV (one row per subject and visit).

    The baseline visit (first in schedule order) supplies the baseline outcome,
    which is prepended to the covariates unless ``schema.include_baseline`` is
    false. Empty cells and ``NA`` mean missing.
    """
    schema = schema or Schema()
    reference = reference if reference is not None else schema.reference
    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    required = [schema.subject, schema.arm, schema.visit, schema.outcome, *schema.covariates]
    missing_cols = [c for c in required if c not in df.columns]
    if missing_cols:
        raise SchemaError(f"missing columns: {missing_cols}")
    has_adh = schema.adherent is not None and schema.adherent in df.columns

    dup = df.duplicated([schema.subject, schema.visit])
    if dup.any():
        row = df[dup].iloc[0]
        raise DuplicateRow(f"duplicate row for subject {row[schema.subject]!r} visit {row[schema.visit]!r}")

    visits = _visit_order(df[schema.visit].tolist(), schema.visits)
    unknown_visits = set(df[schema.visit]) - set(visits)
    if unknown_visits:
        raise SchemaError(f"visits not in schedule: {sorted(unknown_visits)}")
    schedule = VisitSchedule(tuple(visits))

    arm_values = list(dict.fromkeys(df[schema.arm]))
    if schema.arms is not None:
        bad = set(arm_values) - set(schema.arms)
        if bad:
            raise SchemaError(f"unknown arm labels: {sorted(bad)}")
        arm_values = list(schema.arms)
    if reference is None:
        raise SchemaError("a reference arm must be designated")
    if reference not in arm_values:
        raise SchemaError(f"reference arm {reference!r} not present")
    labels = [reference] + [a for a in arm_values if a != reference]
    code = {a: i for i, a in enumerate(labels)}

    subjects = list(dict.fromkeys(df[schema.subject]))
    sidx = {s: j for j, s in enumerate(subjects)}
    vidx = {v: k for k, v in enumerate(visits)}
    n, K = len(subjects), schedule.K

    def num(col):
        vals = df[col].str.strip()
        miss = vals.isin(MISSING_TOKENS).to_numpy()
        out = np.zeros(len(vals))
        try:
            out[~miss] = vals[~miss].astype(float).to_numpy()
        except ValueError as exc:
            raise SchemaError(f"non-numeric value in column {col!r}: {exc}") from None
        return out, ~miss

    rows_j = df[schema.subject].map(sidx).to_numpy()
    rows_k = df[schema.visit].map(vidx).to_numpy()
    yv, ypresent = num(schema.outcome)

    arm = np.full(n, -1)
    for j, a in zip(rows_j, df[schema.arm]):
        c = code[a]
        if arm[j] not in (-1, c):
            raise SchemaError(f"subject {subjects[j]!r} changes arm")
        arm[j] = c

    yfull = np.zeros((n, K + 1))
    rfull = np.zeros((n, K + 1), dtype=bool)
    yfull[rows_j, rows_k] = np.where(ypresent, yv, 0.0)
    rfull[rows_j, rows_k] = ypresent

    cov_cols = []
    for c in schema.covariates:
        v, present = num(c)
        col = np.full(n, np.nan)
        # subject-level covariates may be repeated on every row; take any present value
        for j, val, ok in zip(rows_j, v, present):
            if not ok:
                continue
            if not np.isnan(col[j]) and col[j] != val:
                raise SchemaError(f"covariate {c!r} varies within subject {subjects[j]!r}")
            col[j] = val
        cov_cols.append(col)
    names = list(schema.covariates)
    baseline_col = None
    if schema.include_baseline:
        cov_cols.insert(0, np.where(rfull[:, 0], yfull[:, 0], np.nan))
        names.insert(0, f"{schema.outcome}_{schedule.baseline}")
        baseline_col = 0
    X = np.column_stack(cov_cols) if cov_cols else np.zeros((n, 0))
    bad = np.flatnonzero(~np.isfinite(X).all(axis=1))
    if bad.size:
        raise IncompleteBaseline(f"subject {subjects[bad[0]]!r} is missing a baseline covariate")

    adherence = None
    if has_adh:
        av, apresent = num(schema.adherent)
        adh = np.ones((n, K + 1), dtype=bool)
        adh[rows_j, rows_k] = np.where(apresent, av != 0, True)
        adherence = adh[:, 1:]

    ds = LongitudinalDataset(
        schedule=schedule,
        subject_ids=np.array(subjects),
        arm=arm,
        X=X,
        y=yfull[:, 1:],
        R=rfull[:, 1:],
        adherence=adherence,
        arm_labels=tuple(labels),
        covariate_names=tuple(names),
        baseline_col=baseline_col,
        response="raw",
    )
    if schema.response == "change":
        if baseline_col is None:
            raise SchemaError("change-from-baseline response requires the baseline outcome")
        ds = ds.to_change()
    return ds


def write_dataset(ds: LongitudinalDataset, path, schema: Schema | None = None):
    """Write ``ds`` in long format; ``load_dataset`` with the same schema reads it back.

    Outcomes are always written on the raw scale so that the baseline row
    carries the baseline outcome.
    """
    schema = schema or Schema(response=ds.response)
    y = ds.y
    if ds.response == "change":
        y = np.where(ds.R, ds.y + ds.baseline_outcome()[:, None], 0.0)
    extra_names = [nm for a, nm in enumerate(ds.covariate_names) if a != ds.baseline_col]
    extra_idx = [a for a in range(ds.m) if a != ds.baseline_col]
    cov_names = list(schema.covariates) or extra_names
    if len(cov_names) != len(extra_idx):
        raise SchemaError("schema covariates do not match the dataset")
    fmt = repr
    rows = []
    for j in range(ds.n):
        base = {
            schema.subject: ds.subject_ids[j],
            schema.arm: ds.arm_labels[ds.arm[j]],
        }
        covs = {nm: fmt(float(ds.X[j, a])) for nm, a in zip(cov_names, extra_idx)}
        for k, label in enumerate(ds.schedule.labels):
            row = dict(base)
            row[schema.visit] = label
            if k == 0:
                row[schema.outcome] = "" if ds.baseline_col is None else fmt(float(ds.X[j, ds.baseline_col]))
                adh = True
            else:
                row[schema.outcome] = fmt(float(y[j, k - 1])) if ds.R[j, k - 1] else ""
                src = ds.adherence if ds.adherence is not None else ds.A
                adh = True if src is None else bool(src[j, k - 1])
            if schema.adherent is not None:
                row[schema.adherent] = "1" if adh else "0"
            row.update(covs)
            rows.append(row)
    cols = [schema.subject, schema.arm, schema.visit, schema.outcome]
    if schema.adherent is not None:
        cols.append(schema.adherent)
    cols += cov_names
    pd.DataFrame(rows, columns=cols).to_csv(path, index=False)
    return Path(path)


# ---------------------------------------------------------------------------
# indicators

def _is_monotone(a: np.ndarray) -> np.ndarray:
    """Row-wise check that a boolean matrix never switches from False to True."""
    return ~np.any(a[:, 1:] & ~a[:, :-1], axis=1)


def derive_indicators(ds: LongitudinalDataset, rule: PatternRule | None = None) -> LongitudinalDataset:
    rule = rule or PatternRule()
    R = ds.R
    if rule.mode == "a3-collapse":
        if rule.strict:
            src = ds.adherence if ds.adherence is not None else ds.A
            if src is not None and np.any(~src & R):
                raise PatternViolation(
                    "observed Pattern-B values (retrieved dropouts) are impossible under A3"
                )
        A = R.copy()
    else:
        src = ds.adherence if ds.adherence is not None else ds.A
        if src is None:
            raise PatternViolation(f"rule {rule.mode!r} needs an adherence column")
        A = src.copy()
        if rule.mode == "adherence-derived":
            A = np.logical_and.accumulate(A, axis=1)
        elif rule.enforce_monotone and not np.all(_is_monotone(A)):
            bad = np.flatnonzero(~_is_monotone(A))[0]
            raise PatternViolation(f"non-monotone pattern indicator for subject {ds.subject_ids[bad]!r}")
        if rule.missing_as_b:
            A &= R
    return ds.replace(A=A)


@dataclass(frozen=True)
class PatternSummary:
    """Per-arm, per-visit counts of the four indicator cells.

    ``counts[i, k]`` holds (A=1&R=1, A=1&R=0, A=0&R=1, A=0&R=0).
    """

    counts: np.ndarray
    arm_sizes: np.ndarray
    arm_labels: tuple[str, ...]
    visit_labels: tuple[str, ...]

    @property
    def pi(self):
        return self.counts[..., 3] / self.arm_sizes[:, None]

    @property
    def tau(self):
        return self.counts[..., 1] / self.arm_sizes[:, None]

    @property
    def phi(self):
        return (self.counts[..., 0] + self.counts[..., 1]) / self.arm_sizes[:, None]

    def table(self) -> pd.DataFrame:
        rows = []
        for i, arm in enumerate(self.arm_labels):
            for k, visit in enumerate(self.visit_labels):
                c = self.counts[i, k]
                rows.append(dict(arm=arm, visit=visit, n=int(self.arm_sizes[i]),
                                 adherent_observed=int(c[0]), adherent_missing=int(c[1]),
                                 retrieved_dropout=int(c[2]), discontinued_missing=int(c[3]),
                                 pi=self.pi[i, k], tau=self.tau[i, k], phi=self.phi[i, k]))
        return pd.DataFrame(rows)


def summarize_patterns(ds: LongitudinalDataset) -> PatternSummary:
    if ds.A is None:
        raise PatternViolation("pattern indicators have not been derived")
    A, R = ds.A, ds.R
    cells = np.stack([A & R, A & ~R, ~A & R, ~A & ~R], axis=-1)
    counts = np.stack([cells[ds.arm == i].sum(axis=0) for i in range(ds.arm_count)])
    sizes = np.bincount(ds.arm, minlength=ds.arm_count)
    return PatternSummary(counts, sizes, ds.arm_labels, ds.schedule.post_baseline)
