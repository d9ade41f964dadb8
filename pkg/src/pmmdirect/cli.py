"""Command-line interface.

Subcommands ``estimate``, ``tipping``, ``simulate``, ``mi-compare`` and
``validate`` share the flags ``--seed``, ``--threads``, ``--out``,
``--format``, ``--alpha`` and ``--config``. A JSON config file supplies
defaults for any flag (keys are the flag names with dashes replaced by
underscores); flags given on the command line win.

Every run writes ``run_manifest.json`` next to its outputs with the resolved
configuration, package versions and a SHA-256 of each output file.

Exit status: 0 on success, 1 on a computational or I/O error (a JSON error
object is printed to stderr and partial outputs are removed), 2 on a usage
error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import platform
import sys
import warnings
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .data import PatternRule, Schema, derive_indicators, load_dataset, summarize_patterns
from .errors import IOFailure, PMMError
from .estimators import METHODS, Workspace, adjust_baseline, estimate
from .sensitivity import pvalue_grid, tipping_boundary
from .simulation import Scenario, keyed_rng, run_study
from .synthetic import shipped_paths

SCHEMA_VERSION = 1
EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2
_MI_PURPOSE = 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# report emission


def _sig6(obj):
    """Round every float in a JSON-able structure to 6 significant digits."""
    if isinstance(obj, dict):
        return {str(k): _sig6(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sig6(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _sig6(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return None if not math.isfinite(x) else float(f"{x:.6g}")
    return obj


class Reporter:
    """Writes result files into one directory and can remove them again."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.written: list[Path] = []
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise IOFailure(f"cannot create output directory {self.directory}: {exc}") from None

    def _target(self, name) -> Path:
        path = Path(name)
        return path if path.is_absolute() or path.parent != Path(".") else self.directory / path

    def csv(self, df: pd.DataFrame, name) -> Path:
        path = self._target(name)
        try:
            df.to_csv(path, index=False, float_format="%.6g")
        except OSError as exc:
            raise IOFailure(f"cannot write {path}: {exc}") from None
        self.written.append(path)
        return path

    def json(self, obj, name) -> Path:
        path = self._target(name)
        try:
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(_sig6(obj), fh, indent=2)
                fh.write("\n")
        except OSError as exc:
            raise IOFailure(f"cannot write {path}: {exc}") from None
        self.written.append(path)
        return path

    def table(self, df: pd.DataFrame, stem, fmt) -> Path:
        """One table as CSV or as a JSON list of records."""
        if fmt == "json":
            return self.json(dict(schema_version=SCHEMA_VERSION, rows=df.to_dict(orient="records")),
                             f"{stem}.json")
        return self.csv(df, f"{stem}.csv")

    def rollback(self):
        for path in self.written:
            path.unlink(missing_ok=True)
        self.written.clear()

    def manifest(self, args, argv):
        outputs = []
        for path in self.written:
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            outputs.append(dict(path=str(path), sha256=digest))
        config = {k: v for k, v in vars(args).items() if k != "func"}
        payload = dict(
            schema_version=SCHEMA_VERSION, command=args.command, argv=list(argv), seed=args.seed,
            config=config, outputs=outputs,
            versions=dict(pmmdirect=__version__, python=platform.python_version(), numpy=np.__version__,
                          scipy=scipy.__version__, pandas=pd.__version__),
        )
        path = self.directory / "run_manifest.json"
        try:
            path.write_text(json.dumps(payload, indent=2, default=str) + "\n", encoding="utf-8")
        except OSError as exc:
            raise IOFailure(f"cannot write {path}: {exc}") from None
        return path


# ---------------------------------------------------------------------------
# argument handling


def _range(text):
    try:
        a, b = (float(v) for v in str(text).split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a:b, got {text!r}") from None
    if not a < b:
        raise argparse.ArgumentTypeError(f"range {text!r} must be increasing")
    return a, b


def _methods(text):
    return [m.strip() for m in str(text).split(",") if m.strip()]


def _common(p):
    p.add_argument("--seed", type=int, default=1, help="master seed (default 1)")
    p.add_argument("--threads", type=int, default=1, help="worker processes for simulation")
    p.add_argument("--out", default=".", help="output directory (simulate also accepts a .csv path)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--alpha", type=float, default=0.05, help="two-sided level, in (0, 0.5)")
    p.add_argument("--config", help="JSON file of flag defaults")


def _data_flags(p):
    p.add_argument("--data", help="long-format CSV (default: the packaged example trial)")
    p.add_argument("--schema", help="column manifest JSON (default: <data stem>.json when present)")
    p.add_argument("--reference", help="reference arm label (overrides the manifest)")
    p.add_argument("--pattern-rule", choices=("a3-collapse", "explicit-column", "adherence-derived"),
                   help="how Pattern-A indicators are obtained (overrides the manifest)")
    p.add_argument("--missing-as-b", action="store_true", default=None,
                   help="treat every missing visit as Pattern B")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmmdirect", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="direct estimates with sandwich standard errors")
    _common(p)
    _data_flags(p)
    p.add_argument("--method", type=_methods, help=f"comma list from {','.join(METHODS)}")
    p.add_argument("--adjust-baseline", action="store_true", help="standardize to the pooled covariate mean")
    p.add_argument("--pooled-baseline", action="store_true", help="R2B anchor at the pooled baseline mean")
    p.add_argument("--dump-fits", action="store_true", help="write every regression fit to fits.json")
    p.add_argument("--dump-theta", action="store_true", help="write the stacked parameters to theta.json")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("tipping", help="delta-adjusted significance boundary and p-value grid")
    _common(p)
    _data_flags(p)
    p.add_argument("--method", default="rd", choices=METHODS)
    p.add_argument("--arm", help="treatment arm label (default: the last arm)")
    p.add_argument("--delta0-range", type=_range, default=(-5.0, 5.0), help="reference-arm penalties a:b")
    p.add_argument("--delta1-range", type=_range, default=(-5.0, 5.0), help="treatment-arm penalties a:b")
    p.add_argument("--resolution", type=int, default=201, help="grid points per axis")
    p.add_argument("--one-way", action="store_true", help="also write the treatment-only tipping points")
    p.add_argument("--pattern-b-only", action="store_true", help="penalize Pattern-B missing values only")
    p.set_defaults(func=cmd_tipping)

    p = sub.add_parser("simulate", help="Monte Carlo bias, SD, SE and coverage table")
    _common(p)
    p.add_argument("--scenario", choices=("null", "diff"), default="diff")
    p.add_argument("--kind", choices=("pmm", "rd"), default="pmm")
    p.add_argument("--reps", type=int, default=2000)
    p.add_argument("--methods", type=_methods, default=None, help="comma list of methods")
    p.add_argument("--mi", type=int, default=None, help="also run multiple imputation with m imputations")
    p.add_argument("--n-per-arm", type=int, default=100)
    p.add_argument("--n-oracle", type=int, default=1_000_000, help="subjects per arm for the true values")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("mi-compare", help="multiple-imputation comparator with Rubin pooling")
    _common(p)
    _data_flags(p)
    p.add_argument("--method", default="j2r", choices=[m for m in METHODS if m != "rd-pure"])
    p.add_argument("--imputations", type=int, default=200)
    p.add_argument("--at", choices=("pooled", "arm"), default="pooled",
                   help="covariate mean for the per-arm least-squares means")
    p.set_defaults(func=cmd_mi_compare)

    p = sub.add_parser("validate", help="check a dataset and summarize its patterns")
    _common(p)
    _data_flags(p)
    p.set_defaults(func=cmd_validate)
    return parser


def _apply_config(parser, argv):
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        with open(args.config, encoding="utf-8") as fh:
            config = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from None
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = set(config) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    converters = {"method": _methods if args.command == "estimate" else str, "methods": _methods,
                  "delta0_range": _range, "delta1_range": _range}
    sub.set_defaults(**{k: converters.get(k, lambda v: v)(v) if isinstance(v, str) else v
                        for k, v in config.items()})
    return parser.parse_args(argv)


def _validate(args):
    if not 0 < args.alpha < 0.5:
        raise UsageError("--alpha must lie in (0, 0.5)")
    if args.threads < 1:
        raise UsageError("--threads must be positive")
    for name in ("data", "schema", "config"):
        value = getattr(args, name, None)
        if value and not Path(value).is_file():
            raise UsageError(f"--{name} file not found: {value}")
    if args.command == "estimate":
        if not args.method:
            raise UsageError("--method needs at least one method")
        bad = [m for m in args.method if m not in METHODS]
        if bad:
            raise UsageError(f"unknown methods {bad}; choose from {', '.join(METHODS)}")
    if args.command == "simulate":
        if args.methods is None:
            args.methods = ["r2b"]
        if not args.methods:
            raise UsageError("--methods needs at least one method")
        bad = [m for m in args.methods if m not in METHODS]
        if bad:
            raise UsageError(f"unknown methods {bad}")
        if args.reps < 1:
            raise UsageError("--reps must be positive")
        if args.mi is not None and args.mi < 2:
            raise UsageError("--mi needs at least two imputations")
    if args.command == "mi-compare" and args.imputations < 2:
        raise UsageError("--imputations must be at least 2")
    if args.command == "tipping" and args.resolution < 2:
        raise UsageError("--resolution must be at least 2")


# ---------------------------------------------------------------------------
# commands


def _load(args, final_cells=False):
    """Dataset with indicators derived; the manifest rule applies unless overridden."""
    if args.data:
        csv = Path(args.data)
        sibling = csv.with_suffix(".json")
        schema_path = args.schema or (sibling if sibling.is_file() else None)
    else:
        csv, sibling = shipped_paths()
        schema_path = args.schema or sibling
    schema = Schema.from_json(schema_path) if schema_path else Schema()
    ds = load_dataset(csv, schema, reference=args.reference)
    rule = schema.pattern_rule() or PatternRule()
    mode = args.pattern_rule or rule.mode
    missing_as_b = rule.missing_as_b if args.missing_as_b is None else args.missing_as_b
    if mode == "a3-collapse":
        missing_as_b = False
    if final_cells:
        missing_as_b = False
    return derive_indicators(ds, PatternRule(mode=mode, missing_as_b=missing_as_b))


def _arm_tables(results, alpha):
    arms, cons = [], []
    for res in results:
        z = _z(alpha)
        for lab, m, s, n, p, t in zip(res.arm_labels, res.mu, res.se, res.n_arm, res.pi, res.tau):
            arms.append(dict(method=res.method, adjusted=res.adjusted, arm=lab, n=int(n), mean=m, se=s,
                             ci_low=m - z * s, ci_high=m + z * s, pi=p, tau=t))
        for c in res.contrasts(alpha):
            cons.append(dict(method=res.method, adjusted=res.adjusted, arm=c.label,
                             reference=res.arm_labels[0], estimate=c.estimate, se=c.se,
                             ci_low=c.ci_low, ci_high=c.ci_high, p=c.p))
    return pd.DataFrame(arms), pd.DataFrame(cons)


def _z(alpha):
    from scipy import stats

    return float(stats.norm.ppf(1 - alpha / 2))


def cmd_estimate(args, rep: Reporter):
    ds = _load(args)
    ws = Workspace(ds)
    results = []
    for method in args.method:
        kw = dict(pooled_baseline=True) if method == "r2b" and args.pooled_baseline else {}
        res = estimate(ws, method, **kw)
        results.append(adjust_baseline(res) if args.adjust_baseline else res)
    if args.format == "json":
        rep.json(dict(schema_version=SCHEMA_VERSION, alpha=args.alpha,
                      results=[r.to_dict(args.alpha) for r in results]), "estimate.json")
    else:
        arms, cons = _arm_tables(results, args.alpha)
        rep.csv(arms, "estimate_arms.csv")
        rep.csv(cons, "estimate_contrasts.csv")
    if args.dump_fits:
        fits = {}
        for (i, subset), fit in ws._fits.items():
            key = f"{ds.arm_labels[i]}:{subset}"
            if hasattr(fit, "to_dict"):
                fits[key] = fit.to_dict()
            else:
                fits[key] = dict(beta_minus=fit.beta_minus, residual_variance=fit.residual_variance,
                                 n_used=fit.n_used)
        rep.json(dict(schema_version=SCHEMA_VERSION, fits=fits), "fits.json")
    if args.dump_theta:
        rep.json(dict(schema_version=SCHEMA_VERSION,
                      stacks={r.method: r.stack.to_dict() for r in results if r.stack is not None}),
                 "theta.json")
    _, cons = _arm_tables(results, args.alpha)
    print(cons.to_string(index=False, float_format=lambda x: f"{x:.6g}"))


def _arm_number(ds, label):
    if label is None:
        return ds.arm_count - 1
    if label not in ds.arm_labels:
        raise UsageError(f"unknown arm {label!r}; arms are {list(ds.arm_labels)}")
    i = ds.arm_labels.index(label)
    if i == 0:
        raise UsageError("--arm must differ from the reference arm")
    return i


def cmd_tipping(args, rep: Reporter):
    ds = _load(args)
    arm = _arm_number(ds, args.arm)
    res = estimate(Workspace(ds), args.method)
    grid0 = np.linspace(*args.delta0_range, args.resolution)
    bound = tipping_boundary(res, args.alpha, grid0, arm=arm, pattern_b_only=args.pattern_b_only)
    pv = pvalue_grid(res, args.delta0_range, args.delta1_range, args.resolution, arm=arm,
                     pattern_b_only=args.pattern_b_only)
    one_way = pd.DataFrame(dict(delta0=0.0, delta1=bound.one_way))
    if args.format == "json":
        q = bound.quadratic
        rep.json(dict(schema_version=SCHEMA_VERSION, method=args.method, arm=ds.arm_labels[arm],
                      alpha=args.alpha, sign=bound.sign, one_way=list(bound.one_way),
                      variance_quadratic=dict(a0=q.a0, ai=q.ai, b0=q.b0, bi=q.bi, c=q.c, e=q.e),
                      boundary=bound.table.to_dict(orient="records"),
                      grid=pv.to_dict(orient="records")), "tipping.json")
    else:
        rep.csv(bound.table, "tipping_boundary.csv")
        rep.csv(pv, "tipping_grid.csv")
        if args.one_way:
            rep.csv(one_way, "tipping_one_way.csv")
    print(f"{args.method} {ds.arm_labels[arm]} vs {ds.arm_labels[0]}: one-way tipping points "
          + (", ".join(f"{x:.6g}" for x in bound.one_way) or "none"))


def cmd_simulate(args, rep: Reporter):
    sc = Scenario.standard(args.kind, args.scenario, n_per_arm=args.n_per_arm)
    study = run_study(sc, args.methods, args.reps, args.seed, mi_imputations=args.mi, alpha=args.alpha,
                      threads=args.threads, n_oracle=args.n_oracle)
    out = Path(args.out)
    if out.suffix in (".csv", ".json"):
        if args.format == "json" or out.suffix == ".json":
            rep.json(dict(schema_version=SCHEMA_VERSION, rows=study.table.to_dict(orient="records")),
                     out.resolve())
        else:
            rep.csv(study.table, out.resolve())
    else:
        rep.table(study.table, "simulation_table", args.format)
    print(study.table.to_string(index=False, float_format=lambda x: f"{x:.4g}"))


def cmd_mi_compare(args, rep: Reporter):
    from .mi import mi_estimate

    ds = _load(args)
    rng = keyed_rng(args.seed, 0, 0, _MI_PURPOSE)
    res = mi_estimate(ds, args.method, args.imputations, rng, at=args.at, alpha=args.alpha)
    direct_kw = dict(pooled_baseline=True) if args.method == "r2b" else {}
    direct = estimate(Workspace(ds), args.method, **direct_kw)
    fits = res.per_imputation
    labels = ds.arm_labels
    rows = []
    for j in range(args.imputations):
        for i, lab in enumerate(labels):
            rows.append(dict(imputation=j + 1, quantity=lab, estimate=fits.means[j, i],
                             variance=fits.mean_var[j, i]))
        for i in range(1, len(labels)):
            rows.append(dict(imputation=j + 1, quantity=f"{labels[i]}-{labels[0]}",
                             estimate=fits.diffs[j, i - 1], variance=fits.diff_var[j, i - 1]))
    rep.table(pd.DataFrame(rows), "mi_per_imputation", args.format)
    pooled = []
    for lab, pr, d, s in zip(labels, res.arms, direct.mu, direct.se):
        pooled.append(dict(quantity=lab, **pr.to_dict(), direct_estimate=d, direct_se=s))
    for c, pr in zip(direct.contrasts(args.alpha), res.contrasts):
        pooled.append(dict(quantity=f"{c.label}-{labels[0]}", **pr.to_dict(),
                           direct_estimate=c.estimate, direct_se=c.se))
    rep.json(dict(schema_version=SCHEMA_VERSION, method=args.method, imputations=args.imputations,
                  at=args.at, seed=args.seed, pooled=pooled), "mi_pooled.json")
    print(pd.DataFrame(pooled)[["quantity", "estimate", "se", "direct_estimate", "direct_se"]]
          .to_string(index=False, float_format=lambda x: f"{x:.6g}"))


def cmd_validate(args, rep: Reporter):
    ds = _load(args, final_cells=True)
    table = summarize_patterns(ds).table()
    rep.table(table, "patterns", args.format)
    final = table[table["visit"] == ds.schedule.post_baseline[-1]]
    print(f"{ds.n} subjects, {ds.arm_count} arms, visits {list(ds.schedule.labels)}; "
          f"reference {ds.arm_labels[0]!r}")
    print(final.to_string(index=False, float_format=lambda x: f"{x:.4g}"))


# ---------------------------------------------------------------------------


def _error(exc) -> int:
    print(json.dumps(dict(error=type(exc).__name__, message=str(exc))), file=sys.stderr)
    return EXIT_ERROR


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        _validate(args)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"pmmdirect: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    rep = None
    try:
        out = Path(args.out)
        rep = Reporter(out.parent if args.command == "simulate" and out.suffix in (".csv", ".json") else out)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            args.func(args, rep)
        rep.manifest(args, argv)
    except UsageError as exc:
        if rep is not None:
            rep.rollback()
        print(f"pmmdirect: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PMMError, ValueError, np.linalg.LinAlgError) as exc:
        if rep is not None:
            rep.rollback()
        return _error(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
