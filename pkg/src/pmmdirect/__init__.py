"""Direct estimation for pattern-mixture models in longitudinal trials.

Point estimates under return-to-baseline, jump-to-reference, placebo-washout
and retrieved-dropout assumptions come from repeated-measures fits, with
sandwich variances over the stacked estimating equations. Delta-adjusted
tipping-point boundaries, a multiple-imputation comparator and a Monte Carlo
study harness are included.
"""
from .data import (
    LongitudinalDataset,
    PatternRule,
    PatternSummary,
    Schema,
    SubjectRecord,
    VisitSchedule,
    derive_indicators,
    load_dataset,
    summarize_patterns,
    write_dataset,
)
from .errors import PMMError
from .estimators import (
    METHODS,
    Contrast,
    EstimandResult,
    Workspace,
    adjust_baseline,
    contrast,
    estimate,
    estimate_j2r,
    estimate_mar,
    estimate_pw,
    estimate_r2b,
    estimate_rd,
    estimate_rd_pure,
)
from .mi import MIResult, PooledResult, mi_estimate, rubin_pool
from .mmrm import ArmFit, CrossSectionalFit, DesignSpec, fit_endpoint_regression, fit_mmrm, marginal_mean
from .sandwich import ThetaStack, assemble_stack, delta_method
from .sensitivity import (
    DeltaAdjustment,
    TippingBoundary,
    VarianceQuadratic,
    delta_adjust,
    pvalue_grid,
    tipping_boundary,
    variance_quadratic,
)
from .simulation import Scenario, bootstrap_se, generate_dataset, run_study, true_value

__version__ = "0.1.0"
