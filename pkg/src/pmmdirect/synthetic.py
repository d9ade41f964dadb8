"""Synthetic three-arm diabetes trial used as the shipped example dataset.

The outcome is HbA1c (%) at baseline and weeks 4, 13 and 26. Final-visit
pattern counts per arm are fixed exactly; outcomes are simulated and each
arm is then shifted by a constant so that the retrieved-dropout estimates
land on chosen target means.
"""
from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from .data import LongitudinalDataset, PatternRule, Schema, VisitSchedule, derive_indicators, load_dataset

ARMS = ("placebo", "dula_0.75mg", "dula_1.5mg")
WEEKS = ("0", "4", "13", "26")

# final-visit counts: adherent observed, adherent missing, retrieved dropout, discontinued missing
PATTERN_COUNTS = {
    "placebo": (122, 2, 5, 12),
    "dula_0.75mg": (255, 1, 9, 15),
    "dula_1.5mg": (254, 0, 9, 16),
}
# adherent mean change trajectory and the extra change after discontinuation
_ADHERENT_PATH = {
    "placebo": (-0.45, -0.70, -0.80),
    "dula_0.75mg": (-0.80, -1.25, -1.33),
    "dula_1.5mg": (-0.95, -1.45, -1.57),
}
_OFF_TREATMENT_GAP = {"placebo": 1.5, "dula_0.75mg": 0.5, "dula_1.5mg": 0.5}
TARGET_RD_MEANS = {"placebo": -0.66, "dula_0.75mg": -1.30, "dula_1.5mg": -1.53}

CSV_NAME = "award1_lookalike.csv"
MANIFEST_NAME = "award1_lookalike.json"
PATTERN_RULE = PatternRule(mode="adherence-derived", missing_as_b=True)


def _arm(rng, label, n_each):
    n = sum(n_each)
    K = 3
    base = rng.normal(8.1, 0.9, n)
    sd = np.array([0.65, 0.8, 0.85])
    corr = 0.6 + 0.4 * np.eye(K)
    E = rng.multivariate_normal(np.zeros(K), corr * np.outer(sd, sd), n)
    change = np.asarray(_ADHERENT_PATH[label]) - 0.3 * (base - 8.1)[:, None] + E
    cell = np.repeat(np.arange(4), n_each)
    adh = np.ones((n, K), dtype=bool)
    obs = np.ones((n, K), dtype=bool)
    off = cell >= 2
    stop = rng.integers(0, K, n)  # visit index at which treatment stops
    for j in np.flatnonzero(off):
        adh[j, stop[j]:] = False
        change[j, stop[j]:] += _OFF_TREATMENT_GAP[label] * np.linspace(0.5, 1.0, K - stop[j])
        if cell[j] == 3:
            obs[j, stop[j]:] = False
    obs[cell == 1, -1] = False
    return base, change, adh, obs


def build_award1_lookalike(seed: int = 1) -> LongitudinalDataset:
    """Simulate the example trial (raw scale, adherence recorded per visit)."""
    rng = np.random.default_rng(seed)
    parts = [_arm(rng, lab, PATTERN_COUNTS[lab]) for lab in ARMS]
    arm = np.concatenate([np.full(len(p[0]), i) for i, p in enumerate(parts)])
    base = np.concatenate([p[0] for p in parts])
    change = np.vstack([p[1] for p in parts])
    adh = np.vstack([p[2] for p in parts])
    obs = np.vstack([p[3] for p in parts])
    ids = np.array([f"S{j + 1:04d}" for j in range(len(arm))])

    def make(ch):
        y = np.round(base[:, None] + ch, 3)
        return LongitudinalDataset(
            schedule=VisitSchedule(WEEKS), subject_ids=ids, arm=arm, X=np.round(base, 3)[:, None],
            y=np.where(obs, y, 0.0), R=obs, adherence=adh, arm_labels=ARMS,
            covariate_names=("y_0",), baseline_col=0, response="raw",
        )

    from .estimators import estimate_rd

    ds = make(change)
    res = estimate_rd(derive_indicators(ds.to_change(), PATTERN_RULE), variance=False)
    shift = np.array([TARGET_RD_MEANS[lab] for lab in ARMS]) - res.mu
    return make(change + shift[arm][:, None])


def schema() -> Schema:
    return Schema(subject="subject", arm="arm", visit="week", outcome="hba1c", adherent="adherent",
                  covariates=[], visits=list(WEEKS), arms=list(ARMS), reference="placebo",
                  include_baseline=True, response="change",
                  pattern=dict(mode=PATTERN_RULE.mode, missing_as_b=PATTERN_RULE.missing_as_b))


def write_award1_lookalike(directory, seed: int = 1) -> Path:
    """Write the CSV and its manifest into ``directory``; returns the CSV path."""
    from .data import write_dataset

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sc = schema()
    path = write_dataset(build_award1_lookalike(seed), directory / CSV_NAME, sc)
    sc.to_json(directory / MANIFEST_NAME)
    return path


def shipped_paths() -> tuple[Path, Path]:
    """Locations of the packaged example CSV and manifest."""
    root = resources.files("pmmdirect") / "data"
    return Path(str(root / CSV_NAME)), Path(str(root / MANIFEST_NAME))


def load_award1_lookalike() -> LongitudinalDataset:
    """Load the packaged example with indicators derived (missing means Pattern B)."""
    csv, manifest = shipped_paths()
    sc = Schema.from_json(manifest)
    return derive_indicators(load_dataset(csv, sc), sc.pattern_rule())
