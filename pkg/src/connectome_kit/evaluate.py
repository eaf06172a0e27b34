"""Cross-validation schemes, scoring and statistical analysis of runs.

Two validation schemes: inter-site (each fold holds out one whole
acquisition site, which needs at least 10 sites) and intra-site
(stratified shuffle splits preserving per-(site, condition) ratios).
Scores feed a sum-coded main-effects ANOVA with classical confidence
intervals, pairwise signed-rank comparisons with step-down correction,
and a per-level top-decile summary. A small provenance audit asserts
that every train-derived artifact was fitted on training subjects only.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats

__all__ = [
    "FoldPlan",
    "ScoreRecord",
    "EffectEstimate",
    "make_folds",
    "score",
    "dummy_chance",
    "learning_curve",
    "nested_training_subsets",
    "anova_effects",
    "wilcoxon_pairwise",
    "holm_bonferroni",
    "top_decile",
    "apply_subsample",
    "SUBSAMPLE_FILTERS",
    "audit_train_only",
    "LeakageError",
]

N_FOLDS = 10
MIN_INTER_SITE_SITES = 10
INTRA_SITE_TEST_FRACTION = 0.2


@dataclass
class FoldPlan:
    folds: list  # (train_ids tuple, test_ids tuple)
    scheme: str
    seed: int

    def __iter__(self):
        return iter(self.folds)

    def __len__(self):
        return len(self.folds)


@dataclass
class ScoreRecord:
    atlas_method: str
    n_regions: int
    matrix_kind: str
    classifier: str
    scheme: str
    subsample: int
    fold: int
    accuracy: float
    specificity: float
    sensitivity: float

    FIELDS = ("atlas_method", "n_regions", "matrix_kind", "classifier",
              "scheme", "subsample", "fold", "accuracy", "specificity",
              "sensitivity")

    def pipeline_key(self):
        return (self.atlas_method, self.n_regions, self.matrix_kind,
                self.classifier)


@dataclass
class EffectEstimate:
    factor: str
    level: str
    coefficient: float
    ci_low: float
    ci_high: float


# --- folds ---------------------------------------------------------------------


def make_folds(records, scheme, seed=0) -> FoldPlan:
    """Build the cross-validation plan for a list of subject records."""
    if scheme == "inter_site":
        return _inter_site_folds(records, seed)
    if scheme == "intra_site":
        return _intra_site_folds(records, seed)
    raise ValueError(f"unknown scheme {scheme!r}")


def _inter_site_folds(records, seed) -> FoldPlan:
    sites = {}
    for r in records:
        sites.setdefault(r.site_id, []).append(r.subject_id)
    if len(sites) < MIN_INTER_SITE_SITES:
        raise ValueError(
            f"inter-site cross-validation requires at least "
            f"{MIN_INTER_SITE_SITES} acquisition sites (got {len(sites)})")
    # hold out each of the 10 largest sites; ties go to the lower site id
    ranked = sorted(sites, key=lambda s: (-len(sites[s]), s))[:N_FOLDS]
    all_ids = [r.subject_id for r in records]
    folds = []
    for site in sorted(ranked):
        test = tuple(sorted(sites[site]))
        train = tuple(sorted(set(all_ids) - set(test)))
        folds.append((train, test))
    return FoldPlan(folds=folds, scheme="inter_site", seed=seed)


def _intra_site_folds(records, seed) -> FoldPlan:
    cells = {}
    for r in records:
        cells.setdefault((r.site_id, r.diagnosis), []).append(r.subject_id)
    for key, members in sorted(cells.items()):
        if len(members) < 2:
            raise ValueError(
                f"intra-site folds need >= 2 subjects per (site, condition) "
                f"cell; cell {key} has {len(members)}")
    rng = np.random.default_rng(seed)
    all_ids = {r.subject_id for r in records}
    folds = []
    for _ in range(N_FOLDS):
        test = []
        for key in sorted(cells):
            members = np.array(sorted(cells[key]))
            n_test = max(1, int(round(INTRA_SITE_TEST_FRACTION * len(members))))
            picked = members[rng.permutation(len(members))[:n_test]]
            test.extend(int(i) for i in picked)
        test = tuple(sorted(test))
        train = tuple(sorted(all_ids - set(test)))
        folds.append((train, test))
    return FoldPlan(folds=folds, scheme="intra_site", seed=seed)


# --- scoring ---------------------------------------------------------------------


def score(predictions, truth):
    """(accuracy, specificity, sensitivity) for +/-1 labels.

    Specificity is the fraction of controls (-1) classified correctly,
    sensitivity the fraction of cases (+1). A missing class makes the
    corresponding component NaN, with a warning.
    """
    predictions = np.asarray(predictions)
    truth = np.asarray(truth)
    if predictions.shape != truth.shape or predictions.size == 0:
        raise ValueError("predictions and truth must be nonempty, equal-length")
    correct = predictions == truth
    accuracy = float(correct.mean())
    components = []
    for label, name in ((-1, "specificity"), (1, "sensitivity")):
        mask = truth == label
        if not mask.any():
            warnings.warn(f"{name} undefined: no class {label} in truth")
            components.append(float("nan"))
        else:
            components.append(float(correct[mask].mean()))
    return accuracy, components[0], components[1]


def dummy_chance(labels, seed=0, n_draws=1000) -> float:
    """Accuracy of the best label-distribution-only predictor.

    Compares the majority vote with the average accuracy of ``n_draws``
    random predictors matching the class distribution; the majority rule
    dominates the random strategy in expectation, so on a 403/468 split
    this is 468/871.
    """
    labels = np.asarray(labels)
    values, counts = np.unique(labels, return_counts=True)
    if len(values) < 2:
        raise ValueError("need both classes to define chance level")
    majority = counts.max() / counts.sum()
    rng = np.random.default_rng(seed)
    probs = counts / counts.sum()
    draws = [float((rng.choice(values, size=labels.size, p=probs) == labels).mean())
             for _ in range(n_draws)]
    return float(max(majority, np.mean(draws)))


# --- learning curves ---------------------------------------------------------------


def nested_training_subsets(train_ids, records, fractions, seed):
    """Nested, (site, condition)-stratified prefixes of a training pool.

    Returns {fraction: tuple of ids} with smaller subsets contained in
    larger ones; each class/site cell contributes proportionally (at
    least one subject per cell).
    """
    by_id = {r.subject_id: r for r in records}
    cells = {}
    for sid in train_ids:
        r = by_id[sid]
        cells.setdefault((r.site_id, r.diagnosis), []).append(sid)
    rng = np.random.default_rng(seed)
    ordered = {key: [int(v) for v in
                     np.array(sorted(members))[rng.permutation(len(members))]]
               for key, members in sorted(cells.items())}
    subsets = {}
    for fraction in sorted(fractions):
        if not 0.0 < fraction <= 1.0:
            raise ValueError("fractions must lie in (0, 1]")
        chosen = []
        for key, members in ordered.items():
            take = max(1, int(round(fraction * len(members))))
            chosen.extend(members[:take])
        subsets[fraction] = tuple(sorted(chosen))
    return subsets


def learning_curve(train_score_fn, fold_plan, records, fractions, seed=0):
    """Score a pipeline over nested training subsets with fixed test sets.

    ``train_score_fn(train_ids, test_ids) -> accuracy`` encapsulates the
    pipeline; the test set of every fold stays constant while training
    subsets grow. Returns long-form rows (fraction, fold, accuracy) plus
    per-fraction mean and standard error across folds.
    """
    rows = []
    for f, (train, test) in enumerate(fold_plan):
        subsets = nested_training_subsets(train, records, fractions, seed + f)
        for fraction in sorted(fractions):
            sub = subsets[fraction]
            labels = {r.subject_id: r.diagnosis for r in records}
            if len({labels[s] for s in sub}) < 2:
                raise ValueError(f"fraction {fraction} yields a single-class "
                                 f"training set on fold {f}")
            rows.append({"fraction": fraction, "fold": f,
                         "accuracy": float(train_score_fn(sub, test))})
    summary = []
    for fraction in sorted(fractions):
        accs = np.array([r["accuracy"] for r in rows if r["fraction"] == fraction])
        summary.append({"fraction": fraction, "mean_accuracy": float(accs.mean()),
                        "stderr": float(accs.std(ddof=1) / math.sqrt(len(accs)))
                        if len(accs) > 1 else 0.0})
    return rows, summary


# --- ANOVA of pipeline options --------------------------------------------------


def _sum_coded_design(scores, factors):
    columns, names = [np.ones(len(scores))], ["intercept"]
    layout = {}
    for factor in factors:
        levels = sorted({str(getattr(r, factor)) for r in scores})
        if len(levels) < 2:
            raise ValueError(f"factor {factor!r} has fewer than 2 levels")
        layout[factor] = levels
        for level in levels[:-1]:
            col = np.zeros(len(scores))
            for i, r in enumerate(scores):
                value = str(getattr(r, factor))
                col[i] = 1.0 if value == level else (-1.0 if value == levels[-1]
                                                     else 0.0)
            columns.append(col)
            names.append(f"{factor}:{level}")
    return np.column_stack(columns), names, layout


def anova_effects(scores, factors, response="accuracy"):
    """Main-effects linear model of accuracy on sum-coded pipeline options.

    Coefficients are deviations from the grand mean; per-factor effects
    sum to zero across levels. 95% confidence intervals use classical
    linear-model standard errors with the residual degrees of freedom.
    """
    X, names, layout = _sum_coded_design(scores, factors)
    y = np.array([float(getattr(r, response)) for r in scores])
    rank = np.linalg.matrix_rank(X)
    if rank < X.shape[1]:
        aliased = _aliased_columns(X, names)
        raise ValueError(f"confounded design; aliased columns: {aliased}")
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    dof = len(y) - X.shape[1]
    if dof <= 0:
        raise ValueError("not enough rows for the requested factors")
    sigma2 = float(resid @ resid) / dof
    cov = sigma2 * np.linalg.inv(X.T @ X)
    t_crit = stats.t.ppf(0.975, dof)

    effects = []
    idx = 1
    for factor in factors:
        levels = layout[factor]
        block = list(range(idx, idx + len(levels) - 1))
        idx += len(levels) - 1
        for pos, level in enumerate(levels[:-1]):
            coef = beta[block[pos]]
            se = math.sqrt(cov[block[pos], block[pos]])
            effects.append(EffectEstimate(factor, level, float(coef),
                                          float(coef - t_crit * se),
                                          float(coef + t_crit * se)))
        # the dropped level's effect is minus the sum of the others
        contrast = np.zeros(X.shape[1])
        contrast[block] = -1.0
        coef = float(contrast @ beta)
        se = math.sqrt(float(contrast @ cov @ contrast))
        effects.append(EffectEstimate(factor, levels[-1], coef,
                                      coef - t_crit * se, coef + t_crit * se))
    return effects


def _aliased_columns(X, names):
    import scipy.linalg

    _, r, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > 1e-10 * diag[0]))
    return sorted(names[p] for p in piv[rank:])


# --- pairwise Wilcoxon signed-rank ------------------------------------------------


def wilcoxon_pairwise(scores_a, scores_b) -> float:
    """Two-sided signed-rank p-value for paired samples.

    Zero differences are dropped; midranks handle ties. Exact for n <= 25
    via the distribution of the positive-rank sum, normal approximation
    with tie correction above. All-zero differences give p = 1 with a
    warning.
    """
    a = np.asarray(scores_a, dtype=float)
    b = np.asarray(scores_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    if a.size < 6:
        raise ValueError("need at least 6 pairs")
    diff = b - a
    diff = diff[diff != 0.0]
    if diff.size == 0:
        warnings.warn("all paired differences are zero; p = 1")
        return 1.0
    ranks = stats.rankdata(np.abs(diff))
    w_pos = float(ranks[diff > 0].sum())
    n = diff.size
    if n <= 25:
        return _exact_signed_rank_p(ranks, w_pos)
    total = n * (n + 1) / 4.0
    tie_counts = np.unique(np.abs(diff), return_counts=True)[1]
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(((tie_counts**3
                                                     - tie_counts) / 48.0).sum())
    z = (w_pos - total) / math.sqrt(var)
    return float(min(1.0, 2.0 * stats.norm.sf(abs(z))))


def _exact_signed_rank_p(ranks, w_pos):
    """Exact two-sided p by dynamic programming over doubled midranks."""
    doubled = np.round(2.0 * ranks).astype(int)
    top = int(doubled.sum())
    counts = np.zeros(top + 1)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:top + 1 - r]
        counts = counts + shifted
    counts /= counts.sum()
    w2 = int(round(2.0 * w_pos))
    p_ge = float(counts[w2:].sum())
    p_le = float(counts[:w2 + 1].sum())
    return float(min(1.0, 2.0 * min(p_ge, p_le)))


def holm_bonferroni(p_values):
    """Step-down adjusted p-values (monotone, capped at 1)."""
    p = np.asarray(p_values, dtype=float)
    order = np.argsort(p)
    adjusted = np.empty_like(p)
    running = 0.0
    m = len(p)
    for rank, idx in enumerate(order):
        running = max(running, (m - rank) * p[idx])
        adjusted[idx] = min(1.0, running)
    return adjusted


# --- top-decile summarization ---------------------------------------------------


def top_decile(scores, factor, response="accuracy"):
    """Per-level mean +/- sd of the 10% best pipelines carrying that level.

    Pipelines are distinct option combinations; their score is the mean
    response over folds. Levels with fewer than 10 pipelines fall back to
    the single best one, with a warning.
    """
    by_level = {}
    for r in scores:
        level = str(getattr(r, factor))
        by_level.setdefault(level, {}).setdefault(r.pipeline_key(), []).append(
            float(getattr(r, response)))
    summary = {}
    for level in sorted(by_level):
        pipeline_means = sorted((float(np.mean(v)) for v in
                                 by_level[level].values()), reverse=True)
        n_pipelines = len(pipeline_means)
        if n_pipelines < 10:
            warnings.warn(f"level {factor}={level} has only {n_pipelines} "
                          f"pipelines; keeping the best one")
            keep = 1
        else:
            keep = math.ceil(0.1 * n_pipelines)
        best = pipeline_means[:keep]
        summary[level] = {
            "n_pipelines": n_pipelines,
            "n_kept": keep,
            "mean": float(np.mean(best)),
            "sd": float(np.std(best, ddof=1)) if keep > 1 else 0.0,
        }
    return summary


# --- subsample filters (heterogeneity ladder) -------------------------------------


def _sites_with_at_least(records, minimum):
    counts = {}
    for r in records:
        counts[r.site_id] = counts.get(r.site_id, 0) + 1
    return {s for s, c in counts.items() if c >= minimum}


def _largest_sites(records, n):
    counts = {}
    for r in records:
        counts[r.site_id] = counts.get(r.site_id, 0) + 1
    ranked = sorted(counts, key=lambda s: (-counts[s], s))
    return set(ranked[:n])


SUBSAMPLE_FILTERS = {
    1: lambda recs: list(recs),
    2: lambda recs: [r for r in recs
                     if r.site_id in _sites_with_at_least(recs, 30)],
    3: lambda recs: [r for r in recs if r.handedness == 1 and r.sex == 1],
    4: lambda recs: [r for r in recs if r.handedness == 1 and r.sex == 1
                     and 9.0 <= r.age <= 18.0],
    5: lambda recs: [r for r in SUBSAMPLE_FILTERS[4](recs)
                     if r.site_id in _largest_sites(SUBSAMPLE_FILTERS[4](recs), 3)],
}


def apply_subsample(records, subsample_id):
    """Filter subject records through one of the inclusion-criteria sets."""
    if subsample_id not in SUBSAMPLE_FILTERS:
        raise ValueError(f"unknown subsample id {subsample_id}; "
                         f"expected one of {sorted(SUBSAMPLE_FILTERS)}")
    return SUBSAMPLE_FILTERS[subsample_id](records)


# --- leakage audit ----------------------------------------------------------------


class LeakageError(AssertionError):
    """A train-derived artifact saw subjects outside the training fold."""


def audit_train_only(artifacts, train_ids, test_ids=()):
    """Assert that every artifact's provenance is within the training set.

    ``artifacts`` maps a name to an object carrying ``fit_subjects`` (a
    frozenset of subject ids, or None for 'never fitted on subjects').
    Provenance must be a subset of ``train_ids`` and, in particular,
    disjoint from ``test_ids``.
    """
    train = set(train_ids)
    test = set(test_ids)
    for name, artifact in artifacts.items():
        tagged = getattr(artifact, "fit_subjects", None)
        if tagged is None:
            raise LeakageError(f"artifact {name!r} carries no provenance tag")
        extra = set(tagged) - train
        if extra:
            raise LeakageError(
                f"artifact {name!r} was fitted on non-training subjects "
                f"{sorted(extra)[:5]}")
        seen_test = set(tagged) & test
        if seen_test:
            raise LeakageError(
                f"artifact {name!r} saw held-out subjects {sorted(seen_test)[:5]}")
    return True
