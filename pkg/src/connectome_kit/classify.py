"""Linear diagnosis models on connectivity features.

Three penalized linear classifiers: an exactly-solved ridge classifier
and l1/l2-penalized support vector classifiers with the squared hinge
loss, minimized by deterministic cyclic coordinate descent with Newton
steps and a backtracking line search. Feature standardization is part of
every model (fitted on the training rows, applied at prediction time),
and the intercept is never penalized. Hyperparameters are chosen by
nested cross-validation stratified on (site, label) cells; biomarker
significance comes from refitting under label permutations.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LinearModel",
    "WeightSignificance",
    "fit_ridge_classifier",
    "fit_svc",
    "fit_classifier",
    "nested_select",
    "permutation_weight_pvalues",
    "default_grid",
]

_LINE_SEARCH_BETA = 0.5
_LINE_SEARCH_SIGMA = 0.01
_MAX_SWEEPS = 500
_GRAD_TOL = 1e-6
_OBJ_TOL = 1e-9


@dataclass
class LinearModel:
    weights: np.ndarray
    intercept: float
    penalty: str  # "l1" | "l2"
    loss: str  # "squared_hinge" | "ridge"
    hyperparameter: float  # C for SVC, alpha for ridge
    scaler_mean: np.ndarray
    scaler_scale: np.ndarray
    fit_subjects: frozenset | None = None
    objective_history: list = field(default_factory=list)

    def decision_function(self, X):
        Z = (np.asarray(X, dtype=float) - self.scaler_mean) / self.scaler_scale
        return Z @ self.weights + self.intercept

    def predict(self, X):
        return np.where(self.decision_function(X) >= 0.0, 1, -1)

    def to_json_dict(self):
        return {
            "weights": self.weights.tolist(),
            "intercept": float(self.intercept),
            "penalty": self.penalty,
            "loss": self.loss,
            "hyperparameter": float(self.hyperparameter),
            "scaler_mean": self.scaler_mean.tolist(),
            "scaler_scale": self.scaler_scale.tolist(),
        }


@dataclass
class WeightSignificance:
    p_values: np.ndarray
    n_permutations: int
    observed_weights: np.ndarray


def _fit_scaler(X):
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    return mean, scale


def _check_inputs(X, y):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if not np.isfinite(X).all() or not np.isfinite(y).all():
        raise ValueError("non-finite inputs")
    if set(np.unique(y)) - {-1.0, 1.0}:
        raise ValueError("labels must be -1/+1")
    if len(set(y)) < 2:
        raise ValueError("both classes must be present")
    return X, y


def fit_ridge_classifier(X, y, alpha, fit_subjects=None) -> LinearModel:
    """Exact l2-penalized least-squares classifier on +/-1 labels.

    Solves (Z^T Z + alpha I) w = Z^T (y - ybar) on standardized, centered
    features; the unpenalized intercept is the label mean, so infinite
    shrinkage predicts the majority class.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    X, y = _check_inputs(X, y)
    mean, scale = _fit_scaler(X)
    Z = (X - mean) / scale
    d = Z.shape[1]
    ybar = y.mean()
    w = np.linalg.solve(Z.T @ Z + alpha * np.eye(d), Z.T @ (y - ybar))
    return LinearModel(weights=w, intercept=float(ybar), penalty="l2", loss="ridge",
                       hyperparameter=float(alpha), scaler_mean=mean,
                       scaler_scale=scale,
                       fit_subjects=frozenset(fit_subjects) if fit_subjects else None)


# --- squared-hinge SVC by cyclic coordinate descent ---------------------------


def _svc_objective(w, penalty, C, margins):
    hinge = np.maximum(0.0, 1.0 - margins)
    loss = C * float(hinge @ hinge)
    if penalty == "l2":
        return 0.5 * float(w @ w) + loss
    return 0.5 * float(np.abs(w).sum()) + loss


def _newton_direction_l1(w_j, g, h, lam):
    if g + lam <= h * w_j:
        return -(g + lam) / h
    if g - lam >= h * w_j:
        return -(g - lam) / h
    return -w_j


def fit_svc(X, y, penalty, C, fit_subjects=None, max_sweeps=_MAX_SWEEPS) -> LinearModel:
    """Squared-hinge support vector classifier.

    Minimizes ``0.5 ||w||_p^p + C sum_i max(0, 1 - y_i (w.z_i + b))^2``
    by cyclic coordinate descent (fixed order, so runs are reproducible)
    with per-coordinate Newton steps and a backtracking line search that
    keeps the objective monotone. Converged when the largest generalized
    gradient violation falls below 1e-6 or the relative objective
    decrease of a sweep falls below 1e-9.
    """
    if C <= 0:
        raise ValueError("C must be positive")
    if penalty not in ("l1", "l2"):
        raise ValueError("penalty must be 'l1' or 'l2'")
    X, y = _check_inputs(X, y)
    mean, scale = _fit_scaler(X)
    Z = (X - mean) / scale
    n, d = Z.shape

    w = np.zeros(d)
    b = 0.0
    margins = np.zeros(n)  # y_i * (z_i . w + b)
    lam = 0.5  # the l1 penalty is 0.5 * ||w||_1
    ZY = Z * y[:, None]  # d margins / d coordinate, precomputed
    objective = _svc_objective(w, penalty, C, margins)
    history = [objective]

    for _ in range(max_sweeps):
        max_violation = 0.0
        for j in list(range(d)) + [-1]:
            col = y if j < 0 else ZY[:, j]
            active = margins < 1.0
            resid = margins[active] - 1.0
            g_loss = 2.0 * C * float(resid @ col[active])
            h = 2.0 * C * float(col[active] @ col[active]) + 1e-12

            if j < 0:
                g = g_loss
                violation = abs(g)
                step = -g / h
            elif penalty == "l2":
                g = w[j] + g_loss
                h = h + 1.0
                violation = abs(g)
                step = -g / h
            else:
                if w[j] > 0:
                    violation = abs(g_loss + lam)
                elif w[j] < 0:
                    violation = abs(g_loss - lam)
                else:
                    violation = max(0.0, abs(g_loss) - lam)
                step = _newton_direction_l1(w[j], g_loss, h, lam)
                g = g_loss
            max_violation = max(max_violation, violation)
            if step == 0.0:
                continue

            if j < 0:
                expected = g * step
            elif penalty == "l2":
                expected = g * step
            else:
                expected = g * step + lam * (abs(w[j] + step) - abs(w[j]))

            scale_step = 1.0
            for _trial in range(40):
                delta = scale_step * step
                trial_margins = margins + delta * col
                if j < 0:
                    trial_obj = _svc_objective(w, penalty, C, trial_margins)
                else:
                    w_old = w[j]
                    w[j] = w_old + delta
                    trial_obj = _svc_objective(w, penalty, C, trial_margins)
                    w[j] = w_old
                if trial_obj <= objective + _LINE_SEARCH_SIGMA * scale_step * expected:
                    break
                scale_step *= _LINE_SEARCH_BETA
            else:
                continue  # no acceptable step; coordinate already near-optimal

            delta = scale_step * step
            margins = margins + delta * col
            if j < 0:
                b += delta
            else:
                w[j] = 0.0 if (penalty == "l1" and scale_step == 1.0
                               and step == -w[j]) else w[j] + delta
            objective = trial_obj

        history.append(objective)
        if max_violation < _GRAD_TOL:
            break
        if len(history) >= 2 and \
                history[-2] - history[-1] < _OBJ_TOL * max(1.0, abs(history[-2])):
            break

    return LinearModel(weights=w, intercept=b, penalty=penalty, loss="squared_hinge",
                       hyperparameter=float(C), scaler_mean=mean, scaler_scale=scale,
                       fit_subjects=frozenset(fit_subjects) if fit_subjects else None,
                       objective_history=history)


_FAMILIES = {"ridge", "svc_l1", "svc_l2"}


def fit_classifier(X, y, family, hyper, fit_subjects=None) -> LinearModel:
    if family == "ridge":
        return fit_ridge_classifier(X, y, hyper, fit_subjects)
    if family == "svc_l1":
        return fit_svc(X, y, "l1", hyper, fit_subjects)
    if family == "svc_l2":
        return fit_svc(X, y, "l2", hyper, fit_subjects)
    raise ValueError(f"unknown model family {family!r}; expected one of {_FAMILIES}")


def default_grid(family):
    """7-point log grid spanning under- to over-regularized regimes."""
    return [float(v) for v in np.logspace(-3, 3, 7)]


# --- nested hyperparameter selection -------------------------------------------


def _stratified_folds(y, sites, n_splits, rng):
    """Fold assignment per sample, stratified on (site, label) cells."""
    n = len(y)
    cells = {}
    for i in range(n):
        key = (None if sites is None else sites[i], y[i])
        cells.setdefault(key, []).append(i)
    assignment = np.zeros(n, dtype=int)
    offset = 0
    for key in sorted(cells, key=str):
        members = np.array(cells[key])
        members = members[rng.permutation(len(members))]
        for pos, idx in enumerate(members):
            assignment[idx] = (pos + offset) % n_splits
        offset += len(members)  # stagger cells so small cells spread out
    return assignment


def _folds_degenerate(y, assignment, n_splits):
    for f in range(n_splits):
        test = assignment == f
        if len(set(y[test])) < 2 or len(set(y[~test])) < 2:
            return True
    return False


def nested_select(X, y, model_family, grid, inner_folds=5, sites=None, seed=0,
                  fit_subjects=None) -> LinearModel:
    """Pick a hyperparameter by inner cross-validation, refit on all rows.

    Each grid value is scored by mean inner-fold accuracy; ties go to the
    strongest regularization (largest alpha / smallest C). Inner folds
    are stratified by (site, label); if a fold would miss a class, the
    split count is reduced with a warning.
    """
    if not grid:
        raise ValueError("hyperparameter grid must be nonempty")
    X, y = _check_inputs(X, y)
    if len(grid) == 1:
        return fit_classifier(X, y, model_family, grid[0], fit_subjects)

    rng = np.random.default_rng(seed)
    n_splits = min(inner_folds, int(min(np.bincount(((y + 1) // 2).astype(int)))))
    n_splits = max(n_splits, 2)
    if n_splits < inner_folds:
        warnings.warn(f"a class is too small for {inner_folds} inner folds; "
                      f"refolding with {n_splits} splits")
    assignment = _stratified_folds(y, sites, n_splits, rng)
    while _folds_degenerate(y, assignment, n_splits) and n_splits > 2:
        n_splits -= 1
        warnings.warn(f"degenerate inner fold; refolding with {n_splits} splits")
        assignment = _stratified_folds(y, sites, n_splits, rng)
    if _folds_degenerate(y, assignment, n_splits):
        raise ValueError("cannot build inner folds with both classes present")

    # strongest regularization first, so strict improvement resolves ties
    ordered = sorted(set(float(g) for g in grid),
                     reverse=(model_family == "ridge"))
    best_hyper, best_score = None, -np.inf
    inner_scores = {}
    for hyper in ordered:
        accs = []
        for f in range(n_splits):
            test = assignment == f
            model = fit_classifier(X[~test], y[~test], model_family, hyper)
            accs.append(float((model.predict(X[test]) == y[test]).mean()))
        score = float(np.mean(accs))
        inner_scores[hyper] = score
        if score > best_score:
            best_hyper, best_score = hyper, score

    model = fit_classifier(X, y, model_family, best_hyper, fit_subjects)
    model.inner_scores = inner_scores
    return model


# --- permutation significance ---------------------------------------------------


def permutation_weight_pvalues(X, y, fit_fn, n_permutations=1000,
                               seed=0) -> WeightSignificance:
    """Two-sided per-feature p-values from a label-permutation null.

    ``fit_fn(X, y)`` must return a LinearModel. Each permutation refits
    the model on shuffled labels; p_j = (1 + #{|w_perm| >= |w_obs|}) /
    (n_permutations + 1), so the smallest attainable p-value is
    1 / (n_permutations + 1).
    """
    if n_permutations < 100:
        raise ValueError("need at least 100 permutations")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    observed = fit_fn(X, y).weights
    rng = np.random.default_rng(seed)
    exceed = np.zeros(observed.size, dtype=np.int64)
    for _ in range(n_permutations):
        perm = rng.permutation(len(y))
        w = fit_fn(X, y[perm]).weights
        exceed += np.abs(w) >= np.abs(observed)
    p = (1.0 + exceed) / (n_permutations + 1.0)
    return WeightSignificance(p_values=p, n_permutations=n_permutations,
                              observed_weights=observed.copy())
