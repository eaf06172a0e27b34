"""Per-subject connectivity features from region time series.

Covariances are estimated with the closed-form shrinkage blend toward a
scaled identity, then parameterized as correlations, partial correlations
from the precision matrix, or a tangent embedding about the geometric
mean of the training covariances. A group-level nuisance regression
removes site / age / sex effects from the feature coordinates using
coefficients fitted on training subjects only.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CovarianceMatrix",
    "TangentReference",
    "ledoit_wolf",
    "parameterize",
    "fit_tangent_reference",
    "regress_out_group_confounds",
    "GroupConfoundModel",
    "feature_edge_pairs",
    "spd_logm",
    "spd_expm",
    "spd_sqrtm",
]

EIGENVALUE_FLOOR = 1e-12


@dataclass
class CovarianceMatrix:
    sigma: np.ndarray
    shrinkage_alpha: float

    def __post_init__(self):
        sym_err = np.abs(self.sigma - self.sigma.T).max()
        if sym_err > 1e-12 * max(1.0, np.abs(self.sigma).max()):
            raise ValueError(f"covariance not symmetric (max asymmetry {sym_err:.2e})")
        if not 0.0 <= self.shrinkage_alpha <= 1.0:
            raise ValueError("shrinkage alpha must lie in [0, 1]")


@dataclass
class TangentReference:
    reference: np.ndarray  # geometric mean of training covariances
    whitener: np.ndarray  # reference^(-1/2)
    fit_subjects: frozenset | None = None


# --- symmetric matrix functions ----------------------------------------------

def _eigh_spd(S):
    vals, vecs = np.linalg.eigh(0.5 * (S + S.T))
    return np.clip(vals, EIGENVALUE_FLOOR, None), vecs


def spd_logm(S):
    vals, vecs = _eigh_spd(S)
    out = (vecs * np.log(vals)) @ vecs.T
    return 0.5 * (out + out.T)


def spd_expm(S):
    vals, vecs = np.linalg.eigh(0.5 * (S + S.T))
    out = (vecs * np.exp(vals)) @ vecs.T
    return 0.5 * (out + out.T)


def spd_sqrtm(S, inverse=False):
    vals, vecs = _eigh_spd(S)
    power = -0.5 if inverse else 0.5
    out = (vecs * vals**power) @ vecs.T
    return 0.5 * (out + out.T)


# --- shrinkage covariance -----------------------------------------------------

def ledoit_wolf(U) -> CovarianceMatrix:
    """Shrunk covariance of an (n x k) region time-series matrix.

    The empirical covariance (centered, 1/n normalization) is blended
    with its scaled-identity target, ``(1 - a) S + a tr(S)/k I``, where
    the blend weight minimizes expected mean squared error and is clipped
    to [0, 1].
    """
    U = np.asarray(U, dtype=float)
    if U.ndim != 2 or U.shape[0] < 2:
        raise ValueError("need an (n >= 2, k) matrix")
    n, k = U.shape
    X = U - U.mean(axis=0)
    emp = X.T @ X / n
    mu = np.trace(emp) / k

    if k == 1:
        return CovarianceMatrix(sigma=emp.copy(), shrinkage_alpha=0.0)

    X2 = X**2
    beta_ = float(np.sum((X2.T @ X2)))
    delta_ = float(np.sum((X.T @ X) ** 2)) / n**2
    beta = (beta_ / n - delta_) / (k * n)
    delta = (delta_ - 2.0 * mu * np.trace(emp) + k * mu**2) / k
    beta = min(beta, delta)
    alpha = 0.0 if beta <= 0 else float(beta / delta)
    alpha = min(max(alpha, 0.0), 1.0)

    shrunk = (1.0 - alpha) * emp
    shrunk.flat[:: k + 1] += alpha * mu
    return CovarianceMatrix(sigma=shrunk, shrinkage_alpha=alpha)


# --- parameterizations ---------------------------------------------------------

def _tril_vec(mat, with_diagonal):
    k = mat.shape[0]
    if with_diagonal:
        rows, cols = np.tril_indices(k)
        scale = np.where(rows == cols, 1.0, np.sqrt(2.0))
        return mat[rows, cols] * scale
    rows, cols = np.tril_indices(k, -1)
    return mat[rows, cols]


def feature_edge_pairs(k, kind):
    """(i, j) region pairs in the order the feature vector is laid out."""
    if kind == "tangent":
        rows, cols = np.tril_indices(k)
    else:
        rows, cols = np.tril_indices(k, -1)
    return list(zip(rows.tolist(), cols.tolist()))


def parameterize(cov, kind, reference=None):
    """Vectorized connectivity features from one covariance matrix.

    kind = "correlation": off-diagonal of D^-1/2 S D^-1/2.
    kind = "partial": -P_ij / sqrt(P_ii P_jj) from the precision P = S^-1.
    kind = "tangent": logm(W S W^T) about ``reference`` with W its inverse
    square root; the lower triangle including the diagonal is vectorized
    with off-diagonals scaled by sqrt(2) so the euclidean norm equals the
    Frobenius norm of the tangent matrix.
    """
    sigma = cov.sigma if isinstance(cov, CovarianceMatrix) else np.asarray(cov, float)
    if kind == "correlation":
        d = np.sqrt(np.diag(sigma))
        corr = sigma / np.outer(d, d)
        return _tril_vec(corr, with_diagonal=False)
    if kind == "partial":
        vals = np.linalg.eigvalsh(sigma)
        if vals.min() <= 0:
            raise ValueError("partial correlations need a positive definite matrix")
        precision = np.linalg.inv(sigma)
        d = np.sqrt(np.diag(precision))
        partial = -precision / np.outer(d, d)
        return _tril_vec(partial, with_diagonal=False)
    if kind == "tangent":
        if reference is None:
            raise ValueError("tangent parameterization requires a fitted reference")
        w = reference.whitener
        return _tril_vec(spd_logm(w @ sigma @ w.T), with_diagonal=True)
    raise ValueError(f"unknown connectivity kind: {kind!r}")


def fit_tangent_reference(covariances, tol=1e-7, max_iter=50,
                          fit_subjects=None) -> TangentReference:
    """Geometric (Karcher) mean of SPD matrices by fixed-point iteration.

    G <- G^1/2 expm( mean_i logm(G^-1/2 S_i G^-1/2) ) G^1/2, initialized
    at the arithmetic mean and stopped when the Frobenius norm of the
    mean log falls below ``tol``.
    """
    sigmas = [c.sigma if isinstance(c, CovarianceMatrix) else np.asarray(c, float)
              for c in covariances]
    if not sigmas:
        raise ValueError("need at least one covariance")
    for s in sigmas:
        if np.linalg.eigvalsh(0.5 * (s + s.T)).min() <= 0:
            raise ValueError("all inputs must be symmetric positive definite")

    mean = sum(sigmas) / len(sigmas)
    if len(sigmas) == 1:
        mean = sigmas[0].copy()
    for _ in range(max_iter):
        root = spd_sqrtm(mean)
        inv_root = spd_sqrtm(mean, inverse=True)
        logs = np.mean([spd_logm(inv_root @ s @ inv_root) for s in sigmas], axis=0)
        if np.linalg.norm(logs, "fro") < tol:
            break
        mean = root @ spd_expm(logs) @ root.T
        mean = 0.5 * (mean + mean.T)
    return TangentReference(reference=mean, whitener=spd_sqrtm(mean, inverse=True),
                            fit_subjects=frozenset(fit_subjects) if fit_subjects else None)


def karcher_residual(reference, covariances) -> float:
    """Frobenius norm of the mean whitened log; ~0 at the geometric mean."""
    sigmas = [c.sigma if isinstance(c, CovarianceMatrix) else np.asarray(c, float)
              for c in covariances]
    w = reference.whitener if isinstance(reference, TangentReference) else \
        spd_sqrtm(reference, inverse=True)
    logs = np.mean([spd_logm(w @ s @ w.T) for s in sigmas], axis=0)
    return float(np.linalg.norm(logs, "fro"))


# --- group-level nuisance regression -------------------------------------------

@dataclass
class GroupConfoundModel:
    """Per-coordinate OLS of features on covariates, fitted on training
    subjects; residuals are taken for everyone with those coefficients."""

    coef: np.ndarray  # (n_covariates + 1) x n_features, row 0 = intercept
    kept_columns: np.ndarray
    fit_subjects: frozenset = field(default_factory=frozenset)

    def transform(self, features, covariates):
        design = _with_intercept(np.asarray(covariates, float)[:, self.kept_columns])
        return np.asarray(features, float) - design @ self.coef


def _with_intercept(C):
    return np.hstack([np.ones((C.shape[0], 1)), C])


def fit_group_confound_model(features, covariates, fit_rows,
                             fit_subjects=None) -> GroupConfoundModel:
    features = np.asarray(features, dtype=float)
    covariates = np.asarray(covariates, dtype=float)
    fit_rows = np.asarray(fit_rows, dtype=int)

    C_train = covariates[fit_rows]
    kept = np.arange(C_train.shape[1])
    design = _with_intercept(C_train)
    rank = np.linalg.matrix_rank(design)
    if rank < design.shape[1]:
        kept = _independent_columns(C_train)
        warnings.warn(
            f"rank-deficient covariates; dropped columns "
            f"{sorted(set(range(C_train.shape[1])) - set(kept.tolist()))}")
        design = _with_intercept(C_train[:, kept])
    coef, *_ = np.linalg.lstsq(design, features[fit_rows], rcond=None)
    return GroupConfoundModel(coef=coef, kept_columns=kept,
                              fit_subjects=frozenset(fit_subjects or ()))


def _independent_columns(C):
    import scipy.linalg

    design = _with_intercept(C)
    _, r, piv = scipy.linalg.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > 1e-10 * diag[0]))
    kept = [p - 1 for p in piv[:rank] if p != 0]  # drop the intercept slot
    return np.asarray(sorted(kept), dtype=int)


def regress_out_group_confounds(features, covariates, fit_rows, fit_subjects=None):
    """Residualize features against site/age/sex covariates.

    Coefficients come from ordinary least squares (with intercept) on the
    ``fit_rows`` subset only; the residual transformation is applied to
    every row, so held-out subjects never influence the fit.
    """
    model = fit_group_confound_model(features, covariates, fit_rows, fit_subjects)
    return model.transform(features, covariates), model


def build_covariates(records, baseline_site=None):
    """Site one-hot (first site dropped as baseline) + age + sex columns."""
    sites = sorted({r.site_id for r in records})
    if baseline_site is None:
        baseline_site = sites[0]
    onehot_sites = [s for s in sites if s != baseline_site]
    rows = []
    for r in records:
        row = [1.0 if r.site_id == s else 0.0 for s in onehot_sites]
        row.append(r.age)
        row.append(float(r.sex))
        rows.append(row)
    labels = [f"site_{s}" for s in onehot_sites] + ["age", "sex"]
    return np.asarray(rows, dtype=float), labels
