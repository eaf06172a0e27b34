"""Region time-series extraction and confound removal.

Turns voxel data into one clean series per region: spatial regression of
each volume on the atlas maps, orthogonalization against a confound
matrix (drift terms, high-variance-voxel components, the 24-column motion
expansion and noise-ROI signals), then detrending and standardization.
Also provides the fixed-layout temporal descriptors used for the
movement-only prediction control.
"""

from __future__ import annotations

import warnings

import numpy as np

__all__ = [
    "extract_region_signals",
    "orthogonalize_confounds",
    "detrend_standardize",
    "compcor",
    "friston24",
    "extract_temporal_descriptors",
    "motion_descriptors",
    "build_confound_matrix",
    "clean_region_signals",
    "DESCRIPTORS_PER_SIGNAL",
]


def _dependent_rows(V, tol=1e-10):
    """Indices of rows of V that are linear combinations of earlier ones."""
    _, r, piv = _qr_pivot(V.T)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > tol * max(diag[0], 1e-300))) if diag.size else 0
    return sorted(int(i) for i in piv[rank:])


def _qr_pivot(A):
    import scipy.linalg

    q, r, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
    return q, r, piv


def extract_region_signals(Y, V):
    """Least-squares unmixing of voxel data onto atlas maps.

    Solves ``min_U || Y - U V ||_F`` for the (n x k) region series U. For
    disjoint binary indicator maps this reduces to the per-region voxel
    mean, which is computed directly (exactly, and cheaply).

    Parameters
    ----------
    Y : (n, p) array, voxel time series.
    V : (k, p) array, atlas maps (rows must be linearly independent).
    """
    Y = np.asarray(Y, dtype=float)
    V = np.asarray(V, dtype=float)
    if Y.ndim != 2 or V.ndim != 2 or Y.shape[1] != V.shape[1]:
        raise ValueError("Y must be (n, p) and V (k, p) over the same voxels")
    if not (np.isfinite(Y).all() and np.isfinite(V).all()):
        raise ValueError("non-finite entries in inputs")
    if np.any((V != 0).sum(axis=1) == 0):
        raise ValueError("every atlas map must touch at least one voxel")

    binary = np.all((V == 0.0) | (V == 1.0))
    if binary and np.all(V.sum(axis=0) <= 1.0):
        # disjoint indicators: the OLS solution is the region mean, exactly
        return np.stack([Y[:, row.astype(bool)].mean(axis=1) for row in V], axis=1)

    dependent = _dependent_rows(V)
    if dependent:
        raise ValueError(f"atlas maps are rank deficient; dependent rows: {dependent}")
    U_t, *_ = np.linalg.lstsq(V.T, Y.T, rcond=None)
    return U_t.T


def orthogonalize_confounds(X, C):
    """Project the columns of X onto the orthogonal complement of C.

    Uses a pivoted QR of the confound matrix, dropping dependent columns,
    so ``X_hat = X - Q Q^T X`` satisfies ``C^T X_hat ~ 0``. Idempotent.
    """
    X = np.asarray(X, dtype=float)
    C = np.asarray(C, dtype=float)
    if X.shape[0] != C.shape[0]:
        raise ValueError(f"row mismatch: X has {X.shape[0]} rows, C has {C.shape[0]}")
    q, r, _ = _qr_pivot(C)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        return X.copy()
    rank = int(np.sum(diag > 1e-12 * diag[0]))
    q = q[:, :rank]
    return X - q @ (q.T @ X)


def detrend_standardize(X):
    """Remove the best-fit line from each column, then scale to unit
    sample standard deviation (ddof=1). Constant columns come back as
    zeros and are flagged with a warning."""
    X = np.asarray(X, dtype=float)
    squeeze = X.ndim == 1
    if squeeze:
        X = X[:, None]
    n = X.shape[0]
    if n < 3:
        raise ValueError("need at least 3 timepoints to detrend")
    t = np.arange(n, dtype=float)
    t = t - t.mean()
    slope = (t @ X) / (t @ t)
    out = X - X.mean(axis=0) - np.outer(t, slope)
    sd = out.std(axis=0, ddof=1)
    constant = sd <= 1e-12 * max(1.0, float(np.abs(X).max()))
    if constant.any():
        warnings.warn(f"constant columns standardized to zero: "
                      f"{np.flatnonzero(constant).tolist()}")
    sd = np.where(constant, 1.0, sd)
    out = out / sd
    out[:, constant] = 0.0
    return out[:, 0] if squeeze else out


def compcor(Y, variance_fraction=0.02, n_components=5):
    """Leading principal-component series of the highest-variance voxels.

    Keeps ``ceil(variance_fraction * p)`` voxels by temporal variance and
    returns the first ``n_components`` component time series (left singular
    vectors scaled by their singular values), ordered by singular value,
    each signed so that its largest-magnitude voxel loading is positive.
    """
    Y = np.asarray(Y, dtype=float)
    n, p = Y.shape
    n_keep = int(np.ceil(variance_fraction * p))
    if n_keep < n_components:
        raise ValueError(
            f"top {variance_fraction:.0%} of {p} voxels is {n_keep} < "
            f"{n_components} requested components")
    variances = Y.var(axis=0)
    if np.all(variances <= 1e-30):
        warnings.warn("no voxel variance; returning zero components")
        return np.zeros((n, n_components))
    # stable selection: variance descending, voxel index as tiebreak
    order = np.lexsort((np.arange(p), -variances))
    sub = Y[:, order[:n_keep]]
    sub = sub - sub.mean(axis=0)
    u, s, vt = np.linalg.svd(sub, full_matrices=False)
    comps = u[:, :n_components] * s[:n_components]
    for j in range(n_components):
        loading = vt[j]
        if loading[np.argmax(np.abs(loading))] < 0:
            comps[:, j] = -comps[:, j]
    return comps


def friston24(motion):
    """24-column motion expansion: [m, m^2, lag-1 m, lag-1 m^2].

    The lag blocks are shifted down one timepoint with a zero first row.
    """
    motion = np.asarray(motion, dtype=float)
    if motion.ndim != 2 or motion.shape[1] != 6:
        raise ValueError("motion must be an (n, 6) matrix")
    lag = np.zeros_like(motion)
    lag[1:] = motion[:-1]
    return np.hstack([motion, motion**2, lag, lag**2])


# --- temporal descriptors ---------------------------------------------------

# Per (channel, signal): two AR fits stored as fixed-width [lag1, lag2, resid_sd]
# blocks (order-1 leaves its lag2 slot at zero), four distribution statistics,
# and four Fourier amplitudes.
DESCRIPTORS_PER_SIGNAL = 14
_N_FOURIER = 4
_ENTROPY_BINS = 16


def _ar_block(x, order):
    """[lag1, lag2, resid_sd] from a least-squares AR fit with intercept."""
    block = np.zeros(3)
    if x.std() <= 1e-12:
        return block  # degenerate fit, flagged as zeros
    rows = len(x) - order
    design = np.column_stack([np.ones(rows)] +
                             [x[order - lag - 1:rows + order - lag - 1]
                              for lag in range(order)])
    target = x[order:]
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    resid = target - design @ coef
    block[:order] = coef[1:]
    block[2] = resid.std()
    return block


def _moments(x):
    mu = x.mean()
    sd = x.std()
    if sd <= 1e-12:
        return 0.0, 0.0
    z = (x - mu) / sd
    return float((z**4).mean() - 3.0), float((z**3).mean())


def _histogram_entropy(x):
    lo, hi = x.min(), x.max()
    if hi - lo <= 1e-12:
        return 0.0
    counts, _ = np.histogram(x, bins=_ENTROPY_BINS, range=(lo, hi))
    probs = counts[counts > 0] / len(x)
    return float(-(probs * np.log(probs)).sum())


def _descriptors_1d(x):
    kurt, skew = _moments(x)
    spectrum = np.abs(np.fft.rfft(x)) * 2.0 / len(x)
    fourier = np.zeros(_N_FOURIER)
    available = min(_N_FOURIER, len(spectrum) - 1)
    fourier[:available] = spectrum[1:1 + available]
    return np.concatenate([
        _ar_block(x, 1),
        _ar_block(x, 2),
        [kurt, skew, _histogram_entropy(x), x.mean() - np.median(x)],
        fourier,
    ])


def extract_temporal_descriptors(series):
    """Fixed-length descriptor vector for a set of 1-D signals.

    For each input channel, 14 descriptors are computed on the raw series
    and 14 more on its first difference, concatenated channel-major:
    ``[ch0 raw, ch0 gradient, ch1 raw, ...]`` for a total of
    ``channels * 2 * 14`` values.
    """
    series = np.asarray(series, dtype=float)
    if series.ndim == 1:
        series = series[:, None]
    if series.shape[0] < 16:
        raise ValueError("series too short: need >= 16 samples")
    parts = []
    for channel in series.T:
        parts.append(_descriptors_1d(channel))
        parts.append(_descriptors_1d(np.diff(channel)))
    return np.concatenate(parts)


def motion_descriptors(motion):
    """56-descriptor movement summary for one subject.

    The six motion parameters are reduced to two channels (mean
    translation, mean rotation); each yields 14 descriptors on the raw
    series and 14 on its gradient: 2 x 2 x 14 = 56.
    """
    motion = np.asarray(motion, dtype=float)
    if motion.shape[1] != 6:
        raise ValueError("motion must be an (n, 6) matrix")
    channels = np.column_stack([motion[:, :3].mean(axis=1), motion[:, 3:].mean(axis=1)])
    return extract_temporal_descriptors(channels)


# --- full step-2 chain ------------------------------------------------------

def build_confound_matrix(Y, motion, noise_roi=None, n_compcor=5):
    """Assemble the confound matrix: drift terms (constant, linear,
    quadratic), high-variance-voxel components, the 24-column motion
    expansion, and mean signals of any noise-ROI voxel sets.

    Returns ``(C, labels)`` with one label per column.
    """
    Y = np.asarray(Y, dtype=float)
    n, p = Y.shape
    t = np.linspace(-1.0, 1.0, n)
    columns = [np.ones(n), t, t**2]
    labels = ["drift_const", "drift_lin", "drift_quad"]

    # tiny lattices: widen the voxel fraction so the components exist
    n_comp = min(n_compcor, p)
    fraction = max(0.02, min(1.0, n_comp / p))
    comps = compcor(Y, variance_fraction=fraction, n_components=n_comp)
    columns.extend(comps.T)
    labels.extend(f"compcor_{i}" for i in range(comps.shape[1]))

    if motion is not None:
        f24 = friston24(motion)
        columns.extend(f24.T)
        labels.extend(f"motion_{i}" for i in range(24))

    if noise_roi is not None and len(noise_roi) > 0:
        columns.append(Y[:, np.asarray(noise_roi, dtype=int)].mean(axis=1))
        labels.append("noise_roi")

    return np.column_stack(columns), labels


def clean_region_signals(Y, maps, motion=None, noise_roi=None):
    """Full extraction chain: unmix regions, orthogonalize against the
    confound matrix, detrend and standardize.

    Returns ``(U, C)``: the cleaned (n x k) region series and the confound
    matrix it was orthogonalized against. Confound columns are scaled to
    unit norm before the projection; this changes nothing about the
    projection (same span) but keeps the matrix well conditioned.
    """
    U = extract_region_signals(Y, maps)
    C, _ = build_confound_matrix(Y, motion, noise_roi)
    if C.shape[1] >= Y.shape[0] - 2:
        raise ValueError(
            f"{C.shape[1]} confound columns for {Y.shape[0]} timepoints would "
            f"leave no signal; use longer time series")
    norms = np.linalg.norm(C, axis=0)
    C_scaled = C / np.where(norms > 1e-30, norms, 1.0)
    U = orthogonalize_confounds(U, C_scaled)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # dead regions are possible on tiny inputs
        U = detrend_standardize(U)
    return U, C_scaled


def write_region_csv(U, path):
    np.savetxt(path, U, fmt="%.17g", delimiter=",")


def process_cohort_dir(cohort_dir, maps, out_dir, noise_roi=None):
    """Read cohort CSVs and write per-subject ``sub-<id>_regions.csv``."""
    from pathlib import Path

    from .synthdata import load_cohort

    cohort = load_cohort(cohort_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rec in cohort.subjects:
        U, _ = clean_region_signals(cohort.voxel_data[rec.subject_id], maps,
                                    rec.motion_params, noise_roi)
        write_region_csv(U, out / f"sub-{rec.subject_id}_regions.csv")
    return out
