"""Configuration-driven pipeline execution.

A pipeline is (atlas method, region count, connectivity kind, classifier)
run under a cross-validation scheme on one cohort subsample. Per fold:
the atlas is estimated on training subjects only, signals and shrunk
covariances are computed for everyone, the tangent reference / group
nuisance regression / feature scaler / hyperparameters are fitted on the
training fold, and the held-out subjects are scored. Every train-derived
artifact carries a provenance tag that is audited before scoring.

All outputs are pure functions of (cohort, config, grid, seed); grid jobs
execute in sorted order (optionally across processes) and are reduced
deterministically.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import time
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import classify, connectivity, evaluate, parcellation, signals
from .synthdata import Cohort, Parcellation

__all__ = [
    "PipelineConfig",
    "RunManifest",
    "run_pipeline",
    "run_grid",
    "run_learning_curve",
    "run_biomarkers",
    "config_hash",
    "write_scores_csv",
    "read_scores_csv",
]

ATLAS_METHODS = ("kmeans", "ward", "ica", "msdl")
UNIMPLEMENTED_ATLASES = ("ica", "msdl")
MATRIX_KINDS = ("correlation", "partial", "tangent")
CLASSIFIERS = ("ridge", "svc_l1", "svc_l2")
SCHEMES = ("inter_site", "intra_site")


@dataclass
class PipelineConfig:
    atlas_method: str = "kmeans"
    smoothing_fwhm_mm: float = 6.0
    voxel_size_mm: float = 3.0
    n_regions: int = 84
    matrix_kind: str = "tangent"
    classifier: str = "ridge"
    scheme: str = "intra_site"
    subsample: int = 1
    master_seed: int = 0
    hyper_grid: list = field(default_factory=list)  # empty -> default 7-point grid

    def validate(self):
        checks = (
            ("atlas_method", self.atlas_method, ATLAS_METHODS),
            ("matrix_kind", self.matrix_kind, MATRIX_KINDS),
            ("classifier", self.classifier, CLASSIFIERS),
            ("scheme", self.scheme, SCHEMES),
        )
        for name, value, allowed in checks:
            if value not in allowed:
                raise ValueError(f"{name}: {value!r} is not one of {allowed}")
        if self.n_regions < 2:
            raise ValueError("n_regions must be >= 2")
        if self.smoothing_fwhm_mm < 0:
            raise ValueError("smoothing_fwhm_mm must be >= 0")
        if self.subsample not in evaluate.SUBSAMPLE_FILTERS:
            raise ValueError(f"subsample: {self.subsample} is not one of "
                             f"{sorted(evaluate.SUBSAMPLE_FILTERS)}")
        return self

    def hyper_values(self):
        return list(self.hyper_grid) or classify.default_grid(self.classifier)


def config_hash(config) -> str:
    payload = asdict(config) if not isinstance(config, dict) else config
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class RunManifest:
    config_hash: str
    cohort_hash: str
    module_versions: dict
    artifact_paths: dict = field(default_factory=dict)
    wall_clock: dict = field(default_factory=dict)

    def write(self, path):
        Path(path).write_text(json.dumps(asdict(self), sort_keys=True, indent=2))


def _module_versions():
    import scipy

    from . import __version__

    return {"connectome_kit": __version__, "numpy": np.__version__,
            "scipy": scipy.__version__}


def cohort_fingerprint(cohort: Cohort) -> str:
    h = hashlib.sha256()
    h.update(str(cohort.master_seed).encode())
    h.update(str(cohort.lattice_dims).encode())
    for rec in cohort.subjects:
        h.update(np.ascontiguousarray(cohort.voxel_data[rec.subject_id]).tobytes())
    return h.hexdigest()[:16]


# --- per-fold machinery ---------------------------------------------------------


class _CohortCache:
    """Per-run cache of standardized voxel data and per-subject Grams.

    Atlas estimation stacks standardized (optionally smoothed) subject
    series along time; the stacked PCA only needs the sum of per-subject
    Gram matrices, accumulated here over training subjects in sorted id
    order so results never depend on execution order.
    """

    def __init__(self, cohort: Cohort, config: PipelineConfig):
        self.cohort = cohort
        self.config = config
        self.smooth = (config.atlas_method == "kmeans"
                       and config.smoothing_fwhm_mm > 0)
        self._standardized = {}
        self._grams = {}

    def standardized(self, sid):
        if sid not in self._standardized:
            data = self.cohort.voxel_data[sid]
            if self.smooth:
                data = parcellation.gaussian_smooth(
                    data, self.config.smoothing_fwhm_mm,
                    self.config.voxel_size_mm, self.cohort.lattice_dims)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                self._standardized[sid] = signals.detrend_standardize(data)
        return self._standardized[sid]

    def gram(self, sid):
        if sid not in self._grams:
            data = self.standardized(sid)
            self._grams[sid] = data.T @ data
        return self._grams[sid]

    def training_profiles(self, train_ids, max_components=100):
        """(r x p) PCA scores of the stacked training series, transposed
        so parcellation estimators can treat rows as (reduced) time."""
        gram = sum(self.gram(sid) for sid in sorted(train_ids))
        n_time = sum(self.standardized(sid).shape[0] for sid in train_ids)
        r = min(n_time, gram.shape[0], max_components)
        vals, vecs = np.linalg.eigh(gram)
        vals = np.clip(vals[::-1][:r], 0.0, None)
        vecs = vecs[:, ::-1][:, :r]
        return (vecs * np.sqrt(vals)).T


def estimate_atlas(cache: _CohortCache, train_ids, fold_seed) -> Parcellation:
    config = cache.config
    if config.atlas_method in UNIMPLEMENTED_ATLASES:
        raise NotImplementedError(
            f"atlas_method {config.atlas_method!r} is recognized but not "
            f"implemented; use one of ('kmeans', 'ward')")
    profiles = cache.training_profiles(train_ids)
    if config.atlas_method == "kmeans":
        atlas = parcellation.kmeans_parcellate(
            profiles, config.n_regions, seed=fold_seed,
            lattice_dims=cache.cohort.lattice_dims)
    else:
        adjacency = parcellation.lattice_adjacency(cache.cohort.lattice_dims)
        atlas = parcellation.ward_parcellate(
            profiles, config.n_regions, adjacency,
            lattice_dims=cache.cohort.lattice_dims)
    atlas.fit_subjects = frozenset(train_ids)
    atlas.method = config.atlas_method
    return atlas


@dataclass
class FoldBundle:
    """Everything reusable about one evaluated fold."""

    fold: int
    train_ids: tuple
    test_ids: tuple
    atlas: Parcellation
    maps: np.ndarray
    covariances: dict  # subject_id -> CovarianceMatrix
    record: evaluate.ScoreRecord = None
    model: classify.LinearModel = None
    tangent_ref: connectivity.TangentReference = None
    confound_model: connectivity.GroupConfoundModel = None


def prepare_fold(cohort, records, config, fold, train_ids, test_ids,
                 cache=None) -> FoldBundle:
    """Estimate the fold atlas and per-subject shrunk covariances."""
    cache = cache or _CohortCache(cohort, config)
    atlas = estimate_atlas(cache, train_ids, config.master_seed * 1000 + fold)
    maps = parcellation.select_largest_rois(atlas, m=config.n_regions)
    by_id = {r.subject_id: r for r in records}
    noise_roi = cohort.ground_truth.noise_roi if cohort.ground_truth else None
    covariances = {}
    for sid in sorted(set(train_ids) | set(test_ids)):
        series, _ = signals.clean_region_signals(
            cohort.voxel_data[sid], maps, by_id[sid].motion_params, noise_roi)
        covariances[sid] = connectivity.ledoit_wolf(series)
    return FoldBundle(fold=fold, train_ids=tuple(train_ids),
                      test_ids=tuple(test_ids), atlas=atlas, maps=maps,
                      covariances=covariances)


def evaluate_fold(bundle: FoldBundle, records, config,
                  train_ids=None, test_ids=None, update_bundle=True):
    """Fit the training half of a fold and score the held-out subjects.

    ``train_ids`` may be a subset of the bundle's training fold (used for
    learning curves); the atlas and covariances are reused, while the
    tangent reference, nuisance regression, scaler and hyperparameters
    are refitted on the subset.
    """
    train_ids = tuple(train_ids if train_ids is not None else bundle.train_ids)
    test_ids = tuple(test_ids if test_ids is not None else bundle.test_ids)
    by_id = {r.subject_id: r for r in records}

    tangent_ref = None
    if config.matrix_kind == "tangent":
        tangent_ref = connectivity.fit_tangent_reference(
            [bundle.covariances[sid] for sid in sorted(train_ids)],
            fit_subjects=train_ids)

    ordered = list(train_ids) + list(test_ids)
    features = np.stack([
        connectivity.parameterize(bundle.covariances[sid], config.matrix_kind,
                                  tangent_ref)
        for sid in ordered])
    covariates, _ = connectivity.build_covariates([by_id[s] for s in ordered])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # held-out sites make columns degenerate
        adjusted, confound_model = connectivity.regress_out_group_confounds(
            features, covariates, np.arange(len(train_ids)),
            fit_subjects=train_ids)

    X_train = adjusted[: len(train_ids)]
    X_test = adjusted[len(train_ids):]
    y_train = np.array([by_id[s].diagnosis for s in train_ids], dtype=float)
    y_test = np.array([by_id[s].diagnosis for s in test_ids], dtype=float)
    sites_train = [by_id[s].site_id for s in train_ids]

    model = classify.nested_select(
        X_train, y_train, config.classifier, config.hyper_values(),
        sites=sites_train, seed=config.master_seed * 1000 + bundle.fold,
        fit_subjects=train_ids)

    artifacts = {"atlas": bundle.atlas, "confound_model": confound_model,
                 "classifier": model}
    if tangent_ref is not None:
        artifacts["tangent_reference"] = tangent_ref
    # the atlas is fitted on the full fold pool even when a learning-curve
    # subset trains the classifier; nothing may ever touch the test side
    evaluate.audit_train_only(artifacts, bundle.train_ids, test_ids)
    evaluate.audit_train_only(
        {k: v for k, v in artifacts.items() if k != "atlas"}, train_ids,
        test_ids)

    accuracy, specificity, sensitivity = evaluate.score(
        model.predict(X_test), y_test)
    record = evaluate.ScoreRecord(
        atlas_method=config.atlas_method, n_regions=config.n_regions,
        matrix_kind=config.matrix_kind, classifier=config.classifier,
        scheme=config.scheme, subsample=config.subsample, fold=bundle.fold,
        accuracy=accuracy, specificity=specificity, sensitivity=sensitivity)
    if update_bundle:
        bundle.record = record
        bundle.model = model
        bundle.tangent_ref = tangent_ref
        bundle.confound_model = confound_model
    return record


def run_pipeline(cohort, config: PipelineConfig, records=None, fold_plan=None):
    """All folds of one pipeline; returns (ScoreRecords, FoldBundles)."""
    config.validate()
    records = records if records is not None else evaluate.apply_subsample(
        cohort.subjects, config.subsample)
    fold_plan = fold_plan or evaluate.make_folds(records, config.scheme,
                                                 seed=config.master_seed)
    cache = _CohortCache(cohort, config)
    bundles = []
    for f, (train, test) in enumerate(fold_plan):
        bundle = prepare_fold(cohort, records, config, f, train, test, cache)
        evaluate_fold(bundle, records, config)
        bundles.append(bundle)
    return [b.record for b in bundles], bundles


def run_learning_curve(cohort, config: PipelineConfig, fractions, records=None,
                       fold_plan=None):
    """Learning curve with fixed per-fold test sets and nested training
    subsets; the atlas and covariances of each fold are reused, only the
    training-side fits are repeated per subset."""
    config.validate()
    records = records if records is not None else evaluate.apply_subsample(
        cohort.subjects, config.subsample)
    fold_plan = fold_plan or evaluate.make_folds(records, config.scheme,
                                                 seed=config.master_seed)
    cache = _CohortCache(cohort, config)
    bundles = {}

    def train_score(train_sub, test_ids):
        key = test_ids
        if key not in bundles:
            full_train = next(tr for tr, te in fold_plan if te == test_ids)
            bundles[key] = prepare_fold(cohort, records, config,
                                        len(bundles), full_train, test_ids,
                                        cache)
        rec = evaluate_fold(bundles[key], records, config, train_ids=train_sub,
                            update_bundle=False)
        return rec.accuracy

    return evaluate.learning_curve(train_score, fold_plan, records, fractions,
                                   seed=config.master_seed)


# --- grid execution ---------------------------------------------------------------

_GRID_AXES = ("atlas_method", "smoothing_fwhm_mm", "n_regions", "matrix_kind",
              "classifier", "scheme", "subsample")


def expand_grid(base: PipelineConfig, grid: dict):
    """Sorted cartesian product of grid axes over a base config."""
    unknown = set(grid) - set(_GRID_AXES)
    if unknown:
        raise ValueError(f"unknown grid axes: {sorted(unknown)}; "
                         f"allowed: {_GRID_AXES}")
    axes = [(axis, sorted(grid[axis], key=str)) for axis in _GRID_AXES
            if axis in grid]
    configs = []
    for combo in itertools.product(*(values for _, values in axes)):
        payload = asdict(base)
        payload.update({axis: value for (axis, _), value in zip(axes, combo)})
        configs.append(PipelineConfig(**payload).validate())
    return configs


def _run_one_job(args):
    cohort, config = args
    scores, bundles = run_pipeline(cohort, config)
    return config, scores, bundles


def run_grid(cohort, base_config: PipelineConfig, grid: dict, out_dir,
             jobs=1, fractions=None):
    """Execute every pipeline in the grid and write all artifacts.

    Emits scores.csv (rows sorted by config then fold), per-pipeline
    atlas/features/model files, optional learning curves, and a manifest.
    Raises RuntimeError if any fold fails.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    configs = expand_grid(base_config, grid)
    t0 = time.time()

    job_args = [(cohort, cfg) for cfg in configs]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one_job, job_args))
    else:
        results = [_run_one_job(a) for a in job_args]

    all_records = []
    artifact_paths = {}
    curve_rows = []
    for cfg, scores, bundles in results:
        all_records.extend(scores)
        artifact_paths.update(_write_pipeline_artifacts(out, cfg, bundles))
        if fractions:
            rows, _ = run_learning_curve(cohort, cfg, fractions)
            for row in rows:
                row.update(config=config_hash(cfg))
                curve_rows.append(row)

    all_records.sort(key=lambda r: (r.atlas_method, r.n_regions, r.matrix_kind,
                                    r.classifier, r.scheme, r.subsample, r.fold))
    scores_path = out / "scores.csv"
    write_scores_csv(all_records, scores_path)
    if curve_rows:
        _write_curves_csv(curve_rows, out / "curves.csv")

    manifest = RunManifest(
        config_hash=config_hash({"base": asdict(base_config), "grid": grid}),
        cohort_hash=cohort_fingerprint(cohort),
        module_versions=_module_versions(),
        artifact_paths=artifact_paths,
        wall_clock={"run_s": time.time() - t0},
    )
    manifest.write(out / "manifest.json")
    return all_records


def _write_pipeline_artifacts(out: Path, config: PipelineConfig, bundles):
    pdir = out / "pipelines" / config_hash(config)
    pdir.mkdir(parents=True, exist_ok=True)
    (pdir / "pipeline.json").write_text(
        json.dumps(asdict(config), sort_keys=True, indent=2))
    (pdir / "atlas_meta.json").write_text(json.dumps({
        "method": config.atlas_method,
        "n_regions": config.n_regions,
        "smoothing_fwhm_mm": config.smoothing_fwhm_mm,
        "folds": {str(b.fold): {
            "region_sizes": b.atlas.region_sizes.tolist(),
            "fit_subjects": sorted(b.atlas.fit_subjects or ()),
        } for b in bundles},
    }, sort_keys=True, indent=2))
    paths = {}
    for bundle in bundles:
        f = bundle.fold
        atlas_path = pdir / f"atlas_fold{f}.csv"
        with open(atlas_path, "w") as fh:
            fh.write("voxel,label\n")
            for voxel, label in enumerate(bundle.atlas.labels):
                fh.write(f"{voxel},{label}\n")
        (pdir / f"atlas_meta_fold{f}.json").write_text(json.dumps({
            "method": bundle.atlas.method,
            "n_regions": int(bundle.atlas.n_regions),
            "region_sizes": bundle.atlas.region_sizes.tolist(),
            "lattice_dims": list(bundle.atlas.lattice_dims),
            "fit_subjects": sorted(bundle.atlas.fit_subjects or ()),
        }, sort_keys=True, indent=2))

        feat_path = pdir / f"features_fold{f}.csv"
        with open(feat_path, "w") as fh:
            for sid in sorted(bundle.covariances):
                vec = connectivity.parameterize(
                    bundle.covariances[sid], config.matrix_kind,
                    bundle.tangent_ref)
                values = ",".join("%.17g" % v for v in vec)
                fh.write(f"{sid},{config.matrix_kind},{values}\n")

        model_payload = bundle.model.to_json_dict()
        model_payload["config_hash"] = config_hash(config)
        model_payload["fold"] = f
        (pdir / f"model_fold{f}.json").write_text(
            json.dumps(model_payload, sort_keys=True, indent=2))
        paths[f"{config_hash(config)}/fold{f}"] = str(atlas_path)
    return paths


def write_scores_csv(records, path):
    with open(path, "w") as fh:
        fh.write(",".join(evaluate.ScoreRecord.FIELDS) + "\n")
        for r in records:
            row = []
            for name in evaluate.ScoreRecord.FIELDS:
                value = getattr(r, name)
                row.append("%.17g" % value if isinstance(value, float) else str(value))
            fh.write(",".join(row) + "\n")
    return path


def read_scores_csv(path):
    lines = Path(path).read_text().strip().splitlines()
    header = lines[0].split(",")
    if header != list(evaluate.ScoreRecord.FIELDS):
        raise ValueError(f"unexpected scores.csv header: {header}")
    records = []
    for line in lines[1:]:
        parts = line.split(",")
        records.append(evaluate.ScoreRecord(
            atlas_method=parts[0], n_regions=int(parts[1]), matrix_kind=parts[2],
            classifier=parts[3], scheme=parts[4], subsample=int(parts[5]),
            fold=int(parts[6]), accuracy=float(parts[7]),
            specificity=float(parts[8]), sensitivity=float(parts[9])))
    return records


def _write_curves_csv(rows, path):
    with open(path, "w") as fh:
        fh.write("config,fraction,fold,accuracy\n")
        for row in sorted(rows, key=lambda r: (r["config"], r["fraction"],
                                               r["fold"])):
            fh.write(f"{row['config']},{row['fraction']!r},{row['fold']},"
                     f"{'%.17g' % row['accuracy']}\n")
    return path


# --- biomarkers -------------------------------------------------------------------


def load_fold_bundles(pipeline_dir, lattice_dims):
    """Rebuild the light parts of fold bundles (atlas, model) from a
    finished run's artifact directory."""
    pdir = Path(pipeline_dir)
    bundles = []
    for f in itertools.count():
        atlas_path = pdir / f"atlas_fold{f}.csv"
        if not atlas_path.exists():
            break
        labels = np.array([int(line.split(",")[1])
                           for line in atlas_path.read_text().strip()
                           .splitlines()[1:]])
        meta = json.loads((pdir / f"atlas_meta_fold{f}.json").read_text())
        atlas = Parcellation(labels=labels, lattice_dims=tuple(lattice_dims),
                             method=meta["method"],
                             fit_subjects=frozenset(meta["fit_subjects"]))
        payload = json.loads((pdir / f"model_fold{f}.json").read_text())
        model = classify.LinearModel(
            weights=np.asarray(payload["weights"]),
            intercept=payload["intercept"], penalty=payload["penalty"],
            loss=payload["loss"], hyperparameter=payload["hyperparameter"],
            scaler_mean=np.asarray(payload["scaler_mean"]),
            scaler_scale=np.asarray(payload["scaler_scale"]))
        bundles.append(FoldBundle(fold=f, train_ids=tuple(meta["fit_subjects"]),
                                  test_ids=(), atlas=atlas, maps=None,
                                  covariances=None, model=model))
    if not bundles:
        raise FileNotFoundError(f"no fold artifacts under {pdir}")
    return bundles


def run_biomarkers(cohort, config: PipelineConfig, bundles, n_permutations=1000,
                   seed=0, dice_threshold=0.9):
    """Consensus atlas over fold parcellations + edge-level significance.

    Regions stable across folds (best-partner DICE >= threshold) define a
    consensus parcellation; features on it are residualized against
    site/age/sex and a classifier of the configured family is refit under
    label permutations to attach a p-value to every consensus edge.
    """
    consensus = parcellation.consensus_atlas([b.atlas for b in bundles],
                                             dice_threshold=dice_threshold)
    if consensus.n_regions == 0:
        raise RuntimeError("empty consensus atlas: no region is stable across "
                           "folds at the requested DICE threshold")
    maps = consensus.indicator_maps()
    records = evaluate.apply_subsample(cohort.subjects, config.subsample)
    noise_roi = cohort.ground_truth.noise_roi if cohort.ground_truth else None

    features = []
    covs = []
    for rec in records:
        series, _ = signals.clean_region_signals(
            cohort.voxel_data[rec.subject_id], maps, rec.motion_params, noise_roi)
        covs.append(connectivity.ledoit_wolf(series))
    reference = None
    if config.matrix_kind == "tangent":
        reference = connectivity.fit_tangent_reference(
            covs, fit_subjects=[r.subject_id for r in records])
    for cov in covs:
        features.append(connectivity.parameterize(cov, config.matrix_kind,
                                                   reference))
    features = np.stack(features)
    covariates, _ = connectivity.build_covariates(records)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        features, _ = connectivity.regress_out_group_confounds(
            features, covariates, np.arange(len(records)),
            fit_subjects=[r.subject_id for r in records])
    y = np.array([r.diagnosis for r in records], dtype=float)

    hyper = float(np.median([b.model.hyperparameter for b in bundles
                             if b.model is not None] or [1.0]))

    def fit_fn(X, labels):
        return classify.fit_classifier(X, labels, config.classifier, hyper)

    significance = classify.permutation_weight_pvalues(
        features, y, fit_fn, n_permutations=n_permutations, seed=seed)

    pairs = connectivity.feature_edge_pairs(consensus.n_regions,
                                            config.matrix_kind)
    edges = []
    for idx, (i, j) in enumerate(pairs):
        if i == j:
            continue  # tangent diagonals are not edges
        weight = float(significance.observed_weights[idx])
        edges.append({
            "region_i": int(i), "region_j": int(j),
            "weight": weight,
            "p_value": float(significance.p_values[idx]),
            "stronger_in": "case" if weight > 0 else "control",
        })
    edges.sort(key=lambda e: (e["p_value"], -abs(e["weight"])))
    return {"consensus": consensus, "edges": edges,
            "n_permutations": n_permutations, "hyperparameter": hyper}
