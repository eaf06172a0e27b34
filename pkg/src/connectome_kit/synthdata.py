"""Reproducible multi-site cohorts on a small 3-D voxel lattice.

Each cohort carries planted ground truth: a hard atlas of face-connected
regions, a base region-level covariance, a set of group-discriminative
edges perturbed by a signed effect size, and per-site gain/offset/noise
profiles. Voxel signals are region latents mixed through the atlas plus
site effects, white noise, linear drift, a shared physiological noise
source over a "noise ROI", and an optional motion-coupled component.

Everything is a pure function of (config, master_seed): per-subject RNG
streams are derived by hashing the pair, so subjects can be generated in
any order (or in parallel) with identical results.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "SubjectRecord",
    "Parcellation",
    "GroundTruth",
    "Cohort",
    "CohortConfig",
    "generate_atlas_phantom",
    "generate_cohort",
    "write_cohort",
    "load_cohort",
]

# All floats serialized to text with 17 significant digits (exact roundtrip).
FLOAT_FMT = "%.17g"


@dataclass
class SubjectRecord:
    """Phenotype row driving stratification and nuisance regression."""

    subject_id: int
    site_id: int
    diagnosis: int  # case = +1, control = -1
    age: float
    sex: int  # 0 / 1
    handedness: int  # 1 = right, 0 = left
    motion_params: np.ndarray | None = None  # n x 6, translations mm then rotations rad

    def __post_init__(self):
        if self.diagnosis not in (-1, 1):
            raise ValueError("diagnosis must be +1 (case) or -1 (control)")
        if self.motion_params is not None and self.motion_params.shape[1] != 6:
            raise ValueError("motion_params must have exactly 6 columns")


@dataclass
class Parcellation:
    """Hard region labels over a voxel lattice."""

    labels: np.ndarray  # length p, region id per voxel (-1 = background)
    lattice_dims: tuple[int, int, int]
    fit_subjects: frozenset | None = None
    method: str = "planted"

    @property
    def n_regions(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    @property
    def region_sizes(self) -> np.ndarray:
        return np.bincount(self.labels[self.labels >= 0], minlength=self.n_regions)

    def indicator_maps(self) -> np.ndarray:
        """(k x p) binary indicator rows, one per region."""
        k = self.n_regions
        maps = np.zeros((k, self.labels.size))
        for r in range(k):
            maps[r, self.labels == r] = 1.0
        return maps


@dataclass
class GroundTruth:
    atlas: Parcellation
    base_covariance: np.ndarray  # k x k SPD
    discriminative_edges: list[tuple[int, int, float]]  # (i, j, signed delta)
    site_profiles: dict[int, dict[str, float]]  # site -> gain / offset / noise_sd
    noise_roi: np.ndarray  # voxel indices carrying the shared physiological source


@dataclass
class Cohort:
    subjects: list[SubjectRecord]
    voxel_data: dict[int, np.ndarray]  # subject_id -> n x p
    ground_truth: GroundTruth
    lattice_dims: tuple[int, int, int]
    master_seed: int

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.lattice_dims
        return nx * ny * nz


@dataclass
class CohortConfig:
    """Generation knobs; site-effect magnitudes are deliberately exposed
    rather than fixed, since no reference values exist for them."""

    n_sites: int = 4
    subjects_per_site: int = 10
    case_fraction: float = 0.5
    n_timepoints: int = 100
    k_regions: int = 8
    lattice_dims: tuple[int, int, int] = (6, 6, 6)
    effect_delta: float = 0.0  # covariance increment on discriminative edges
    n_discriminative_edges: int = 4
    site_gain_range: tuple[float, float] = (1.0, 1.0)
    site_offset_range: tuple[float, float] = (0.0, 0.0)
    site_noise_range: tuple[float, float] = (0.2, 0.2)
    drift_scale: float = 0.0  # per-subject linear drift amplitude
    motion_coupling: bool = False  # inject rank-1 motion component into voxels
    motion_coupling_scale: float = 0.5
    physio_noise_scale: float = 0.0  # shared source mixed into the noise ROI
    noise_roi_fraction: float = 0.04
    age_range: tuple[float, float] = (8.0, 40.0)
    male_fraction: float = 0.7
    right_handed_fraction: float = 0.9

    def validate(self):
        if not 0.0 < self.case_fraction < 1.0:
            raise ValueError("case_fraction must lie strictly inside (0, 1)")
        if self.n_sites < 1 or self.subjects_per_site < 1:
            raise ValueError("need at least one site and one subject per site")
        if self.k_regions < 2:
            raise ValueError("k_regions must be >= 2")
        nx, ny, nz = self.lattice_dims
        if nx * ny * nz <= 0:
            raise ValueError("zero-volume lattice")
        if self.k_regions > nx * ny * nz:
            raise ValueError("k_regions exceeds the number of lattice voxels")
        if self.n_timepoints < 3:
            raise ValueError("n_timepoints must be >= 3")


def _lattice_neighbors(dims):
    """Face (6-connectivity) neighbor lists for a box lattice."""
    nx, ny, nz = dims
    p = nx * ny * nz
    idx = np.arange(p).reshape(dims)
    nbrs = [[] for _ in range(p)]
    for axis in range(3):
        a = np.moveaxis(idx, axis, 0)
        for i, j in zip(a[:-1].ravel(), a[1:].ravel()):
            nbrs[i].append(int(j))
            nbrs[j].append(int(i))
    return nbrs


def generate_atlas_phantom(lattice_dims, k_regions, seed) -> Parcellation:
    """Plant ``k_regions`` face-connected regions covering the lattice.

    Regions are geodesic Voronoi cells of random seed voxels, grown by
    multi-source breadth-first search over the 6-connected lattice, so
    every region is a nonempty connected component by construction.
    """
    nx, ny, nz = lattice_dims
    p = nx * ny * nz
    if p <= 0:
        raise ValueError("zero-volume lattice")
    if k_regions > p:
        raise ValueError(f"k_regions={k_regions} exceeds {p} lattice voxels")
    if k_regions < 1:
        raise ValueError("k_regions must be >= 1")

    rng = np.random.default_rng(seed)
    seeds = rng.choice(p, size=k_regions, replace=False)
    labels = np.full(p, -1, dtype=int)
    queue = deque()
    for region, voxel in enumerate(seeds):
        labels[voxel] = region
        queue.append(int(voxel))
    nbrs = _lattice_neighbors(lattice_dims)
    while queue:
        voxel = queue.popleft()
        for other in nbrs[voxel]:
            if labels[other] < 0:
                labels[other] = labels[voxel]
                queue.append(other)
    return Parcellation(labels=labels, lattice_dims=tuple(lattice_dims), method="planted")


def _subject_rng(master_seed, subject_id) -> np.random.Generator:
    # hash-derived independent stream per subject: generation order never matters
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(subject_id)]))


def _site_rng(master_seed, site_id) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), 7919, int(site_id)]))


def _base_covariance(k, rng) -> np.ndarray:
    """Well-conditioned correlation-like SPD matrix with mild off-diagonals.

    Off-diagonals are halved so the smallest eigenvalue stays comfortably
    above typical effect sizes; edge perturbations up to ~0.6 remain SPD.
    """
    w = rng.normal(size=(k, 2 * k)) / np.sqrt(2 * k)
    sigma = w @ w.T + 0.5 * np.eye(k)
    d = np.sqrt(np.diag(sigma))
    corr = sigma / np.outer(d, d)
    return 0.5 * corr + 0.5 * np.eye(k)


def _is_spd(matrix) -> bool:
    try:
        np.linalg.cholesky(matrix)
        return True
    except np.linalg.LinAlgError:
        return False


def _group_covariances(base, edges):
    """Control and case covariances; the case one carries the edge deltas."""
    case = base.copy()
    for i, j, delta in edges:
        case[i, j] += delta
        case[j, i] += delta
    return base, case


def generate_cohort(config: CohortConfig, master_seed: int) -> Cohort:
    """Draw a full multi-site cohort with planted group structure.

    Per subject, region latents are sampled from a zero-mean Gaussian with
    the control covariance (controls) or the edge-perturbed one (cases),
    mixed through the planted indicator maps, then scaled and shifted by
    the site profile and polluted with white noise, drift, physiological
    noise and (optionally) a motion-coupled component. Noise-ROI voxels
    carry the shared physiological source but no region signal, mirroring
    a CSF-like compartment that nuisance regressors can latch onto.
    """
    config.validate()
    master = np.random.default_rng(np.random.SeedSequence([int(master_seed), 104729]))

    atlas = generate_atlas_phantom(config.lattice_dims, config.k_regions, master.integers(2**31))
    maps = atlas.indicator_maps()
    p = maps.shape[1]
    k = config.k_regions

    base = _base_covariance(k, master)
    n_edges = config.n_discriminative_edges
    if n_edges <= k // 2:
        # disjoint edges (no shared region) keep the perturbation's spectral
        # reach bounded by effect_delta itself
        perm = master.permutation(k)
        raw_pairs = [(int(perm[2 * e]), int(perm[2 * e + 1]))
                     for e in range(n_edges)]
    else:
        pairs = [(i, j) for i in range(k) for j in range(i)]
        chosen = master.choice(len(pairs), size=min(n_edges, len(pairs)),
                               replace=False)
        raw_pairs = [pairs[c] for c in chosen]
    signs = master.choice([-1.0, 1.0], size=len(raw_pairs))
    edges = [(max(i, j), min(i, j), float(s * config.effect_delta))
             for (i, j), s in zip(raw_pairs, signs)]
    control_cov, case_cov = _group_covariances(base, edges)
    for name, cov in (("control", control_cov), ("case", case_cov)):
        if not _is_spd(cov):
            raise ValueError(
                f"perturbed {name} covariance is not SPD; lower effect_delta "
                f"or n_discriminative_edges")

    # the noise ROI is a signal-free compartment (physio/acquisition noise
    # only); candidates that would take a region below half its voxels are
    # skipped so every region keeps a solid signal majority
    n_noise_vox = int(round(config.noise_roi_fraction * p))
    noise_roi = []
    signal_left = {r: int(s) for r, s in enumerate(atlas.region_sizes)}
    full_size = dict(signal_left)
    for voxel in master.permutation(p):
        if len(noise_roi) >= n_noise_vox:
            break
        region = int(atlas.labels[voxel])
        if signal_left[region] - 1 >= max(1, full_size[region] // 2):
            signal_left[region] -= 1
            noise_roi.append(int(voxel))
    noise_roi = np.sort(np.asarray(noise_roi, dtype=int))
    mixing_maps = maps.copy()
    if noise_roi.size:
        mixing_maps[:, noise_roi] = 0.0

    site_profiles = {}
    for site in range(config.n_sites):
        srng = _site_rng(master_seed, site)
        site_profiles[site] = {
            "gain": float(srng.uniform(*config.site_gain_range)),
            "offset": float(srng.uniform(*config.site_offset_range)),
            "noise_sd": float(srng.uniform(*config.site_noise_range)),
        }

    chol = {-1: np.linalg.cholesky(control_cov), 1: np.linalg.cholesky(case_cov)}
    n = config.n_timepoints
    t = np.arange(n)
    t_centered = (t - t.mean()) / n

    subjects, voxel_data = [], {}
    subject_id = 0
    n_cases = int(round(config.case_fraction * config.subjects_per_site))
    n_cases = min(max(n_cases, 1), config.subjects_per_site - 1)
    for site in range(config.n_sites):
        profile = site_profiles[site]
        for s in range(config.subjects_per_site):
            diagnosis = 1 if s < n_cases else -1
            rng = _subject_rng(master_seed, subject_id)

            age = float(rng.uniform(*config.age_range))
            sex = int(rng.random() < config.male_fraction)
            handed = int(rng.random() < config.right_handed_fraction)

            motion = np.cumsum(
                rng.normal(0.0, 1.0, size=(n, 6)) * np.r_[[0.05] * 3, [0.005] * 3],
                axis=0)

            latents = rng.standard_normal((n, k)) @ chol[diagnosis].T
            signal = latents @ mixing_maps

            data = profile["gain"] * signal + profile["offset"]
            data = data + rng.normal(0.0, profile["noise_sd"], size=(n, p))
            if config.drift_scale > 0:
                slopes = rng.normal(0.0, config.drift_scale, size=p)
                data = data + np.outer(t_centered, slopes)
            if config.physio_noise_scale > 0:
                source = rng.standard_normal(n)
                data[:, noise_roi] += config.physio_noise_scale * source[:, None]
            if config.motion_coupling:
                summary = motion - motion.mean(axis=0)
                summary = summary.sum(axis=1)
                norm = np.linalg.norm(summary)
                if norm > 0:
                    summary = summary / norm * np.sqrt(n)
                pattern = rng.standard_normal(p)
                data = data + config.motion_coupling_scale * np.outer(summary, pattern)

            subjects.append(SubjectRecord(subject_id, site, diagnosis, age, sex,
                                          handed, motion))
            voxel_data[subject_id] = data
            subject_id += 1

    ground_truth = GroundTruth(atlas=atlas, base_covariance=base,
                               discriminative_edges=edges,
                               site_profiles=site_profiles, noise_roi=noise_roi)
    return Cohort(subjects=subjects, voxel_data=voxel_data, ground_truth=ground_truth,
                  lattice_dims=tuple(config.lattice_dims), master_seed=int(master_seed))


# ---------------------------------------------------------------------------
# cohort directory I/O
# ---------------------------------------------------------------------------

def write_cohort(cohort: Cohort, out_dir) -> Path:
    """Write phenotype.csv, ground_truth.json and per-subject CSV matrices."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    lines = ["subject_id,site_id,diagnosis,age,sex,handedness"]
    for rec in cohort.subjects:
        lines.append(
            f"{rec.subject_id},{rec.site_id},{rec.diagnosis},"
            f"{FLOAT_FMT % rec.age},{rec.sex},{rec.handedness}")
    (out / "phenotype.csv").write_text("\n".join(lines) + "\n")

    gt = cohort.ground_truth
    payload = {
        "lattice_dims": list(cohort.lattice_dims),
        "master_seed": cohort.master_seed,
        "atlas_labels": gt.atlas.labels.tolist(),
        "base_covariance": gt.base_covariance.tolist(),
        "discriminative_edges": [[i, j, d] for i, j, d in gt.discriminative_edges],
        "site_profiles": {str(s): prof for s, prof in sorted(gt.site_profiles.items())},
        "noise_roi": gt.noise_roi.tolist(),
    }
    (out / "ground_truth.json").write_text(json.dumps(payload, sort_keys=True, indent=2))

    for rec in cohort.subjects:
        np.savetxt(out / f"sub-{rec.subject_id}_voxels.csv",
                   cohort.voxel_data[rec.subject_id], fmt=FLOAT_FMT, delimiter=",")
        np.savetxt(out / f"sub-{rec.subject_id}_motion.csv",
                   rec.motion_params, fmt=FLOAT_FMT, delimiter=",")
    return out


def load_cohort(cohort_dir) -> Cohort:
    """Inverse of :func:`write_cohort`."""
    base = Path(cohort_dir)
    payload = json.loads((base / "ground_truth.json").read_text())
    dims = tuple(payload["lattice_dims"])
    atlas = Parcellation(labels=np.asarray(payload["atlas_labels"], dtype=int),
                         lattice_dims=dims, method="planted")
    ground_truth = GroundTruth(
        atlas=atlas,
        base_covariance=np.asarray(payload["base_covariance"]),
        discriminative_edges=[(int(i), int(j), float(d))
                              for i, j, d in payload["discriminative_edges"]],
        site_profiles={int(s): prof for s, prof in payload["site_profiles"].items()},
        noise_roi=np.asarray(payload["noise_roi"], dtype=int),
    )

    subjects, voxel_data = [], {}
    pheno = (base / "phenotype.csv").read_text().strip().splitlines()
    for line in pheno[1:]:
        sid, site, dx, age, sex, handed = line.split(",")
        sid = int(sid)
        motion = np.loadtxt(base / f"sub-{sid}_motion.csv", delimiter=",", ndmin=2)
        subjects.append(SubjectRecord(sid, int(site), int(dx), float(age),
                                      int(sex), int(handed), motion))
        voxel_data[sid] = np.loadtxt(base / f"sub-{sid}_voxels.csv", delimiter=",",
                                     ndmin=2)
    return Cohort(subjects=subjects, voxel_data=voxel_data, ground_truth=ground_truth,
                  lattice_dims=dims, master_seed=int(payload["master_seed"]))


def config_from_dict(raw: dict) -> CohortConfig:
    """Build a config from parsed JSON, rejecting unknown keys."""
    known = {f for f in CohortConfig.__dataclass_fields__}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown cohort config fields: {sorted(unknown)}")
    cfg = CohortConfig(**{
        key: tuple(value) if isinstance(value, list) else value
        for key, value in raw.items()})
    cfg.validate()
    return cfg
