import json

import numpy as np
import pytest

from connectome_kit import signals, synthdata
from connectome_kit.parcellation import lattice_adjacency, region_is_connected


def test_atlas_phantom_singletons_when_k_equals_voxels():
    atlas = synthdata.generate_atlas_phantom((1, 1, 4), 4, seed=123)
    assert sorted(atlas.labels.tolist()) == [0, 1, 2, 3]
    assert (atlas.region_sizes == 1).all()


def test_atlas_phantom_covers_lattice_with_connected_regions():
    atlas = synthdata.generate_atlas_phantom((10, 10, 10), 20, seed=0)
    assert atlas.n_regions == 20
    assert (atlas.labels >= 0).all()
    assert atlas.region_sizes.sum() == 1000
    nbrs = lattice_adjacency((10, 10, 10))
    for region in range(20):
        assert region_is_connected(atlas.labels, region, nbrs)


def test_atlas_phantom_deterministic():
    a = synthdata.generate_atlas_phantom((10, 10, 10), 20, seed=0)
    b = synthdata.generate_atlas_phantom((10, 10, 10), 20, seed=0)
    assert np.array_equal(a.labels, b.labels)


def test_atlas_phantom_rejects_bad_inputs():
    with pytest.raises(ValueError):
        synthdata.generate_atlas_phantom((2, 2, 1), 5, seed=0)
    with pytest.raises(ValueError):
        synthdata.generate_atlas_phantom((0, 3, 3), 2, seed=0)


def test_case_fraction_validated():
    cfg = synthdata.CohortConfig(case_fraction=1.0)
    with pytest.raises(ValueError, match="case_fraction"):
        cfg.validate()
    with pytest.raises(ValueError, match="case_fraction"):
        synthdata.CohortConfig(case_fraction=0.0).validate()


def test_non_spd_perturbation_rejected():
    cfg = synthdata.CohortConfig(k_regions=4, lattice_dims=(3, 3, 3),
                                 effect_delta=5.0, n_discriminative_edges=2)
    with pytest.raises(ValueError, match="SPD"):
        synthdata.generate_cohort(cfg, 0)


def test_null_effect_gives_identical_group_covariances():
    cfg = synthdata.CohortConfig(n_sites=2, subjects_per_site=4,
                                 n_timepoints=40, k_regions=4,
                                 lattice_dims=(3, 3, 3), effect_delta=0.0)
    cohort = synthdata.generate_cohort(cfg, 5)
    base = cohort.ground_truth.base_covariance
    for i, j, delta in cohort.ground_truth.discriminative_edges:
        assert delta == 0.0
    np.testing.assert_array_equal(base, base.T)
    np.linalg.cholesky(base)  # SPD


def test_generation_deterministic_bytes(small_cohort):
    cfg = synthdata.CohortConfig(
        n_sites=4, subjects_per_site=6, n_timepoints=80, k_regions=5,
        lattice_dims=(4, 4, 3), effect_delta=0.4, n_discriminative_edges=2,
        site_gain_range=(0.9, 1.1), site_offset_range=(0.0, 0.4),
        site_noise_range=(0.2, 0.35), drift_scale=0.3,
        physio_noise_scale=1.2, noise_roi_fraction=0.12, motion_coupling=True)
    again = synthdata.generate_cohort(cfg, master_seed=42)
    for rec in small_cohort.subjects:
        assert small_cohort.voxel_data[rec.subject_id].tobytes() == \
            again.voxel_data[rec.subject_id].tobytes()
        other = next(r for r in again.subjects if r.subject_id == rec.subject_id)
        assert rec.motion_params.tobytes() == other.motion_params.tobytes()
        assert (rec.age, rec.sex, rec.handedness) == (other.age, other.sex,
                                                      other.handedness)


def test_subject_invariants(small_cohort):
    ids = [r.subject_id for r in small_cohort.subjects]
    assert len(ids) == len(set(ids))
    n = small_cohort.voxel_data[0].shape[0]
    for rec in small_cohort.subjects:
        assert rec.motion_params.shape == (n, 6)
        assert rec.diagnosis in (-1, 1)
    # both diagnoses present at every site
    for site in {r.site_id for r in small_cohort.subjects}:
        dx = {r.diagnosis for r in small_cohort.subjects if r.site_id == site}
        assert dx == {-1, 1}


def test_empirical_region_covariance_converges_to_planted():
    """Monte-Carlo oracle: with all nuisances off, the covariance of the
    extracted region series approaches the planted covariance as 1/sqrt(n)."""
    errors = []
    for n in (200, 2000, 20000):
        cfg = synthdata.CohortConfig(
            n_sites=1, subjects_per_site=2, n_timepoints=n, k_regions=4,
            lattice_dims=(3, 3, 3), effect_delta=0.0,
            site_gain_range=(1.0, 1.0), site_offset_range=(0.0, 0.0),
            site_noise_range=(0.0, 0.0), drift_scale=0.0,
            physio_noise_scale=0.0, noise_roi_fraction=0.0)
        cohort = synthdata.generate_cohort(cfg, 17)
        control = next(r for r in cohort.subjects if r.diagnosis == -1)
        maps = cohort.ground_truth.atlas.indicator_maps()
        U = signals.extract_region_signals(
            cohort.voxel_data[control.subject_id], maps)
        emp = np.cov(U.T, bias=True)
        errors.append(np.linalg.norm(emp - cohort.ground_truth.base_covariance,
                                     "fro"))
    assert errors[0] > errors[1] > errors[2]
    # 1/sqrt(n) trend: 10x more samples should shrink error by ~sqrt(10)
    assert errors[2] < errors[0] / 3.0


def test_cohort_io_roundtrip(tmp_path, small_cohort):
    out = synthdata.write_cohort(small_cohort, tmp_path / "cohort")
    loaded = synthdata.load_cohort(out)
    assert loaded.master_seed == small_cohort.master_seed
    assert loaded.lattice_dims == small_cohort.lattice_dims
    for rec in small_cohort.subjects:
        np.testing.assert_array_equal(loaded.voxel_data[rec.subject_id],
                                      small_cohort.voxel_data[rec.subject_id])
        other = next(r for r in loaded.subjects
                     if r.subject_id == rec.subject_id)
        np.testing.assert_array_equal(other.motion_params, rec.motion_params)
        assert other.age == rec.age
    gt, gt2 = small_cohort.ground_truth, loaded.ground_truth
    np.testing.assert_array_equal(gt.atlas.labels, gt2.atlas.labels)
    np.testing.assert_array_equal(gt.base_covariance, gt2.base_covariance)
    assert gt.discriminative_edges == gt2.discriminative_edges
    assert gt.site_profiles == gt2.site_profiles


def test_write_cohort_stable_bytes(tmp_path, small_cohort):
    a = synthdata.write_cohort(small_cohort, tmp_path / "a")
    b = synthdata.write_cohort(small_cohort, tmp_path / "b")
    for name in ("phenotype.csv", "ground_truth.json", "sub-0_voxels.csv",
                 "sub-0_motion.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_ground_truth_json_is_sorted_json(tmp_path, small_cohort):
    out = synthdata.write_cohort(small_cohort, tmp_path / "c")
    payload = json.loads((out / "ground_truth.json").read_text())
    assert set(payload) == {"lattice_dims", "master_seed", "atlas_labels",
                            "base_covariance", "discriminative_edges",
                            "site_profiles", "noise_roi"}


def test_config_from_dict_rejects_unknown_fields():
    with pytest.raises(ValueError, match="nonsense"):
        synthdata.config_from_dict({"nonsense": 3})


def test_site_separability_null_diagnosis():
    """Site effects alone must separate sites but not diagnoses: a site
    classifier on mean regional signal beats site-chance while the
    diagnosis classifier stays within 5 points of chance (20 seeds)."""
    from connectome_kit import classify, evaluate, signals

    site_gaps, dx_gaps = [], []
    for seed in range(20):
        cfg = synthdata.CohortConfig(
            n_sites=3, subjects_per_site=30, n_timepoints=60, k_regions=4,
            lattice_dims=(3, 3, 3), effect_delta=0.0,
            site_offset_range=(0.5, 2.5), site_noise_range=(0.2, 0.3))
        cohort = synthdata.generate_cohort(cfg, 1000 + seed)
        maps = cohort.ground_truth.atlas.indicator_maps()
        feats, sites, dx = [], [], []
        for rec in cohort.subjects:
            U = signals.extract_region_signals(
                cohort.voxel_data[rec.subject_id], maps)
            feats.append(U.mean(axis=0))
            sites.append(rec.site_id)
            dx.append(rec.diagnosis)
        feats = np.asarray(feats)
        sites = np.asarray(sites)
        dx = np.asarray(dx, dtype=float)

        rng = np.random.default_rng(seed)
        order = rng.permutation(len(dx))
        split = len(dx) // 2
        tr, te = order[:split], order[split:]

        for target_site in range(3):  # one-vs-rest per site
            site_y = np.where(sites == target_site, 1.0, -1.0)
            m_site = classify.fit_ridge_classifier(feats[tr], site_y[tr],
                                                   alpha=1.0)
            site_acc = float((m_site.predict(feats[te]) == site_y[te]).mean())
            site_gaps.append(site_acc - evaluate.dummy_chance(site_y, seed=seed))

        m_dx = classify.fit_ridge_classifier(feats[tr], dx[tr], alpha=1.0)
        dx_acc = float((m_dx.predict(feats[te]) == dx[te]).mean())
        dx_gaps.append(dx_acc - evaluate.dummy_chance(dx, seed=seed))

    assert np.mean(site_gaps) > 0.05  # sites separable on average
    assert abs(np.mean(dx_gaps)) <= 0.05  # diagnosis at chance
