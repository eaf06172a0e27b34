import numpy as np
import pytest

from connectome_kit import synthdata


@pytest.fixture(scope="session")
def small_cohort():
    """Tiny multi-site cohort with every nuisance source switched on."""
    cfg = synthdata.CohortConfig(
        n_sites=4, subjects_per_site=6, n_timepoints=80, k_regions=5,
        lattice_dims=(4, 4, 3), effect_delta=0.4, n_discriminative_edges=2,
        site_gain_range=(0.9, 1.1), site_offset_range=(0.0, 0.4),
        site_noise_range=(0.2, 0.35), drift_scale=0.3,
        physio_noise_scale=1.2, noise_roi_fraction=0.12, motion_coupling=True)
    return synthdata.generate_cohort(cfg, master_seed=42)


@pytest.fixture(scope="session")
def ten_site_cohort():
    """Cohort large enough for inter-site folds and full pipeline runs."""
    cfg = synthdata.CohortConfig(
        n_sites=10, subjects_per_site=8, n_timepoints=90, k_regions=6,
        lattice_dims=(4, 4, 4), effect_delta=0.5, n_discriminative_edges=3,
        site_gain_range=(0.9, 1.1), site_offset_range=(0.0, 0.4),
        site_noise_range=(0.2, 0.35), drift_scale=0.2,
        physio_noise_scale=1.2, noise_roi_fraction=0.1)
    return synthdata.generate_cohort(cfg, master_seed=7)


def random_spd(k, rng, condition=10.0):
    """Random SPD matrix with eigenvalues spread up to ``condition``."""
    q, _ = np.linalg.qr(rng.standard_normal((k, k)))
    vals = np.linspace(1.0, condition, k)
    return (q * vals) @ q.T
