import numpy as np
import pytest

from connectome_kit import parcellation as pc
from connectome_kit import synthdata


def two_blob_phantom(seed, noise=0.01, dims=(4, 4, 2), n_time=60):
    """Two spatial halves carrying independent signals."""
    rng = np.random.default_rng(seed)
    p = dims[0] * dims[1] * dims[2]
    idx = np.arange(p).reshape(dims)
    labels = np.zeros(p, dtype=int)
    labels[idx[dims[0] // 2:].ravel()] = 1
    sig = rng.standard_normal((n_time, 2))
    Y = sig[:, labels] + noise * rng.standard_normal((n_time, p))
    return Y, labels, dims


def brute_force_ward(X, k):
    """Naive Ward agglomeration recomputing every pairwise cost from the
    raw points at each step; merge order is the oracle for the fast path."""
    clusters = [[i] for i in range(len(X))]
    merges = []
    while len(clusters) > k:
        best, best_pair = np.inf, None
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                ma = X[clusters[a]].mean(axis=0)
                mb = X[clusters[b]].mean(axis=0)
                na, nb = len(clusters[a]), len(clusters[b])
                cost = na * nb / (na + nb) * float((ma - mb) @ (ma - mb))
                if cost < best:
                    best, best_pair = cost, (a, b)
        a, b = best_pair
        merges.append((tuple(sorted(clusters[a])), tuple(sorted(clusters[b]))))
        clusters[a] = clusters[a] + clusters[b]
        del clusters[b]
    labels = np.empty(len(X), dtype=int)
    for lab, members in enumerate(clusters):
        labels[members] = lab
    return labels, merges


class TestGaussianSmooth:
    def test_zero_fwhm_is_identity(self):
        rng = np.random.default_rng(0)
        Y = rng.standard_normal((5, 27))
        out = pc.gaussian_smooth(Y, 0.0, 3.0, (3, 3, 3))
        np.testing.assert_array_equal(out, Y)

    def test_constant_volume_unchanged(self):
        Y = np.full((4, 125), 2.5)
        out = pc.gaussian_smooth(Y, 10.0, 2.0, (5, 5, 5))
        np.testing.assert_allclose(out, Y, atol=1e-12)

    def test_impulse_response_matches_kernel_oracle(self):
        # closed-form oracle: separable normalized sampled Gaussian
        dims = (9, 9, 9)
        fwhm, voxel = 8.0, 4.0
        sigma = fwhm / (2.0 * np.sqrt(2.0 * np.log(2.0))) / voxel
        radius = int(np.ceil(4.0 * sigma))
        x = np.arange(-radius, radius + 1)
        kern = np.exp(-0.5 * (x / sigma) ** 2)
        kern = kern / kern.sum()

        Y = np.zeros((1, 9 * 9 * 9))
        center = np.ravel_multi_index((4, 4, 4), dims)
        Y[0, center] = 1.0
        out = pc.gaussian_smooth(Y, fwhm, voxel, dims).reshape(dims)
        assert abs(out[4, 4, 4] - kern[radius] ** 3) < 1e-6
        assert abs(out[4, 4, 4 + 1] - kern[radius] ** 2 * kern[radius + 1]) < 1e-6
        np.testing.assert_allclose(out.sum(), 1.0, atol=1e-12)

    def test_negative_fwhm_rejected(self):
        with pytest.raises(ValueError):
            pc.gaussian_smooth(np.ones((2, 8)), -1.0, 3.0, (2, 2, 2))


class TestKMeans:
    def test_single_cluster(self):
        rng = np.random.default_rng(0)
        Y = rng.standard_normal((20, 27))
        atlas = pc.kmeans_parcellate(Y, 1, seed=0, lattice_dims=(3, 3, 3))
        assert atlas.n_regions == 1
        assert (atlas.labels == 0).all()

    def test_two_blob_recovery(self):
        Y, truth, dims = two_blob_phantom(3)
        atlas = pc.kmeans_parcellate(Y, 2, seed=5, lattice_dims=dims)
        assert pc.adjusted_rand_index(atlas.labels, truth) == 1.0

    def test_deterministic_given_seed(self):
        Y, _, dims = two_blob_phantom(1, noise=0.5)
        a = pc.kmeans_parcellate(Y, 4, seed=9, lattice_dims=dims)
        b = pc.kmeans_parcellate(Y, 4, seed=9, lattice_dims=dims)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_lloyd_inertia_monotone(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((100, 5))
        centers = pc._kmeans_pp_init(X, 6, rng)
        _, final, history = pc._lloyd(X, centers)
        assert all(a >= b - 1e-9 for a, b in zip(history, history[1:]))
        assert final == history[-1]
        assert final <= history[0]

    def test_k_above_voxniction_rejected(self):
        with pytest.raises(ValueError):
            pc.kmeans_parcellate(np.ones((5, 4)), 10, seed=0)


class TestWard:
    def test_k_equals_p_gives_singletons(self):
        rng = np.random.default_rng(0)
        dims = (2, 2, 2)
        Y = rng.standard_normal((10, 8))
        atlas = pc.ward_parcellate(Y, 8, pc.lattice_adjacency(dims),
                                   lattice_dims=dims)
        assert atlas.n_regions == 8
        assert (atlas.region_sizes == 1).all()

    def test_two_blob_recovery(self):
        Y, truth, dims = two_blob_phantom(7)
        atlas = pc.ward_parcellate(Y, 2, pc.lattice_adjacency(dims),
                                   lattice_dims=dims)
        assert pc.adjusted_rand_index(atlas.labels, truth) == 1.0

    def test_clusters_always_connected(self):
        rng = np.random.default_rng(11)
        dims = (4, 4, 4)
        Y = rng.standard_normal((20, 64))
        nbrs = pc.lattice_adjacency(dims)
        for k in (3, 7, 15):
            atlas = pc.ward_parcellate(Y, k, nbrs, lattice_dims=dims)
            assert atlas.n_regions == k
            for region in range(k):
                assert pc.region_is_connected(atlas.labels, region, nbrs)

    def test_complete_graph_matches_brute_force_oracle(self):
        rng = np.random.default_rng(13)
        n = 30
        X = rng.standard_normal((n, 3))
        complete = [[j for j in range(n) if j != i] for i in range(n)]
        for k in (2, 5, 9):
            fast = pc.ward_parcellate(X.T.copy(), k, complete)
            oracle_labels, _ = brute_force_ward(X, k)
            assert pc.adjusted_rand_index(fast.labels, oracle_labels) == 1.0

    def test_k_below_components_rejected(self):
        # two disconnected singleton-pair components
        nbrs = [[1], [0], [3], [2]]
        with pytest.raises(ValueError, match="components"):
            pc.ward_parcellate(np.ones((4, 4)), 1, nbrs)


class TestSelectLargestRois:
    def test_exact_count_is_identity(self):
        atlas = synthdata.generate_atlas_phantom((5, 5, 4), 10, seed=0)
        maps = pc.select_largest_rois(atlas, m=10)
        np.testing.assert_array_equal(maps, atlas.indicator_maps())

    def test_keeps_largest_by_size(self):
        labels = np.repeat(np.arange(5), [1, 2, 3, 4, 5])
        atlas = synthdata.Parcellation(labels=labels, lattice_dims=(15, 1, 1))
        maps = pc.select_largest_rois(atlas, m=2)
        sizes = (maps != 0).sum(axis=1)
        assert sorted(sizes.tolist()) == [4, 5]

    def test_default_m_is_84(self):
        import inspect

        assert inspect.signature(pc.select_largest_rois).parameters["m"].default \
            == 84

    def test_too_few_regions_rejected(self):
        atlas = synthdata.generate_atlas_phantom((3, 3, 3), 4, seed=0)
        with pytest.raises(ValueError, match="fewer"):
            pc.select_largest_rois(atlas, m=10)

    def test_sizes_are_suffix_of_sorted_sequence(self):
        atlas = synthdata.generate_atlas_phantom((6, 6, 5), 12, seed=3)
        maps = pc.select_largest_rois(atlas, m=5)
        kept = sorted((maps != 0).sum(axis=1).tolist())
        all_sizes = sorted(atlas.region_sizes.tolist())
        assert kept == all_sizes[-5:]


class TestDice:
    def test_identity(self):
        assert pc.dice([1, 2, 3], [1, 2, 3]) == 1.0

    def test_disjoint(self):
        assert pc.dice([0, 1], [2, 3]) == 0.0

    def test_forced_value(self):
        assert pc.dice([0, 1, 2, 3], [1, 2, 3, 8, 9, 10]) == 0.6

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = set(rng.choice(40, size=rng.integers(1, 20), replace=False))
            b = set(rng.choice(40, size=rng.integers(1, 20), replace=False))
            assert pc.dice(a, b) == pc.dice(b, a)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            pc.dice([], [1])


class TestConsensus:
    def test_identical_atlases(self):
        atlas = synthdata.generate_atlas_phantom((5, 5, 4), 8, seed=2)
        cons = pc.consensus_atlas([atlas] * 10, dice_threshold=0.9)
        np.testing.assert_array_equal(cons.labels, atlas.labels)

    def test_jittered_region_dropped(self):
        # region 0 is a 1x9 strip; moving one voxel gives DICE 16/18 < 0.9
        labels_a = np.array([0] * 9 + [1] * 9)
        labels_b = np.array([1] + [0] * 9 + [1] * 8)
        dims = (18, 1, 1)
        a = synthdata.Parcellation(labels=labels_a, lattice_dims=dims)
        b = synthdata.Parcellation(labels=labels_b, lattice_dims=dims)
        set_a0 = set(np.flatnonzero(labels_a == 0).tolist())
        set_b0 = set(np.flatnonzero(labels_b == 0).tolist())
        assert abs(pc.dice(set_a0, set_b0) - 16.0 / 18.0) < 1e-12
        cons = pc.consensus_atlas([a, b], dice_threshold=0.9)
        assert cons.n_regions == 0 or 0 not in np.unique(cons.labels)

    def test_zero_threshold_keeps_all_first_atlas_regions(self):
        a = synthdata.generate_atlas_phantom((4, 4, 3), 6, seed=0)
        b = synthdata.generate_atlas_phantom((4, 4, 3), 6, seed=99)
        cons = pc.consensus_atlas([a, b], dice_threshold=0.0)
        assert cons.n_regions == 6

    def test_no_survivors_flagged(self):
        labels_a = np.arange(12) // 3  # 4 regions of 3
        labels_b = (np.arange(12) + 1) % 12 // 3
        dims = (12, 1, 1)
        a = synthdata.Parcellation(labels=labels_a, lattice_dims=dims)
        b = synthdata.Parcellation(labels=labels_b, lattice_dims=dims)
        with pytest.warns(UserWarning, match="no region survived"):
            cons = pc.consensus_atlas([a, b], dice_threshold=0.999)
        assert cons.n_regions == 0


class TestAdjustedRand:
    def test_identical_partitions(self):
        labels = np.array([0, 0, 1, 1, 2, 2])
        assert pc.adjusted_rand_index(labels, labels[::-1] * 0 + labels) == 1.0

    def test_permuted_labels_are_identical(self):
        labels = np.array([0, 0, 1, 1, 2, 2])
        permuted = np.array([2, 2, 0, 0, 1, 1])
        assert pc.adjusted_rand_index(labels, permuted) == 1.0

    def test_known_value_against_reference(self):
        from sklearn.metrics import adjusted_rand_score

        rng = np.random.default_rng(0)
        for _ in range(10):
            a = rng.integers(0, 4, size=50)
            b = rng.integers(0, 3, size=50)
            assert abs(pc.adjusted_rand_index(a, b)
                       - adjusted_rand_score(a, b)) < 1e-12
