"""Data-driven parcellation of a voxel lattice.

Two estimators are provided: k-means on (optionally smoothed) voxel
profiles, and variance-minimizing hierarchical agglomeration restricted
to merges between face-adjacent clusters, so every cluster is a connected
component of the lattice. Atlases are always fitted on an explicit set of
training subjects and carry that set for downstream leakage audits.
"""

from __future__ import annotations

import heapq
import warnings

import numpy as np

from .synthdata import Parcellation, _lattice_neighbors

__all__ = [
    "lattice_adjacency",
    "gaussian_smooth",
    "kmeans_parcellate",
    "ward_parcellate",
    "select_largest_rois",
    "dice",
    "consensus_atlas",
    "adjusted_rand_index",
    "reduce_profiles",
]

FWHM_TO_SIGMA = 2.0 * np.sqrt(2.0 * np.log(2.0))


def lattice_adjacency(dims):
    """Neighbor lists under 6-connectivity (symmetric, no self edges)."""
    return _lattice_neighbors(dims)


def _gaussian_kernel(sigma):
    radius = int(np.ceil(4.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=float)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    return kernel / kernel.sum()


def gaussian_smooth(Y, fwhm_mm, voxel_size_mm, lattice_dims):
    """Per-timepoint separable 3-D Gaussian smoothing.

    sigma = fwhm / (2 sqrt(2 ln 2)) / voxel_size lattice units; the kernel
    is truncated at 4 sigma and edges are replicated. ``fwhm_mm = 0`` is
    the identity.
    """
    if fwhm_mm < 0:
        raise ValueError("fwhm must be non-negative")
    Y = np.asarray(Y, dtype=float)
    if fwhm_mm == 0:
        return Y.copy()
    sigma = fwhm_mm / FWHM_TO_SIGMA / voxel_size_mm
    kernel = _gaussian_kernel(sigma)
    radius = (len(kernel) - 1) // 2

    n = Y.shape[0]
    vol = Y.reshape((n,) + tuple(lattice_dims))
    for axis in range(1, 4):
        if radius == 0:
            continue
        pad = [(0, 0)] * 4
        pad[axis] = (radius, radius)
        padded = np.pad(vol, pad, mode="edge")
        out = np.zeros_like(vol)
        for tap, weight in enumerate(kernel):
            sl = [slice(None)] * 4
            sl[axis] = slice(tap, tap + vol.shape[axis])
            out += weight * padded[tuple(sl)]
        vol = out
    return vol.reshape(n, -1)


def reduce_profiles(Y, max_components=100):
    """PCA-reduce the time dimension of an (n x p) matrix to voxel scores.

    Returns a (p x r) matrix of voxel profiles, r = min(n, p,
    max_components), computed from the (p x p) Gram matrix so the time
    dimension is never materialized twice.
    """
    Y = np.asarray(Y, dtype=float)
    n, p = Y.shape
    r = min(n, p, max_components)
    gram = Y.T @ Y
    vals, vecs = np.linalg.eigh(gram)
    vals = np.clip(vals[::-1][:r], 0.0, None)
    vecs = vecs[:, ::-1][:, :r]
    return vecs * np.sqrt(vals)


# --- k-means ----------------------------------------------------------------

def _kmeans_pp_init(X, k, rng):
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    dist2 = ((X - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = dist2.sum()
        if total <= 0:
            centers[c] = X[rng.integers(n)]
            continue
        probs = dist2 / total
        centers[c] = X[rng.choice(n, p=probs)]
        dist2 = np.minimum(dist2, ((X - centers[c]) ** 2).sum(axis=1))
    return centers


def _assign(X, centers):
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    return labels, d2


def _lloyd(X, centers, max_iter=300):
    """Lloyd iterations; returns (labels, final inertia, inertia history)."""
    k = centers.shape[0]
    centers = centers.copy()
    history = []
    prev_labels = None
    for _ in range(max_iter):
        labels, d2 = _assign(X, centers)
        # empty clusters re-seed at the point farthest from its assigned center
        for empty in np.flatnonzero(np.bincount(labels, minlength=k) == 0):
            farthest = int(np.argmax(d2[np.arange(len(labels)), labels]))
            centers[empty] = X[farthest]
            labels[farthest] = empty
            d2[:, empty] = ((X - centers[empty]) ** 2).sum(axis=1)
        history.append(float(d2[np.arange(len(labels)), labels].sum()))
        if prev_labels is not None and np.array_equal(labels, prev_labels):
            break
        prev_labels = labels
        centers = np.stack([X[labels == c].mean(axis=0) for c in range(k)])
    return prev_labels if prev_labels is not None else labels, history[-1], history


def kmeans_parcellate(Y, k, seed, n_init=10, lattice_dims=None) -> Parcellation:
    """Cluster voxels by their (PCA-reduced) temporal profiles.

    The time dimension is reduced to min(n, 100) principal components,
    then Lloyd's algorithm with k-means++ seeding runs ``n_init`` times
    and the labeling with the lowest inertia wins. Deterministic given
    the seed.
    """
    Y = np.asarray(Y, dtype=float)
    n, p = Y.shape
    if k > p:
        raise ValueError(f"k={k} exceeds {p} voxels")
    X = reduce_profiles(Y) if n > 100 else Y.T.copy()
    rng = np.random.default_rng(seed)
    best_labels, best_inertia = None, np.inf
    for _ in range(n_init):
        centers = _kmeans_pp_init(X, k, rng)
        labels, inertia, _ = _lloyd(X, centers)
        if inertia < best_inertia:
            best_labels, best_inertia = labels, inertia
    labels = _canonical_labels(best_labels)
    dims = tuple(lattice_dims) if lattice_dims is not None else (p, 1, 1)
    return Parcellation(labels=labels, lattice_dims=dims, method="kmeans")


def _canonical_labels(labels):
    """Relabel clusters by order of first appearance (stable across runs
    that produce the same partition with permuted ids)."""
    mapping, out = {}, np.empty_like(labels)
    for i, lab in enumerate(labels):
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out[i] = mapping[lab]
    return out


# --- spatially constrained Ward ----------------------------------------------

def _ward_distance(size_a, mean_a, size_b, mean_b):
    diff = mean_a - mean_b
    return size_a * size_b / (size_a + size_b) * float(diff @ diff)


def ward_parcellate(Y, k, adjacency, lattice_dims=None) -> Parcellation:
    """Agglomerative variance-minimizing clustering under a spatial graph.

    Only clusters that are adjacent in the graph may merge, which keeps
    every cluster connected. Cluster-pair costs follow Ward's criterion,
    |A||B|/(|A|+|B|) ||mean_A - mean_B||^2 (the quantity the Lance-
    Williams update tracks), evaluated directly from cluster statistics.
    """
    Y = np.asarray(Y, dtype=float)
    X = Y.T.copy()  # voxels as samples
    p = X.shape[0]
    if isinstance(adjacency, (list, tuple)):
        nbr_lists = adjacency
    else:
        adjacency = np.asarray(adjacency)
        nbr_lists = [np.flatnonzero(row).tolist() for row in adjacency]
    if len(nbr_lists) != p:
        raise ValueError("adjacency size does not match the number of voxels")

    n_components = _count_components(nbr_lists)
    if k < n_components:
        raise ValueError(
            f"k={k} is below the {n_components} connected components of the graph")
    if k > p:
        raise ValueError(f"k={k} exceeds {p} voxels")

    sizes = {i: 1 for i in range(p)}
    means = {i: X[i].copy() for i in range(p)}
    neighbors = {i: set(nbr_lists[i]) for i in range(p)}
    parent = np.arange(2 * p - k + 1)

    heap = []
    for a in range(p):
        for b in nbr_lists[a]:
            if a < b:
                heapq.heappush(heap, (_ward_distance(1, X[a], 1, X[b]), a, b))

    alive = set(range(p))
    next_id = p
    while len(alive) > k:
        while heap:
            d, a, b = heapq.heappop(heap)
            if a in alive and b in alive and b in neighbors[a]:
                break
        else:
            raise RuntimeError("ran out of candidate merges; graph disconnected?")
        new = next_id
        next_id += 1
        size = sizes[a] + sizes[b]
        mean = (sizes[a] * means[a] + sizes[b] * means[b]) / size
        merged_nbrs = (neighbors[a] | neighbors[b]) - {a, b}
        for c in (a, b):
            for nb in neighbors[c]:
                neighbors[nb].discard(c)
            del sizes[c], means[c], neighbors[c]
            alive.discard(c)
        sizes[new], means[new], neighbors[new] = size, mean, merged_nbrs
        parent[a] = parent[b] = new
        alive.add(new)
        for c in merged_nbrs:
            neighbors[c].add(new)
            lo, hi = (c, new) if c < new else (new, c)
            heapq.heappush(
                heap, (_ward_distance(size, mean, sizes[c], means[c]), lo, hi))

    roots = sorted(alive)
    root_label = {root: lab for lab, root in enumerate(roots)}
    labels = np.empty(p, dtype=int)
    for i in range(p):
        node = i
        while parent[node] != node:
            node = parent[node]
        labels[i] = root_label[node]
    labels = _canonical_labels(labels)
    dims = tuple(lattice_dims) if lattice_dims is not None else (p, 1, 1)
    return Parcellation(labels=labels, lattice_dims=dims, method="ward")


def _count_components(nbr_lists):
    p = len(nbr_lists)
    seen = np.zeros(p, dtype=bool)
    components = 0
    for start in range(p):
        if seen[start]:
            continue
        components += 1
        stack = [start]
        seen[start] = True
        while stack:
            v = stack.pop()
            for w in nbr_lists[v]:
                if not seen[w]:
                    seen[w] = True
                    stack.append(w)
    return components


def region_is_connected(labels, region, nbr_lists) -> bool:
    voxels = np.flatnonzero(labels == region)
    if voxels.size == 0:
        return False
    member = np.zeros(len(labels), dtype=bool)
    member[voxels] = True
    seen = {int(voxels[0])}
    stack = [int(voxels[0])]
    while stack:
        v = stack.pop()
        for w in nbr_lists[v]:
            if member[w] and w not in seen:
                seen.add(w)
                stack.append(w)
    return len(seen) == voxels.size


# --- ROI selection, DICE, consensus ------------------------------------------

def select_largest_rois(atlas, m=84):
    """Indicator maps of the m largest regions (ties: lower region id)."""
    if isinstance(atlas, Parcellation):
        sizes = atlas.region_sizes
        maps = atlas.indicator_maps()
    else:
        maps = np.asarray(atlas, dtype=float)
        sizes = (maps != 0).sum(axis=1)
    if len(sizes) < m:
        raise ValueError(f"atlas has {len(sizes)} regions, fewer than m={m}")
    order = np.lexsort((np.arange(len(sizes)), -sizes))
    keep = np.sort(order[:m])
    return maps[keep]


def dice(region_a, region_b) -> float:
    """Overlap score 2|A n B| / (|A| + |B|) between two voxel sets."""
    a, b = set(map(int, region_a)), set(map(int, region_b))
    if not a or not b:
        raise ValueError("dice is undefined for empty voxel sets")
    return 2.0 * len(a & b) / (len(a) + len(b))


def consensus_atlas(atlases, dice_threshold=0.9) -> Parcellation:
    """Regions stable across several parcellations of the same lattice.

    Greedy matching from the first atlas: each of its regions is paired
    with its best-DICE partner in every other atlas and kept only when
    the worst of those scores reaches the threshold. A surviving region
    is the voxelwise majority of its matched set; voxels claimed twice go
    to the region with more votes (lower id on ties).
    """
    if len(atlases) < 2:
        raise ValueError("need at least two atlases")
    dims = atlases[0].lattice_dims
    if any(a.lattice_dims != dims for a in atlases):
        raise ValueError("all atlases must share one lattice")
    p = atlases[0].labels.size

    region_sets = []
    for atlas in atlases:
        region_sets.append([set(np.flatnonzero(atlas.labels == r).tolist())
                            for r in range(atlas.n_regions)])

    kept_counts = []
    for region in region_sets[0]:
        votes = np.zeros(p)
        for voxel in region:
            votes[voxel] += 1
        worst = 1.0
        for other in region_sets[1:]:
            scores = [2.0 * len(region & cand) / (len(region) + len(cand))
                      for cand in other]
            best = int(np.argmax(scores))
            worst = min(worst, scores[best])
            for voxel in other[best]:
                votes[voxel] += 1
        if worst >= dice_threshold:
            kept_counts.append(votes)

    labels = np.full(p, -1, dtype=int)
    if not kept_counts:
        warnings.warn("no region survived the consensus threshold")
        return Parcellation(labels=labels, lattice_dims=dims, method="consensus")

    n_atlases = len(atlases)
    stacked = np.stack(kept_counts)  # regions x voxels
    majority = stacked * 2 > n_atlases
    claimed = majority.any(axis=0)
    winner = np.argmax(np.where(majority, stacked, -1), axis=0)
    labels[claimed] = winner[claimed]
    # drop regions that lost every voxel to the majority vote
    present = np.unique(labels[labels >= 0])
    remap = {int(old): new for new, old in enumerate(present)}
    labels = np.array([remap[v] if v >= 0 else -1 for v in labels])
    return Parcellation(labels=labels, lattice_dims=dims, method="consensus")


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Chance-corrected agreement between two partitions."""
    labels_a = np.asarray(labels_a)
    labels_b = np.asarray(labels_b)
    if labels_a.shape != labels_b.shape:
        raise ValueError("label arrays must have equal length")
    ua, ia = np.unique(labels_a, return_inverse=True)
    ub, ib = np.unique(labels_b, return_inverse=True)
    table = np.zeros((len(ua), len(ub)), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_cells = comb2(table).sum()
    sum_rows = comb2(table.sum(axis=1)).sum()
    sum_cols = comb2(table.sum(axis=0)).sum()
    total = comb2(labels_a.size)
    expected = sum_rows * sum_cols / total
    max_index = 0.5 * (sum_rows + sum_cols)
    if max_index == expected:
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))
