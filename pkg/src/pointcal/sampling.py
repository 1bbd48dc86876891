"""Triplet construction over labeled clouds and cloud pairs.

Two samplers: a boundary-focused within-cloud sampler for segmentation
(anchor and positive share a label, negative differs, all drawn from one
k-NN neighborhood, so only anchors near label boundaries produce
triplets), and a correspondence sampler across two clouds related by a
known rigid transform. Both are seed-deterministic, and both operate in a
canonical coordinate order so the emitted triplets do not depend on the
ordering of the input points.

Brute-force nearest neighbors only: desk scale is N <= 5000.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .embeddings import PointCloud

ANCHOR_BUDGET_FACTOR = 4  # caps the rejection loop in single-class regions
DEFAULT_INLIER_THRESHOLD = 0.1  # meters; matches the evaluation threshold


@dataclass(frozen=True)
class TripletBatch:
    """Index triples plus tags naming the embedding set of each role."""

    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    anchor_set: str = "self"
    positive_set: str = "self"
    negative_set: str = "self"

    def __post_init__(self):
        for name in ("anchors", "positives", "negatives"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (self.anchors.shape == self.positives.shape == self.negatives.shape):
            raise ValueError("role index arrays must have equal length")

    def __len__(self) -> int:
        return int(self.anchors.shape[0])


@dataclass(frozen=True)
class RigidTransform:
    """x -> scale * R x + t with orthonormal, right-handed R.

    The scale slot carries dataset-generation metadata (augmentation
    scaling is folded into the stored transform); scale=1 is a proper
    rigid motion.
    """

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be (3,3) and translation (3,)")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ValueError("rotation must be orthonormal within 1e-9")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation must have det +1")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(points) @ self.rotation.T) + self.translation

    def inverse(self) -> "RigidTransform":
        r_inv = self.rotation.T
        return RigidTransform(r_inv, -r_inv @ self.translation / self.scale,
                              1.0 / self.scale)


@dataclass(frozen=True)
class CorrespondenceSet:
    """Inlier pairs (index in cloud i, index in cloud j) under a transform."""

    pairs: np.ndarray  # (M, 2) int
    threshold: float

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        pairs.setflags(write=False)
        object.__setattr__(self, "pairs", pairs)
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")

    def __len__(self) -> int:
        return int(self.pairs.shape[0])


def _pairwise_sq_dists(queries: np.ndarray, points: np.ndarray) -> np.ndarray:
    # (Q, N) squared distances, chunk-free: fine for desk-scale N
    diff = queries[:, None, :] - points[None, :, :]
    return np.einsum("qnd,qnd->qn", diff, diff)


def knn(cloud: PointCloud, query: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest cloud points to a single query point.

    Sorted by ascending Euclidean distance, ties broken by lower index.
    """
    n = cloud.n_points
    if k > n:
        raise ValueError(f"k={k} exceeds cloud size N={n}")
    query = np.asarray(query, dtype=np.float64).reshape(3)
    d2 = np.sum((cloud.coords - query) ** 2, axis=1)
    order = np.lexsort((np.arange(n), d2))
    return order[:k]


def knn_indices(coords: np.ndarray, k: int, chunk: int = 512) -> np.ndarray:
    """(N, k) nearest-neighbor indices for every point, excluding itself."""
    n = coords.shape[0]
    if k >= n:
        raise ValueError(f"k={k} must be < N={n} when excluding self")
    out = np.empty((n, k), dtype=np.int64)
    idx = np.arange(n)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        rows = stop - start
        d2 = _pairwise_sq_dists(coords[start:stop], coords)
        d2[np.arange(rows), idx[start:stop]] = np.inf
        # narrow to k candidates first; ties broken by lower index
        cand = np.argpartition(d2, k - 1, axis=1)[:, :k]
        cd = d2[np.arange(rows)[:, None], cand]
        order = np.lexsort((cand, cd), axis=1)
        out[start:stop] = cand[np.arange(rows)[:, None], order]
    return out


def canonical_order(coords: np.ndarray) -> np.ndarray:
    """Permutation sorting points by (x, y, z), ties by original index."""
    n = coords.shape[0]
    return np.lexsort((np.arange(n), coords[:, 2], coords[:, 1], coords[:, 0]))


def sample_ces(cloud: PointCloud, t_target: int, k: int, rng,
               neighbors: Optional[np.ndarray] = None) -> TripletBatch:
    """Boundary-focused triplets within one labeled cloud.

    Draws anchors uniformly (budget 4 * t_target); an anchor is kept when
    its k-NN neighborhood contains both same-label and different-label
    points, in which case one uniform positive and one uniform negative
    are taken from the neighborhood. Interior anchors yield nothing.

    `neighbors` may carry precomputed (N, k) self-excluding neighbor
    indices to amortize the k-NN search across training steps.
    """
    if cloud.labels is None:
        raise ValueError("sample_ces requires a labeled cloud")
    if k < 2:
        raise ValueError("neighborhood size k must be >= 2")
    n = cloud.n_points

    # canonical coordinate order makes the draw sequence independent of
    # the input point ordering
    perm = canonical_order(cloud.coords)
    coords_c = cloud.coords[perm]
    labels_c = cloud.labels[perm]
    if neighbors is not None:
        inv = np.empty(n, dtype=np.int64)
        inv[perm] = np.arange(n)
        nb = inv[neighbors[perm]]
    else:
        nb = knn_indices(coords_c, k)

    budget = ANCHOR_BUDGET_FACTOR * t_target
    anchors = rng.integers(n, size=budget)
    u_pos = rng.uniform((budget,))
    u_neg = rng.uniform((budget,))

    nb_labels = labels_c[nb[anchors]]                      # (budget, k)
    same = nb_labels == labels_c[anchors][:, None]
    n_same = same.sum(axis=1)
    n_diff = k - n_same
    valid = (n_same > 0) & (n_diff > 0)

    def pick(mask, counts, u):
        # select the r-th True entry of each row, r uniform in [0, counts)
        r = np.minimum((u * counts).astype(np.int64), np.maximum(counts - 1, 0))
        csum = np.cumsum(mask, axis=1)
        hit = (csum == (r + 1)[:, None]) & mask
        return np.argmax(hit, axis=1)

    pos_col = pick(same, n_same, u_pos)
    neg_col = pick(~same, n_diff, u_neg)
    rows = np.arange(budget)
    positives = nb[anchors, :][rows, pos_col]
    negatives = nb[anchors, :][rows, neg_col]

    keep = np.flatnonzero(valid)[:t_target]
    return TripletBatch(perm[anchors[keep]], perm[positives[keep]],
                        perm[negatives[keep]])


def find_correspondences(cloud_i: PointCloud, cloud_j: PointCloud,
                         transform: RigidTransform,
                         threshold: float = DEFAULT_INLIER_THRESHOLD) -> CorrespondenceSet:
    """Nearest neighbor in cloud_j of every transformed cloud_i point,
    kept when within the inlier threshold."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    moved = transform.apply(cloud_i.coords)
    pairs = []
    chunk = 512
    for start in range(0, moved.shape[0], chunk):
        stop = min(start + chunk, moved.shape[0])
        d2 = _pairwise_sq_dists(moved[start:stop], cloud_j.coords)
        nn = np.argmin(d2, axis=1)
        dist = np.sqrt(d2[np.arange(stop - start), nn])
        ok = dist <= threshold
        for row in np.flatnonzero(ok):
            pairs.append((start + row, nn[row]))
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return CorrespondenceSet(pairs, threshold)


def sample_cem(corrs: CorrespondenceSet, n_i: int, n_j: int, t_target: int,
               rng) -> tuple:
    """Correspondence triplets across two clouds, both directions.

    Draws t_target positive pairs uniformly with replacement. For the
    (i -> j) batch the anchor is the cloud-i endpoint, the positive its
    cloud-j correspondent and the negative a uniform cloud-i point that is
    not itself a correspondent of that positive; mirrored for (j -> i).
    """
    if len(corrs) == 0:
        raise ValueError("correspondence set is empty")
    pairs = corrs.pairs
    picks = rng.integers(len(corrs), size=t_target)

    # indices in each cloud matched to a given point of the other cloud
    i_of_j: dict = {}
    j_of_i: dict = {}
    for ii, jj in pairs:
        i_of_j.setdefault(int(jj), set()).add(int(ii))
        j_of_i.setdefault(int(ii), set()).add(int(jj))

    def draw_negatives(anchor_cloud_size, reject_sets):
        neg = rng.integers(anchor_cloud_size, size=t_target)
        for _ in range(64):
            bad = np.fromiter((int(neg[t]) in reject_sets[t] for t in range(t_target)),
                              dtype=bool, count=t_target)
            if not bad.any():
                return neg
            neg[bad] = rng.integers(anchor_cloud_size, size=int(bad.sum()))
        # exhaustive fallback for pathological clouds
        for t in range(t_target):
            if int(neg[t]) in reject_sets[t]:
                allowed = np.setdiff1d(np.arange(anchor_cloud_size),
                                       np.fromiter(reject_sets[t], dtype=np.int64))
                if allowed.size == 0:
                    raise ValueError("no admissible negative exists")
                neg[t] = allowed[rng.integers(allowed.size)]
        return neg

    drawn = pairs[picks]
    reject_ij = [i_of_j[int(jj)] for jj in drawn[:, 1]]
    neg_i = draw_negatives(n_i, reject_ij)
    batch_ij = TripletBatch(drawn[:, 0], drawn[:, 1], neg_i,
                            anchor_set="i", positive_set="j", negative_set="i")

    reject_ji = [j_of_i[int(ii)] for ii in drawn[:, 0]]
    neg_j = draw_negatives(n_j, reject_ji)
    batch_ji = TripletBatch(drawn[:, 1], drawn[:, 0], neg_j,
                            anchor_set="j", positive_set="i", negative_set="j")
    return batch_ij, batch_ji
