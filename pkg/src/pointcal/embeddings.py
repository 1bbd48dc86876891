"""Probabilistic per-point embeddings: diagonal and low-rank Gaussian models.

A cloud of N points maps to N Gaussian embeddings in R^D. The diagonal
model stores a mean matrix (unit-norm rows) and a positive per-coordinate
variance matrix. The low-rank model adds a factor tensor of shape
(N, D, K); over the flattened N*D coordinate space the implied covariance
is  factor @ factor.T + diag(var),  which couples points through the
shared factor while staying O(N*D*K) in storage.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# Explicitly materializing the (N*D) x (N*D) covariance is a testing
# convenience only; refuse above this size.
MAX_DENSE_COV = 4096


def _freeze(a: np.ndarray, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype, order="C", copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PointCloud:
    """N points with coordinates in meters and optional class labels."""

    coords: np.ndarray
    labels: Optional[np.ndarray] = None
    id: str = ""

    def __post_init__(self):
        coords = _freeze(self.coords)
        if coords.ndim != 2 or coords.shape[1] != 3 or coords.shape[0] < 1:
            raise ValueError(f"coords must be (N, 3) with N >= 1, got {coords.shape}")
        if not np.all(np.isfinite(coords)):
            raise ValueError("coords must be finite")
        object.__setattr__(self, "coords", coords)
        if self.labels is not None:
            labels = _freeze(self.labels, dtype=np.int64)
            if labels.shape != (coords.shape[0],):
                raise ValueError("labels must have length N")
            object.__setattr__(self, "labels", labels)

    @property
    def n_points(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class DiagGaussianEmbeddings:
    """Per-point Gaussian embeddings with independent coordinates."""

    mean: np.ndarray   # (N, D), unit-norm rows
    var: np.ndarray    # (N, D), > 0

    def __post_init__(self):
        mean = _freeze(self.mean)
        var = _freeze(self.var)
        if mean.ndim != 2 or var.shape != mean.shape:
            raise ValueError("mean and var must both be (N, D)")
        norms = np.linalg.norm(mean, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError("mean rows must be unit-norm within 1e-6")
        if not np.all(var > 0):
            raise ValueError("var must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def n_points(self) -> int:
        return self.mean.shape[0]

    @property
    def dim(self) -> int:
        return self.mean.shape[1]


@dataclass(frozen=True)
class LowRankGaussianEmbeddings:
    """Diagonal model plus a rank-K factor coupling all points."""

    mean: np.ndarray     # (N, D)
    var: np.ndarray      # (N, D), > 0
    factor: np.ndarray   # (N, D, K)

    def __post_init__(self):
        mean = _freeze(self.mean)
        var = _freeze(self.var)
        factor = _freeze(self.factor)
        if mean.ndim != 2 or var.shape != mean.shape:
            raise ValueError("mean and var must both be (N, D)")
        if factor.ndim != 3 or factor.shape[:2] != mean.shape:
            raise ValueError("factor must be (N, D, K)")
        norms = np.linalg.norm(mean, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError("mean rows must be unit-norm within 1e-6")
        if not np.all(var > 0):
            raise ValueError("var must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)
        object.__setattr__(self, "factor", factor)

    @property
    def n_points(self) -> int:
        return self.mean.shape[0]

    @property
    def dim(self) -> int:
        return self.mean.shape[1]

    @property
    def rank(self) -> int:
        return self.factor.shape[2]

    def full_covariance(self) -> np.ndarray:
        """Dense (N*D, N*D) covariance; testing only, size-capped."""
        n, d = self.mean.shape
        m = n * d
        if m > MAX_DENSE_COV:
            raise ValueError(f"refusing dense covariance for N*D={m} > {MAX_DENSE_COV}")
        f = self.factor.reshape(m, -1)
        return f @ f.T + np.diag(self.var.reshape(m))


@dataclass(frozen=True)
class TripletGaussian:
    """Gaussian parameters of one (anchor, positive, negative) triplet.

    `factor_*` rows are carried for low-rank sources so the triplet's
    3D x 3D joint covariance can be rebuilt; `source_keys` record point
    identity so a role reused twice (e.g. anchor == positive) is treated
    as the same random variable, not an independent copy.
    """

    mean_a: np.ndarray
    var_a: np.ndarray
    mean_p: np.ndarray
    var_p: np.ndarray
    mean_n: np.ndarray
    var_n: np.ndarray
    factor_a: Optional[np.ndarray] = None
    factor_p: Optional[np.ndarray] = None
    factor_n: Optional[np.ndarray] = None
    margin: float = 0.0
    source_keys: Optional[tuple] = field(default=None, compare=False)

    def __post_init__(self):
        for role in ("a", "p", "n"):
            mean = _freeze(getattr(self, f"mean_{role}"))
            var = _freeze(getattr(self, f"var_{role}"))
            if mean.ndim != 1 or var.shape != mean.shape:
                raise ValueError("triplet means/vars must be 1-D of equal length")
            if not np.all(var > 0):
                raise ValueError("triplet variances must be positive")
            object.__setattr__(self, f"mean_{role}", mean)
            object.__setattr__(self, f"var_{role}", var)
            fac = getattr(self, f"factor_{role}")
            if fac is not None:
                fac = _freeze(fac)
                if fac.shape[0] != mean.shape[0] or fac.ndim != 2:
                    raise ValueError("triplet factors must be (D, K)")
                object.__setattr__(self, f"factor_{role}", fac)
        dims = {self.mean_a.shape[0], self.mean_p.shape[0], self.mean_n.shape[0]}
        if len(dims) != 1:
            raise ValueError("anchor/positive/negative must share D")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")

    @property
    def dim(self) -> int:
        return self.mean_a.shape[0]

    @property
    def has_factors(self) -> bool:
        return self.factor_a is not None

    def roles(self):
        return (
            (self.mean_a, self.var_a, self.factor_a),
            (self.mean_p, self.var_p, self.factor_p),
            (self.mean_n, self.var_n, self.factor_n),
        )


def point_uncertainty(emb, i: int) -> float:
    """Scalar uncertainty of point i: mean of its covariance diagonal.

    For the low-rank model the diagonal picks up the squared factor, so
    u_i = mean_d(var[i, d] + sum_k factor[i, d, k]^2). Averaging (rather
    than summing) over D keeps the scale comparable across embedding
    sizes.
    """
    if not 0 <= i < emb.n_points:
        raise IndexError(f"point index {i} out of range for N={emb.n_points}")
    diag = emb.var[i]
    if isinstance(emb, LowRankGaussianEmbeddings):
        diag = diag + np.sum(emb.factor[i] ** 2, axis=1)
    return float(np.mean(diag))


def point_uncertainties(emb) -> np.ndarray:
    """Vectorized `point_uncertainty` over all points."""
    diag = emb.var
    if isinstance(emb, LowRankGaussianEmbeddings):
        diag = diag + np.sum(emb.factor ** 2, axis=2)
    return diag.mean(axis=1)


def correspondence_uncertainty(u_i: float, u_j: float) -> float:
    """Uncertainty of a correspondence: the sum of its two endpoints'."""
    if u_i < 0 or u_j < 0:
        raise ValueError("point uncertainties must be non-negative")
    return float(u_i + u_j)


def sample_embeddings(emb: LowRankGaussianEmbeddings, rng, count: int) -> np.ndarray:
    """Draw `count` samples of the full embedding map, shape (count, N, D).

    Each sample is  mean + reshape(factor @ e1 + sqrt(var) * e2)  with
    e1 ~ N(0, I_K) shared across all coordinates and e2 ~ N(0, I_{N*D}),
    i.e. exact draws from N(mean, factor factor^T + diag(var)).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    n, d = emb.mean.shape
    k = emb.rank
    flat_factor = emb.factor.reshape(n * d, k)
    e1 = rng.normal((count, k))
    e2 = rng.normal((count, n * d))
    flat = emb.mean.reshape(-1) + e1 @ flat_factor.T + np.sqrt(emb.var.reshape(-1)) * e2
    return flat.reshape(count, n, d)


def _role_params(emb, idx: int):
    if not 0 <= idx < emb.n_points:
        raise IndexError(f"index {idx} out of range for N={emb.n_points}")
    factor = emb.factor[idx] if isinstance(emb, LowRankGaussianEmbeddings) else None
    return emb.mean[idx], emb.var[idx], factor


def extract_triplet(anchor_set, a: int, positive_set, p: int, negative_set,
                    n: int, margin: float = 0.0) -> TripletGaussian:
    """Copy three points' Gaussian parameters into a TripletGaussian.

    The three sets may be the same object (within-cloud triplets) or
    different (cross-cloud). All sets must share the embedding dimension.
    """
    mean_a, var_a, fac_a = _role_params(anchor_set, a)
    mean_p, var_p, fac_p = _role_params(positive_set, p)
    mean_n, var_n, fac_n = _role_params(negative_set, n)
    dims = {mean_a.shape[0], mean_p.shape[0], mean_n.shape[0]}
    if len(dims) != 1:
        raise ValueError("embedding sets disagree on dimension D")
    has_fac = [f is not None for f in (fac_a, fac_p, fac_n)]
    if any(has_fac) and not all(has_fac):
        raise ValueError("cannot mix diagonal and low-rank embedding sets")
    keys = ((id(anchor_set), a), (id(positive_set), p), (id(negative_set), n))
    return TripletGaussian(
        mean_a=mean_a, var_a=var_a, mean_p=mean_p, var_p=var_p,
        mean_n=mean_n, var_n=var_n,
        factor_a=fac_a, factor_p=fac_p, factor_n=fac_n,
        margin=margin, source_keys=keys,
    )


def triplet_joint_covariance(t: TripletGaussian) -> np.ndarray:
    """Dense 3D x 3D covariance of the stacked (anchor, positive, negative).

    Cross-role blocks come from the factor outer products; roles that share
    a source key are the same point, so their cross block additionally
    carries the diagonal variance (and equals the variance block).
    """
    d = t.dim
    keys = t.source_keys if t.source_keys is not None else ((0, 0), (1, 1), (2, 2))
    roles = t.roles()
    cov = np.zeros((3 * d, 3 * d))
    for i, (_, var_i, fac_i) in enumerate(roles):
        for j, (_, var_j, fac_j) in enumerate(roles):
            block = np.zeros((d, d))
            if fac_i is not None:
                block += fac_i @ fac_j.T
            if keys[i] == keys[j]:
                block += np.diag(var_i)
            cov[i * d:(i + 1) * d, j * d:(j + 1) * d] = block
    return cov
