"""Moments of the triplet statistic and the probabilistic triplet loss.

For a triplet of Gaussian embeddings (anchor A, positive P, negative N)
the statistic of interest is

    tau = sum_d (A_d - P_d)^2 - (A_d - N_d)^2,

the squared-distance gap. Under the diagonal model each coordinate
contributes independently and the per-coordinate mean/variance have a
closed form; summing over coordinates gives (mu_tau, var_tau). Treating
tau as approximately normal (central limit theorem over D coordinates),
the probability that the positive is closer than the negative by margin m
is  Phi((-m - mu_tau) / sigma_tau),  and the training loss is the mean
negative log of that probability over a batch of triplets.

For the factor-coupled (low-rank) model, tau is a quadratic form of one
jointly Gaussian vector, and its exact moments follow from the standard
identities  E[Y'AY] = tr(AS) + m'Am  and
Var[Y'AY] = 2 tr(ASAS) + 4 m'ASAm.

Every analytic path here is cross-checked by Monte Carlo oracles that
sample the joint distribution directly (see `mc_tau_moments` and
`mc_triplet_probability`).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .embeddings import TripletGaussian
from .numerics import std_normal_cdf, std_normal_log_cdf

SIGMA_FLOOR = 1e-8  # lower bound on sigma_tau; degenerate triplets appear at init
_VAR_FLOOR = SIGMA_FLOOR ** 2


@dataclass(frozen=True)
class TauMoments:
    """Mean and variance of the squared-distance gap tau."""

    mu_tau: float
    var_tau: float

    def __post_init__(self):
        if self.var_tau < 0:
            raise ValueError("var_tau must be >= 0")


@dataclass(frozen=True)
class QuadraticForm:
    """Y'AY for Y ~ N(mean, diag(cov_diag) + cov_factor cov_factor^T)."""

    matrix: np.ndarray                    # (M, M), symmetric
    mean: np.ndarray                      # (M,)
    cov_diag: np.ndarray                  # (M,), > 0
    cov_factor: Optional[np.ndarray] = None  # (M, K)

    def __post_init__(self):
        a = np.asarray(self.matrix, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("matrix must be square")
        if not np.allclose(a, a.T, rtol=1e-8, atol=1e-12):
            raise ValueError("matrix must be symmetric")
        m = a.shape[0]
        if self.mean.shape != (m,) or self.cov_diag.shape != (m,):
            raise ValueError("mean and cov_diag must have shape (M,)")
        if self.cov_factor is not None and (self.cov_factor.ndim != 2
                                            or self.cov_factor.shape[0] != m):
            raise ValueError("cov_factor must have shape (M, K)")


# ---------------------------------------------------------------------------
# Shared moment algebra. These helpers are written with plain arithmetic and
# axis reductions only, so they evaluate identically on numpy arrays and on
# autodiff Vars; the training loss differentiates straight through them.
# ---------------------------------------------------------------------------

def squared_gap_term_moments(mean_a, var_a, mean_p, var_p, mean_n, var_n):
    """Per-coordinate mean and variance of (A-P)^2 - (A-N)^2.

    A, P, N are independent Gaussians; all arguments broadcast
    elementwise. The variance is the three-bracket expression

        2[sp^4 + 2 mp^2 sp^2 + 2(sa^2+ma^2)(sp^2+mp^2) - 2 ma^2 mp^2
          - 4 ma mp sp^2]
      + 2[same with n in place of p]
      - 8 mp mn sa^2.
    """
    mean = (mean_p ** 2 + var_p - mean_n ** 2 - var_n
            - 2.0 * mean_a * (mean_p - mean_n))
    bracket_p = (var_p ** 2 + 2.0 * mean_p ** 2 * var_p
                 + 2.0 * (var_a + mean_a ** 2) * (var_p + mean_p ** 2)
                 - 2.0 * mean_a ** 2 * mean_p ** 2
                 - 4.0 * mean_a * mean_p * var_p)
    bracket_n = (var_n ** 2 + 2.0 * mean_n ** 2 * var_n
                 + 2.0 * (var_a + mean_a ** 2) * (var_n + mean_n ** 2)
                 - 2.0 * mean_a ** 2 * mean_n ** 2
                 - 4.0 * mean_a * mean_n * var_n)
    var = 2.0 * bracket_p + 2.0 * bracket_n - 8.0 * mean_p * mean_n * var_a
    return mean, var


def batched_tau_diag(mean_a, var_a, mean_p, var_p, mean_n, var_n):
    """(mu_tau, var_tau) for stacks of diagonal triplets, shape (T, D) -> (T,)."""
    mean, var = squared_gap_term_moments(mean_a, var_a, mean_p, var_p,
                                         mean_n, var_n)
    return mean.sum(axis=-1), var.sum(axis=-1)


def marginal_variance(var, factor):
    """Per-coordinate marginal variance of a factor-coupled point:
    var + sum_k factor^2. The independence-assuming route to the triplet
    moments keeps the marginals exact but drops cross-point covariance."""
    if factor is None:
        return var
    return var + (factor ** 2).sum(axis=-1)


def batched_tau_lowrank(mean_a, var_a, fac_a, mean_p, var_p, fac_p,
                        mean_n, var_n, fac_n):
    """Exact (mu_tau, var_tau) for stacks of factor-coupled triplets.

    Shapes: means/vars (T, D), factors (T, D, K); the three points of a
    triplet are assumed distinct. Writing U = A - P and V = A - N, the
    pair (U, V) is jointly Gaussian with

        Cov(U) = diag(var_a + var_p) + G G^T,   G = fac_a - fac_p,
        Cov(V) = diag(var_a + var_n) + H H^T,   H = fac_a - fac_n,
        Cov(U, V) = diag(var_a) + G H^T,

    and tau = |U|^2 - |V|^2, a quadratic form with block matrix
    diag(I, -I). Expanding tr(ASAS) and m'ASAm over this structure gives
    the K x K contractions below; everything reduces to the diagonal
    formula when the factors vanish.
    """
    t, d = mean_a.shape[0], mean_a.shape[1]
    k = fac_a.shape[2]
    mu_u = mean_a - mean_p
    mu_v = mean_a - mean_n
    d_u = var_a + var_p
    d_v = var_a + var_n
    g = fac_a - fac_p
    h = fac_a - fac_n

    gg = (g.reshape(t, d, k, 1) * g.reshape(t, d, 1, k)).sum(axis=1)  # G^T G
    hh = (h.reshape(t, d, k, 1) * h.reshape(t, d, 1, k)).sum(axis=1)
    g_row = (g ** 2).sum(axis=2)          # |G_d|^2
    h_row = (h ** 2).sum(axis=2)
    gh_row = (g * h).sum(axis=2)          # G_d . H_d
    g_mu = (g * mu_u.reshape(t, d, 1)).sum(axis=1)   # G^T mu_U, (T, K)
    h_mu = (h * mu_v.reshape(t, d, 1)).sum(axis=1)

    mu_tau = ((var_p - var_n).sum(axis=1)
              + g_row.sum(axis=1) - h_row.sum(axis=1)
              + (mu_u ** 2).sum(axis=1) - (mu_v ** 2).sum(axis=1))

    tr_su2 = (d_u ** 2).sum(axis=1) + 2.0 * (d_u * g_row).sum(axis=1) \
        + (gg ** 2).sum(axis=(-2, -1))
    tr_sv2 = (d_v ** 2).sum(axis=1) + 2.0 * (d_v * h_row).sum(axis=1) \
        + (hh ** 2).sum(axis=(-2, -1))
    fro_suv = (var_a ** 2).sum(axis=1) + 2.0 * (var_a * gh_row).sum(axis=1) \
        + (gg * hh).sum(axis=(-2, -1))

    quad_u = (d_u * mu_u ** 2).sum(axis=1) + (g_mu ** 2).sum(axis=1)
    quad_v = (d_v * mu_v ** 2).sum(axis=1) + (h_mu ** 2).sum(axis=1)
    cross = (var_a * mu_u * mu_v).sum(axis=1) + (g_mu * h_mu).sum(axis=1)

    var_tau = (2.0 * (tr_su2 + tr_sv2 - 2.0 * fro_suv)
               + 4.0 * (quad_u - 2.0 * cross + quad_v))
    return mu_tau, var_tau


# ---------------------------------------------------------------------------
# Single-triplet surface
# ---------------------------------------------------------------------------

def per_dim_moments(t: TripletGaussian, d: int) -> tuple:
    """Mean and variance of coordinate d's contribution to tau."""
    if not 0 <= d < t.dim:
        raise IndexError(f"dimension {d} out of range for D={t.dim}")
    for var in (t.var_a, t.var_p, t.var_n):
        if var[d] <= 0:
            raise ValueError("variances must be positive")
    mean, var = squared_gap_term_moments(
        t.mean_a[d], t.var_a[d], t.mean_p[d], t.var_p[d], t.mean_n[d], t.var_n[d])
    return float(mean), float(var)


def tau_moments_diag(t: TripletGaussian) -> TauMoments:
    """Sum per-coordinate moments over all D dimensions."""
    mean, var = squared_gap_term_moments(t.mean_a, t.var_a, t.mean_p, t.var_p,
                                         t.mean_n, t.var_n)
    return TauMoments(float(mean.sum()), max(float(var.sum()), 0.0))


def quadratic_form_moments(q: QuadraticForm) -> tuple:
    """Exact (mean, variance) of Y'AY for jointly Gaussian Y.

    Uses the diag + low-rank structure of S throughout, so S itself is
    never materialized regardless of M.
    """
    a = np.asarray(q.matrix, dtype=np.float64)
    m = np.asarray(q.mean, dtype=np.float64)
    s = np.asarray(q.cov_diag, dtype=np.float64)
    f = q.cov_factor

    am = a @ m
    mean = float(np.dot(np.diag(a), s) + np.dot(m, am))
    # tr(A diag A diag) = sum_ij A_ij^2 s_i s_j
    tr_asas = float(np.einsum("ij,ij,i,j->", a, a, s, s))
    masam = float(np.dot(am * am, s))
    if f is not None:
        af = a @ f                                   # (M, K)
        faf = f.T @ af                               # (K, K), symmetric
        mean += float(np.trace(faf))
        tr_asas += 2.0 * float(np.einsum("mk,m,mk->", af, s, af))
        tr_asas += float(np.sum(faf * faf))
        fam = f.T @ am                               # (K,)
        masam += float(np.dot(fam, fam))
    return mean, 2.0 * tr_asas + 4.0 * masam


_GAP_COEFF = np.array([[0.0, -1.0, 1.0],
                       [-1.0, 1.0, 0.0],
                       [1.0, 0.0, -1.0]])


def tau_moments_lowrank(t: TripletGaussian) -> TauMoments:
    """Exact tau moments for a factor-coupled triplet.

    Stacks (A, P, N) into one Gaussian vector, builds the quadratic form
    whose value is tau and delegates to `quadratic_form_moments`. Roles
    sharing a source key are collapsed to a single coordinate block, so a
    degenerate triplet (e.g. anchor == positive) is handled exactly.
    """
    if not t.has_factors:
        raise ValueError("triplet carries no scale-factor rows")
    d = t.dim
    keys = t.source_keys if t.source_keys is not None else ((0, 0), (1, 1), (2, 2))
    uniq = []
    role_to_uid = []
    for key in keys:
        if key not in uniq:
            uniq.append(key)
        role_to_uid.append(uniq.index(key))
    n_u = len(uniq)
    roles = t.roles()

    # A is built from identity blocks: coefficient c_uv = sum of the
    # role-level coefficients mapping onto the (u, v) unique-point block.
    coeff = np.zeros((n_u, n_u))
    for i in range(3):
        for j in range(3):
            coeff[role_to_uid[i], role_to_uid[j]] += _GAP_COEFF[i, j]
    matrix = np.kron(coeff, np.eye(d))

    first_role = [role_to_uid.index(u) for u in range(n_u)]
    mean = np.concatenate([roles[i][0] for i in first_role])
    cov_diag = np.concatenate([roles[i][1] for i in first_role])
    cov_factor = np.concatenate([roles[i][2] for i in first_role], axis=0)

    mu, var = quadratic_form_moments(QuadraticForm(matrix, mean, cov_diag, cov_factor))
    return TauMoments(mu, max(var, 0.0))


def triplet_probability(tm: TauMoments, m: float) -> float:
    """P(tau < -m) under the normal approximation of tau."""
    if m < 0:
        raise ValueError("margin must be >= 0")
    sigma = max(np.sqrt(max(tm.var_tau, 0.0)), SIGMA_FLOOR)
    return float(std_normal_cdf((-m - tm.mu_tau) / sigma))


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def _is_var(x) -> bool:
    return isinstance(x, ad.Var)


def metric_loss_from_moments(mu_tau, var_tau, m: float):
    """Mean of -log Phi((-m - mu_tau)/sigma_tau); Var-aware."""
    if _is_var(var_tau):
        sigma = ad.clip_min(var_tau, _VAR_FLOOR) ** 0.5
        z = (-float(m) - mu_tau) / sigma
        return -ad.log_ndtr(z).mean()
    sigma = np.sqrt(np.maximum(var_tau, _VAR_FLOOR))
    z = (-float(m) - mu_tau) / sigma
    return float(np.mean(-std_normal_log_cdf(z)))


def metric_loss(triplets: Sequence[TripletGaussian], m: float,
                correlated: bool = True) -> float:
    """Batch loss over explicit triplets.

    With `correlated` set, scale factors (when present) enter through the
    exact joint moments; otherwise through the independence-assuming
    route, where each point keeps its exact marginal variance
    (var + sum_k factor^2) but cross-point covariance is dropped.
    """
    triplets = list(triplets)
    if not triplets:
        raise ValueError("metric_loss requires at least one triplet")
    has_factors = all(t.has_factors for t in triplets)
    use_joint = correlated and has_factors
    if use_joint and any(
            t.source_keys is not None and len(set(t.source_keys)) < 3
            for t in triplets):
        # degenerate triplets need the role-collapsing path
        moments = [tau_moments_lowrank(t) for t in triplets]
        mu = np.array([tm.mu_tau for tm in moments])
        var = np.array([tm.var_tau for tm in moments])
        return metric_loss_from_moments(mu, var, m)

    stack = {}
    for role in ("a", "p", "n"):
        stack[f"mean_{role}"] = np.stack([getattr(t, f"mean_{role}") for t in triplets])
        stack[f"var_{role}"] = np.stack([getattr(t, f"var_{role}") for t in triplets])
        if has_factors:
            stack[f"fac_{role}"] = np.stack([getattr(t, f"factor_{role}") for t in triplets])
    if use_joint:
        mu, var = batched_tau_lowrank(
            stack["mean_a"], stack["var_a"], stack["fac_a"],
            stack["mean_p"], stack["var_p"], stack["fac_p"],
            stack["mean_n"], stack["var_n"], stack["fac_n"])
    else:
        mu, var = batched_tau_diag(
            stack["mean_a"],
            marginal_variance(stack["var_a"], stack.get("fac_a")),
            stack["mean_p"],
            marginal_variance(stack["var_p"], stack.get("fac_p")),
            stack["mean_n"],
            marginal_variance(stack["var_n"], stack.get("fac_n")))
    return metric_loss_from_moments(mu, var, m)


# ---------------------------------------------------------------------------
# Monte Carlo oracles
# ---------------------------------------------------------------------------

def _stream_tau(t: TripletGaussian, n: int, rng, chunk: int = 200_000,
                dtype=np.float32):
    """Yield float64 chunks of tau samples drawn from the exact joint law.

    Points are sampled raw: X = mean + factor @ e1 + sqrt(var) * z with a
    shared e1 across the triplet when factors are present; roles sharing a
    source key reuse the same draws (same random variable). Bulk draws use
    float32 (documented): the rounding is orders of magnitude below the
    Monte Carlo standard error.
    """
    d = t.dim
    keys = t.source_keys if t.source_keys is not None else ((0, 0), (1, 1), (2, 2))
    uniq = []
    role_to_uid = []
    for key in keys:
        if key not in uniq:
            uniq.append(key)
        role_to_uid.append(uniq.index(key))
    roles = t.roles()
    first_role = [role_to_uid.index(u) for u in range(len(uniq))]
    sds = [np.sqrt(roles[i][1]).astype(dtype) for i in first_role]
    means = [roles[i][0].astype(dtype) for i in first_role]
    facs = [roles[i][2].astype(dtype) if t.has_factors else None for i in first_role]
    k = facs[0].shape[1] if t.has_factors else 0

    done = 0
    while done < n:
        m = min(chunk, n - done)
        z = rng.normal((len(uniq), m, d), dtype=dtype)
        e1 = rng.normal((m, k), dtype=dtype) if k else None
        pts = []
        for u in range(len(uniq)):
            x = means[u] + sds[u] * z[u]
            if k:
                x = x + e1 @ facs[u].T
            pts.append(x)
        a = pts[role_to_uid[0]]
        p = pts[role_to_uid[1]]
        neg = pts[role_to_uid[2]]
        up = a - p
        un = a - neg
        tau = (np.einsum("ij,ij->i", up, up)
               - np.einsum("ij,ij->i", un, un)).astype(np.float64)
        done += m
        yield tau


def mc_tau_moments(t: TripletGaussian, n: int, rng, chunk: int = 200_000):
    """Monte Carlo estimate of (mu_tau, var_tau) with standard errors.

    Returns (mean, var, se_mean, se_var); se_var uses the asymptotic
    formula sqrt((m4 - var^2) / n) with m4 the fourth central moment.
    """
    if n < 2:
        raise ValueError("need at least 2 samples")
    s1 = s2 = s3 = s4 = 0.0
    for tau in _stream_tau(t, n, rng, chunk=chunk):
        s1 += tau.sum()
        s2 += (tau ** 2).sum()
        s3 += (tau ** 3).sum()
        s4 += (tau ** 4).sum()
    m1, m2, m3, m4 = s1 / n, s2 / n, s3 / n, s4 / n
    mean = m1
    var = m2 - m1 * m1
    mu4 = m4 - 4.0 * m3 * m1 + 6.0 * m2 * m1 * m1 - 3.0 * m1 ** 4
    se_mean = np.sqrt(max(var, 0.0) / n)
    se_var = np.sqrt(max(mu4 - var * var, 0.0) / n)
    return mean, var, se_mean, se_var


def mc_triplet_probability(t: TripletGaussian, m: float, n: int, rng,
                           chunk: int = 200_000) -> tuple:
    """Empirical P(tau < -m) over n joint draws; returns (estimate, stderr)."""
    if n < 1000:
        raise ValueError("need at least 1000 samples")
    hits = 0
    for tau in _stream_tau(t, n, rng, chunk=chunk):
        hits += int(np.count_nonzero(tau < -m))
    p_hat = hits / n
    return p_hat, float(np.sqrt(p_hat * (1.0 - p_hat) / n))
