"""Verification suites: analytic moments vs Monte Carlo, gradients vs
finite differences, low-rank sampling vs its implied covariance.

Each suite returns a list of rows (one comparison each) with a pass/fail
verdict at its tolerance gate; the CLI renders them as CSV and exits
nonzero when any row fails.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .embeddings import LowRankGaussianEmbeddings, TripletGaussian, sample_embeddings
from .moments import (batched_tau_diag, batched_tau_lowrank, mc_tau_moments,
                      mc_triplet_probability, metric_loss_from_moments,
                      tau_moments_diag, tau_moments_lowrank, triplet_probability)
from .rng import Rng

GRADIENT_TOLERANCE = 1e-4
COVARIANCE_TOLERANCE = 0.05
_FD_STEP = 1e-5

# how the 50 moment-suite triplets spread over embedding dimensions; small
# D is cheap, so it carries more cases
MOMENT_SUITE_DIMS = (1,) * 26 + (4,) * 14 + (16,) * 7 + (64,) * 3
PROBABILITY_SUITE_DIMS = (16,) * 20 + (32,) * 15 + (64,) * 15
PROBABILITY_SUITE_SAMPLES = 400_000
PROBABILITY_CLT_ALLOWANCE = 0.005
MOMENT_SUITE_SAMPLES = 1_000_000


@dataclass(frozen=True)
class OracleRow:
    suite: str
    case: str
    quantity: str
    analytic: float
    oracle: float
    stderr: float
    tolerance: float
    passed: bool


def random_diag_triplet(rng: Rng, dim: int, mu_scale: float = None,
                        var_lo: float = 0.02, var_hi: float = 0.2) -> TripletGaussian:
    """Random triplet with unit-norm-like mean scaling (|mu_d| ~ 1/sqrt(D))."""
    scale = mu_scale if mu_scale is not None else 1.0 / np.sqrt(dim)
    def draw(tag):
        child = rng.derive(tag)
        return child.normal((dim,)) * scale, child.uniform((dim,), var_lo, var_hi)
    ma, va = draw("a")
    mp, vp = draw("p")
    mn, vn = draw("n")
    return TripletGaussian(ma, va, mp, vp, mn, vn)


def random_lowrank_triplet(rng: Rng, dim: int, rank: int = 1,
                           factor_scale: float = 0.25) -> TripletGaussian:
    base = random_diag_triplet(rng, dim)
    fac = {role: rng.derive("fac", role).normal((dim, rank)) * factor_scale
           for role in ("a", "p", "n")}
    return TripletGaussian(base.mean_a, base.var_a, base.mean_p, base.var_p,
                           base.mean_n, base.var_n, factor_a=fac["a"],
                           factor_p=fac["p"], factor_n=fac["n"])


def run_moments_suite(seed: int = 7, n_samples: int = MOMENT_SUITE_SAMPLES,
                      dims=MOMENT_SUITE_DIMS) -> list:
    """Analytic (mu_tau, var_tau) vs Monte Carlo, 3-sigma gates."""
    rng = Rng(seed)
    rows = []
    for case, dim in enumerate(dims):
        t = random_diag_triplet(rng.derive("triplet", case), dim)
        tm = tau_moments_diag(t)
        mc_mean, mc_var, se_mean, se_var = mc_tau_moments(
            t, n_samples, rng.derive("mc", case))
        rows.append(OracleRow("moments", f"D{dim}_{case}", "mu_tau",
                              tm.mu_tau, mc_mean, se_mean, 3 * se_mean,
                              abs(tm.mu_tau - mc_mean) <= 3 * se_mean))
        rows.append(OracleRow("moments", f"D{dim}_{case}", "var_tau",
                              tm.var_tau, mc_var, se_var, 3 * se_var,
                              abs(tm.var_tau - mc_var) <= 3 * se_var))
    return rows


def run_probability_suite(seed: int = 11,
                          n_samples: int = PROBABILITY_SUITE_SAMPLES,
                          dims=PROBABILITY_SUITE_DIMS,
                          margin: float = 0.1) -> list:
    """Normal-approximation probability vs raw MC frequency (D >= 16).

    Gate: 3 * stderr + a fixed allowance for the residual central-limit
    approximation error of the analytic probability.
    """
    rng = Rng(seed)
    rows = []
    for case, dim in enumerate(dims):
        t = random_diag_triplet(rng.derive("triplet", case), dim)
        p_ana = triplet_probability(tau_moments_diag(t), margin)
        p_mc, se = mc_triplet_probability(t, margin, n_samples,
                                          rng.derive("mc", case))
        tol = 3 * se + PROBABILITY_CLT_ALLOWANCE
        rows.append(OracleRow("probability", f"D{dim}_{case}", "p_closer",
                              p_ana, p_mc, se, tol, abs(p_ana - p_mc) <= tol))
    return rows


def run_lowrank_moment_suite(seed: int = 13, n_cases: int = 20,
                             n_samples: int = MOMENT_SUITE_SAMPLES) -> list:
    """Factor-coupled moments vs MC over the joint law (rank 1 and 2)."""
    rng = Rng(seed)
    rows = []
    for case in range(n_cases):
        dim = (2, 4, 8)[case % 3]
        rank = 1 if case % 4 else 2
        t = random_lowrank_triplet(rng.derive("triplet", case), dim, rank)
        tm = tau_moments_lowrank(t)
        mc_mean, mc_var, se_mean, se_var = mc_tau_moments(
            t, n_samples, rng.derive("mc", case))
        rows.append(OracleRow("lowrank", f"D{dim}K{rank}_{case}", "mu_tau",
                              tm.mu_tau, mc_mean, se_mean, 3 * se_mean,
                              abs(tm.mu_tau - mc_mean) <= 3 * se_mean))
        rows.append(OracleRow("lowrank", f"D{dim}K{rank}_{case}", "var_tau",
                              tm.var_tau, mc_var, se_var, 3 * se_var,
                              abs(tm.var_tau - mc_var) <= 3 * se_var))
    return rows


def _loss_leaves(rng: Rng, n_triplets: int, dim: int, rank: int) -> dict:
    leaves = {}
    for role in ("a", "p", "n"):
        child = rng.derive(role)
        leaves[f"mean_{role}"] = ad.Var(child.normal((n_triplets, dim)) * 0.5)
        leaves[f"rawvar_{role}"] = ad.Var(child.derive("v").normal((n_triplets, dim)))
        leaves[f"fac_{role}"] = ad.Var(
            child.derive("f").normal((n_triplets, dim, rank)) * 0.3)
    return leaves


def _loss_from_leaves(leaves: dict, margin: float, lowrank: bool):
    def var_of(role):
        return ad.softplus(leaves[f"rawvar_{role}"])
    if lowrank:
        mu, var = batched_tau_lowrank(
            leaves["mean_a"], var_of("a"), leaves["fac_a"],
            leaves["mean_p"], var_of("p"), leaves["fac_p"],
            leaves["mean_n"], var_of("n"), leaves["fac_n"])
    else:
        mu, var = batched_tau_diag(
            leaves["mean_a"], var_of("a"), leaves["mean_p"], var_of("p"),
            leaves["mean_n"], var_of("n"))
    return metric_loss_from_moments(mu, var, margin)


def gradient_check(build_loss, leaves: dict, step: float = _FD_STEP,
                   coords_per_leaf: int = 0, rng: Rng = None) -> float:
    """Max relative error between reverse-mode and central differences.

    `coords_per_leaf` > 0 spot-checks a random subset of coordinates per
    leaf; 0 checks all of them.
    """
    grads = ad.gradients(build_loss(), leaves)
    worst = 0.0
    for name, leaf in leaves.items():
        flat = leaf.value.reshape(-1)
        if coords_per_leaf and flat.size > coords_per_leaf:
            picks = rng.derive("coords", name).permutation(flat.size)[:coords_per_leaf]
        else:
            picks = range(flat.size)
        g_flat = grads[name].reshape(-1)
        for i in picks:
            keep = flat[i]
            flat[i] = keep + step
            up = float(build_loss().value)
            flat[i] = keep - step
            down = float(build_loss().value)
            flat[i] = keep
            fd = (up - down) / (2 * step)
            err = abs(g_flat[i] - fd) / max(abs(g_flat[i]), abs(fd), 1e-6)
            worst = max(worst, err)
    return worst


def run_gradient_suite(seed: int = 5, n_points: int = 12) -> list:
    """Metric-loss gradients vs central finite differences."""
    rng = Rng(seed)
    rows = []
    for case in range(n_points):
        lowrank = case % 2 == 1
        leaves = _loss_leaves(rng.derive("leaves", case), n_triplets=3,
                              dim=4, rank=1)
        if not lowrank:
            leaves = {k: v for k, v in leaves.items() if not k.startswith("fac_")}
            build = lambda lv=leaves: _loss_from_leaves(
                {**lv, "fac_a": None, "fac_p": None, "fac_n": None}, 0.1, False)
        else:
            build = lambda lv=leaves: _loss_from_leaves(lv, 0.1, True)
        worst = gradient_check(build, leaves)
        rows.append(OracleRow("gradients",
                              f"{'lowrank' if lowrank else 'diag'}_{case}",
                              "max_rel_err", worst, 0.0, 0.0,
                              GRADIENT_TOLERANCE, worst < GRADIENT_TOLERANCE))
    return rows


def run_covariance_suite(seed: int = 3, n_cases: int = 6,
                         n_samples: int = 100_000) -> list:
    """Sample covariance of low-rank draws vs factor @ factor.T + diag."""
    rng = Rng(seed)
    rows = []
    for case in range(n_cases):
        n, d = (2, 4) if case % 2 == 0 else (4, 4)
        child = rng.derive("emb", case)
        mean = child.normal((n, d))
        mean /= np.linalg.norm(mean, axis=1, keepdims=True)
        var = child.derive("v").uniform((n, d), 0.05, 0.3)
        factor = child.derive("f").normal((n, d, 1)) * 0.4
        emb = LowRankGaussianEmbeddings(mean, var, factor)
        target = emb.full_covariance()
        draws = sample_embeddings(emb, rng.derive("draws", case), n_samples)
        flat = draws.reshape(n_samples, -1)
        sample_cov = np.cov(flat.T)
        rel = (np.linalg.norm(sample_cov - target, "fro")
               / np.linalg.norm(target, "fro"))
        rows.append(OracleRow("covariance", f"N{n}D{d}_{case}", "frobenius_rel",
                              rel, 0.0, 0.0, COVARIANCE_TOLERANCE,
                              rel < COVARIANCE_TOLERANCE))
    return rows


SUITES = {
    "moments": run_moments_suite,
    "gradients": run_gradient_suite,
    "covariance": run_covariance_suite,
}


def rows_to_csv(rows) -> str:
    lines = ["suite,case,quantity,analytic,oracle,stderr,tolerance,verdict"]
    for r in rows:
        lines.append("%s,%s,%s,%.12g,%.12g,%.12g,%.12g,%s"
                     % (r.suite, r.case, r.quantity, r.analytic, r.oracle,
                        r.stderr, r.tolerance, "pass" if r.passed else "FAIL"))
    return "\n".join(lines) + "\n"
