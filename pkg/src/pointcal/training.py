"""Training protocols: joint segmentation and two-stage matching.

Segmentation trains end to end on a weighted sum of softmax cross
entropy and the probabilistic triplet loss over boundary-focused
triplets. Matching first trains the mean branch with a deterministic
margin triplet loss over correspondence triplets, then freezes the trunk
and mean branch and trains only the variance (and factor) heads with the
probabilistic loss, so predictive performance is untouched by the
uncertainty stage.

One scene (or pair) is one optimization step; all randomness comes from
derived child streams keyed on epoch and scene index, keeping runs
bit-reproducible and making variants with shared parameters follow
identical trajectories when the extra loss terms carry zero weight.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .embeddings import PointCloud
from .moments import (batched_tau_diag, batched_tau_lowrank,
                      marginal_variance, metric_loss_from_moments)
from .network import (NetConfig, NetParams, build_params, cross_entropy, freeze,
                      head_outputs, point_features, sgd_step, trunk_features)
from .rng import Rng
from .sampling import (DEFAULT_INLIER_THRESHOLD, find_correspondences, knn_indices,
                       sample_cem, sample_ces)

SEG_VARIANTS = ("deterministic", "cue", "cue_plus", "au", "mcd", "se", "rg")
MATCH_VARIANTS = ("deterministic", "cue", "cue_plus", "mcd", "rg")

DEFAULT_TRIPLETS_PER_STEP = 256
DEFAULT_CES_NEIGHBORHOOD = 16
DEFAULT_SEG_MARGIN = 0.2
DEFAULT_MATCH_MARGIN = 0.1


class TrainingDiverged(RuntimeError):
    """Raised when a training loss turns non-finite."""


@dataclass
class TrainReport:
    task: str
    variant: str
    epochs: int
    losses: dict = field(default_factory=dict)   # name -> per-epoch means
    wall_clock_s: float = 0.0
    param_count: int = 0
    checkpoint_path: Optional[str] = None

    def final_loss(self, key: str = "total") -> float:
        return self.losses[key][-1]


def heads_for_variant(task: str, variant: str) -> frozenset:
    """Which network heads a training variant instantiates."""
    if task == "segmentation":
        if variant not in SEG_VARIANTS:
            raise ValueError(f"unknown segmentation variant {variant!r}")
        heads = {"mean", "classifier"}
        if variant in ("cue", "cue_plus"):
            heads.add("var")
        if variant == "cue_plus":
            heads.add("factor")
        if variant == "au":
            heads.add("classifier_var")
        return frozenset(heads)
    if task == "matching":
        if variant not in MATCH_VARIANTS:
            raise ValueError(f"unknown matching variant {variant!r}")
        heads = {"mean"}
        if variant in ("cue", "cue_plus"):
            heads.add("var")
        if variant == "cue_plus":
            heads.add("factor")
        return frozenset(heads)
    raise ValueError(f"unknown task {task!r}")


def embedding_mode(variant: str) -> str:
    return variant if variant in ("cue", "cue_plus") else "deterministic"


def _check_finite(loss_value: float) -> float:
    if not np.isfinite(loss_value):
        raise TrainingDiverged(f"loss became non-finite ({loss_value})")
    return float(loss_value)


@dataclass
class _PreparedScene:
    cloud: PointCloud
    features: np.ndarray
    neighbors: np.ndarray


def _prepare_scenes(scenes: Sequence[PointCloud], cfg: NetConfig,
                    ces_k: int) -> list:
    prepared = []
    for cloud in scenes:
        feats = point_features(cloud, cfg.context_neighbors)
        nb = knn_indices(cloud.coords, ces_k)
        prepared.append(_PreparedScene(cloud, feats, nb))
    return prepared


def _gather_role(out: dict, idx: np.ndarray, with_factor: bool):
    mean = out["mean"].take_rows(idx)
    var = out["var"].take_rows(idx)
    fac = out["factor"].take_rows(idx) if with_factor else None
    return mean, var, fac


def triplet_metric_loss(out_by_set: dict, batch, margin: float,
                        correlated: bool = False):
    """Differentiable triplet loss from head outputs and an index batch.

    `out_by_set` maps a set tag to head outputs (as from `head_outputs`);
    the batch's role tags pick which outputs each role indexes. Factor
    heads contribute through the exact joint moments when `correlated` is
    set, otherwise through each point's marginal variance
    (var + sum_k factor^2).
    """
    has_factor = all(
        "factor" in out_by_set[tag] for tag in
        (batch.anchor_set, batch.positive_set, batch.negative_set))
    a = _gather_role(out_by_set[batch.anchor_set], batch.anchors, has_factor)
    p = _gather_role(out_by_set[batch.positive_set], batch.positives, has_factor)
    n = _gather_role(out_by_set[batch.negative_set], batch.negatives, has_factor)
    if has_factor and correlated:
        mu, var = batched_tau_lowrank(a[0], a[1], a[2], p[0], p[1], p[2],
                                      n[0], n[1], n[2])
    else:
        mu, var = batched_tau_diag(a[0], marginal_variance(a[1], a[2]),
                                   p[0], marginal_variance(p[1], p[2]),
                                   n[0], marginal_variance(n[1], n[2]))
    return metric_loss_from_moments(mu, var, margin)


def train_segmentation(cfg: NetConfig, scenes: Sequence[PointCloud], variant: str,
                       metric_weight: float = 1.0,
                       margin: float = DEFAULT_SEG_MARGIN,
                       epochs: int = 30, rng: Optional[Rng] = None,
                       lr: float = 0.05, momentum: float = 0.9,
                       weight_decay: float = 0.0,
                       triplets_per_step: int = DEFAULT_TRIPLETS_PER_STEP,
                       ces_neighborhood: int = DEFAULT_CES_NEIGHBORHOOD,
                       correlated: bool = False,
                       au_samples: int = 10,
                       decay_epochs: tuple = (), decay_factor: float = 0.2) -> tuple:
    """Joint cross-entropy + triplet-loss training; returns (params, report)."""
    if not scenes:
        raise ValueError("no training scenes")
    if cfg.num_classes is None:
        raise ValueError("segmentation needs num_classes in the NetConfig")
    rng = rng if rng is not None else Rng(0)
    heads = heads_for_variant("segmentation", variant)
    params = build_params(cfg, rng.derive("init"), heads)
    prepared = _prepare_scenes(scenes, cfg, ces_neighborhood)
    state: dict = {}
    with_triplets = variant in ("cue", "cue_plus")
    mode = embedding_mode(variant)
    dropout_p = cfg.dropout if variant == "mcd" else 0.0

    losses = {"ce": [], "total": []}
    if with_triplets:
        losses["metric"] = []
    start = time.perf_counter()
    for epoch in range(epochs):
        step_lr = lr * decay_factor ** sum(epoch >= e for e in decay_epochs)
        ep = {k: 0.0 for k in losses}
        for s, scene in enumerate(prepared):
            droprng = rng.derive("dropout", epoch, s) if dropout_p > 0 else None
            h = trunk_features(params, scene.features, dropout_p=dropout_p,
                               dropout_rng=droprng)
            out = head_outputs(params, h, mode, with_classifier=True)
            if variant == "au":
                logvar = ad.softplus(
                    h @ params.tensors["classifier_var.out.w"]
                    + params.tensors["classifier_var.out.b"])
                eps = rng.derive("au", epoch, s).normal(
                    (au_samples,) + out["classifier"].value.shape)
                ce_sum = None
                for k in range(au_samples):
                    sampled = out["classifier"] + logvar ** 0.5 * eps[k]
                    term = cross_entropy(sampled, scene.cloud.labels)
                    ce_sum = term if ce_sum is None else ce_sum + term
                ce = ce_sum * (1.0 / au_samples)
            else:
                ce = cross_entropy(out["classifier"], scene.cloud.labels)
            total = ce
            lm = None
            if with_triplets:
                batch = sample_ces(scene.cloud, triplets_per_step,
                                   ces_neighborhood, rng.derive("ces", epoch, s),
                                   neighbors=scene.neighbors)
                if len(batch) > 0:
                    lm = triplet_metric_loss({"self": out}, batch, margin,
                                             correlated=correlated)
                    total = ce + metric_weight * lm
            grads = ad.gradients(total, params.leaf_map())
            sgd_step(params, grads, state, step_lr, momentum, weight_decay)
            ep["ce"] += _check_finite(ce.value)
            ep["total"] += _check_finite(total.value)
            if with_triplets:
                ep["metric"] += _check_finite(lm.value) if lm is not None else 0.0
        for k in losses:
            losses[k].append(ep[k] / len(prepared))
    report = TrainReport(task="segmentation", variant=variant, epochs=epochs,
                         losses=losses, wall_clock_s=time.perf_counter() - start,
                         param_count=params.param_count())
    return params, report


@dataclass
class _PreparedPair:
    cloud_i: PointCloud
    cloud_j: PointCloud
    features_i: np.ndarray
    features_j: np.ndarray
    corrs: object


def prepare_pairs(pairs, cfg: NetConfig,
                  threshold: float = DEFAULT_INLIER_THRESHOLD) -> list:
    """Cache features and ground-truth correspondences per pair."""
    prepared = []
    for cloud_i, cloud_j, transform in pairs:
        corrs = find_correspondences(cloud_i, cloud_j, transform, threshold)
        if len(corrs) == 0:
            raise ValueError("a training pair has no correspondences")
        prepared.append(_PreparedPair(
            cloud_i, cloud_j,
            point_features(cloud_i, cfg.context_neighbors),
            point_features(cloud_j, cfg.context_neighbors),
            corrs))
    return prepared


def _margin_triplet_loss(out_i, out_j, batch_ij, batch_ji, margin: float):
    """Deterministic stage-1 loss: mean relu(d_ap - d_an + margin) over the
    squared distances of the mean embeddings, both directions pooled."""
    def gap(out_by_set, batch):
        a = out_by_set[batch.anchor_set]["mean"].take_rows(batch.anchors)
        p = out_by_set[batch.positive_set]["mean"].take_rows(batch.positives)
        n = out_by_set[batch.negative_set]["mean"].take_rows(batch.negatives)
        d_ap = ((a - p) ** 2).sum(axis=1)
        d_an = ((a - n) ** 2).sum(axis=1)
        return d_ap - d_an

    sets = {"i": out_i, "j": out_j}
    g1 = gap(sets, batch_ij)
    g2 = gap(sets, batch_ji)
    return (ad.relu(g1 + margin).sum() + ad.relu(g2 + margin).sum()) \
        * (1.0 / (len(batch_ij) + len(batch_ji)))


def train_matching(cfg: NetConfig, pairs, variant: str,
                   margin: float = DEFAULT_MATCH_MARGIN,
                   stage_epochs: tuple = (40, 30), rng: Optional[Rng] = None,
                   lr: float = 0.05, momentum: float = 0.9,
                   weight_decay: float = 0.0,
                   triplets_per_step: int = DEFAULT_TRIPLETS_PER_STEP,
                   correlated: bool = False,
                   threshold: float = DEFAULT_INLIER_THRESHOLD,
                   decay_epochs: tuple = (), decay_factor: float = 0.2) -> tuple:
    """Two-stage matching training; returns (params, report).

    Stage 1 fits the mean branch with the deterministic margin loss.
    Stage 2 (cue / cue_plus only) freezes trunk and mean so the learned
    matches are untouched, then fits the variance heads with the
    probabilistic loss on fresh correspondence triplets.
    """
    if not pairs:
        raise ValueError("no training pairs")
    rng = rng if rng is not None else Rng(0)
    heads = heads_for_variant("matching", variant)
    params = build_params(cfg, rng.derive("init"), heads)
    prepared = prepare_pairs(pairs, cfg, threshold)
    stage1_epochs, stage2_epochs = stage_epochs
    with_stage2 = variant in ("cue", "cue_plus")
    dropout_p = cfg.dropout if variant == "mcd" else 0.0

    losses = {"margin": []}
    if with_stage2:
        losses["metric"] = []
    start = time.perf_counter()

    state: dict = {}
    for epoch in range(stage1_epochs):
        step_lr = lr * decay_factor ** sum(epoch >= e for e in decay_epochs)
        ep = 0.0
        for s, pair in enumerate(prepared):
            droprng = rng.derive("dropout", epoch, s) if dropout_p > 0 else None
            h_i = trunk_features(params, pair.features_i, dropout_p=dropout_p,
                                 dropout_rng=droprng)
            h_j = trunk_features(params, pair.features_j, dropout_p=dropout_p,
                                 dropout_rng=droprng)
            out_i = head_outputs(params, h_i, "deterministic")
            out_j = head_outputs(params, h_j, "deterministic")
            b_ij, b_ji = sample_cem(pair.corrs, pair.cloud_i.n_points,
                                    pair.cloud_j.n_points, triplets_per_step,
                                    rng.derive("cem1", epoch, s))
            loss = _margin_triplet_loss(out_i, out_j, b_ij, b_ji, margin)
            grads = ad.gradients(loss, params.leaf_map())
            sgd_step(params, grads, state, step_lr, momentum, weight_decay)
            ep += _check_finite(loss.value)
        losses["margin"].append(ep / len(prepared))

    if with_stage2:
        params = freeze(params, {"trunk", "mean"})
        mode = embedding_mode(variant)
        state = {}
        for epoch in range(stage2_epochs):
            ep = 0.0
            for s, pair in enumerate(prepared):
                h_i = trunk_features(params, pair.features_i)
                h_j = trunk_features(params, pair.features_j)
                out_i = head_outputs(params, h_i, mode)
                out_j = head_outputs(params, h_j, mode)
                b_ij, b_ji = sample_cem(pair.corrs, pair.cloud_i.n_points,
                                        pair.cloud_j.n_points, triplets_per_step,
                                        rng.derive("cem2", epoch, s))
                sets = {"i": out_i, "j": out_j}
                lm = (triplet_metric_loss(sets, b_ij, margin, correlated)
                      + triplet_metric_loss(sets, b_ji, margin, correlated)) * 0.5
                grads = ad.gradients(lm, params.leaf_map())
                sgd_step(params, grads, state, lr, momentum, weight_decay)
                ep += _check_finite(lm.value)
            losses["metric"].append(ep / len(prepared))

    report = TrainReport(task="matching", variant=variant,
                         epochs=stage1_epochs + (stage2_epochs if with_stage2 else 0),
                         losses=losses, wall_clock_s=time.perf_counter() - start,
                         param_count=params.param_count())
    return params, report


def train_baseline_au(cfg: NetConfig, scenes: Sequence[PointCloud],
                      n_mc: int = 10, epochs: int = 30,
                      rng: Optional[Rng] = None, **kwargs) -> tuple:
    """Sampled-logit baseline: Gaussian logits, Monte Carlo cross entropy."""
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    return train_segmentation(cfg, scenes, "au", metric_weight=0.0,
                              epochs=epochs, rng=rng, au_samples=n_mc, **kwargs)
