"""Evaluation pipelines: predictions, uncertainty scoring, calibration.

Segmentation evaluation pools all evaluation scenes, computes per-point
predictions and an uncertainty level per the requested method, and bins
levels against correctness. Matching evaluation establishes
correspondences by nearest-neighbor search in the embedding space,
scores each correspondence by the sum of its endpoints' uncertainties,
and reports per-pair hit ratios plus the feature-matching recall.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .calibration import (AU_DEFAULT_SAMPLES, CalibrationReport, DEFAULT_NUM_BINS,
                          FMR_RECALL_THRESHOLD, MCD_DEFAULT_PASSES, au_uncertainty_level,
                          correspondence_hits, ece, fmr, mcd_aggregate, miou,
                          normalize_uncertainty, random_guess_levels,
                          reliability_bins, softmax_entropy)
from .embeddings import point_uncertainties
from .network import (NetParams, forward_dropout, head_outputs, point_features,
                      softmax, trunk_features)
from .rng import Rng
from .sampling import DEFAULT_INLIER_THRESHOLD, find_correspondences
from .training import embedding_mode

SEG_METHODS = ("cue", "cue_plus", "se", "au", "mcd", "rg")
MATCH_METHODS = ("cue", "cue_plus", "mcd", "rg")
MCD_FALLBACK_DROPOUT = 0.1


@dataclass(frozen=True)
class EvalItems:
    """Per-item evaluation dump: raw uncertainty, level in [0,1], hit flag."""

    uncertainty: np.ndarray
    levels: np.ndarray
    correct: np.ndarray


def _require_heads(params: NetParams, needed, method: str) -> None:
    missing = set(needed) - set(params.heads)
    if missing:
        raise ValueError(
            f"method {method!r} needs heads {sorted(missing)} absent from the "
            f"checkpoint (trained variant lacks them)")


def _mcd_dropout(params: NetParams) -> float:
    return params.config.dropout if params.config.dropout > 0 else MCD_FALLBACK_DROPOUT


def evaluate_segmentation(params: NetParams, scenes: Sequence, method: str,
                          rng: Rng, num_bins: int = DEFAULT_NUM_BINS,
                          mcd_passes: int = MCD_DEFAULT_PASSES) -> tuple:
    """Returns (CalibrationReport, EvalItems) over the pooled scenes."""
    if method not in SEG_METHODS:
        raise ValueError(f"unknown segmentation method {method!r}")
    num_classes = params.config.num_classes
    _require_heads(params, {"classifier"}, method)
    if method in ("cue", "cue_plus"):
        _require_heads(params, {"var"} | ({"factor"} if method == "cue_plus" else set()),
                       method)
    if method == "au":
        _require_heads(params, {"classifier_var"}, method)

    all_pred, all_labels, all_unc = [], [], []
    for scene_idx, cloud in enumerate(scenes):
        feats = point_features(cloud, params.config.context_neighbors)
        h = trunk_features(params, feats)
        if method == "mcd":
            p_drop = _mcd_dropout(params)
            stack = np.stack([
                softmax(forward_dropout(params, cloud, p_drop,
                                        rng.derive("mcd", scene_idx, k)))
                for k in range(mcd_passes)])
            mean_probs, var_probs = mcd_aggregate(stack)
            pred = mean_probs.argmax(axis=1)
            unc = var_probs[np.arange(pred.size), pred]
        else:
            out = head_outputs(params, h, embedding_mode(method),
                               with_classifier=True)
            logits = out["classifier"].value
            pred = logits.argmax(axis=1)
            if method in ("cue", "cue_plus"):
                emb, _ = _embeddings_from_out(out, method)
                unc = point_uncertainties(emb)
            elif method == "se":
                unc = softmax_entropy(softmax(logits))
            elif method == "au":
                logit_var = _au_logit_variance(params, h)
                unc = logit_var[np.arange(pred.size), pred]
            else:  # rg
                unc = np.zeros(pred.size)
        all_pred.append(pred)
        all_labels.append(cloud.labels)
        all_unc.append(np.asarray(unc, dtype=np.float64))

    pred = np.concatenate(all_pred)
    labels = np.concatenate(all_labels)
    unc = np.concatenate(all_unc)
    correct = (pred == labels).astype(np.float64)

    if method == "rg":
        unc = random_guess_levels(pred.size, rng.derive("rg"))
        levels = unc
    elif method == "se":
        levels = unc  # normalized entropy is already a level
    elif method in ("au", "mcd"):
        q = normalize_uncertainty(unc)
        levels = au_uncertainty_level(q, correct)
    else:
        levels = normalize_uncertainty(unc)

    bins = reliability_bins(levels, correct, num_bins)
    report = CalibrationReport(
        bins=bins, ece=ece(bins), metric_kind="miou",
        metric_value=miou(pred, labels, num_classes), method=method,
        seed=rng.seed)
    return report, EvalItems(unc, levels, correct)


def _embeddings_from_out(out: dict, method: str):
    from .embeddings import DiagGaussianEmbeddings, LowRankGaussianEmbeddings
    mean = out["mean"].value
    if method == "cue":
        return DiagGaussianEmbeddings(mean, out["var"].value), mean
    return LowRankGaussianEmbeddings(mean, out["var"].value,
                                     out["factor"].value), mean


def _au_logit_variance(params: NetParams, h) -> np.ndarray:
    from . import autodiff as ad
    pre = h @ params.tensors["classifier_var.out.w"] + params.tensors["classifier_var.out.b"]
    return ad.softplus(pre).value


def _embedding_matches(mean_i: np.ndarray, mean_j: np.ndarray,
                       anchors: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Nearest neighbor in embedding space of cloud_j for each anchor row."""
    matches = np.empty(anchors.size, dtype=np.int64)
    for start in range(0, anchors.size, chunk):
        stop = min(start + chunk, anchors.size)
        q = mean_i[anchors[start:stop]]
        d2 = (q * q).sum(axis=1, keepdims=True) - 2.0 * q @ mean_j.T \
            + (mean_j * mean_j).sum(axis=1)
        matches[start:stop] = d2.argmin(axis=1)
    return matches


def _mcd_embedding_stats(params: NetParams, cloud, rng: Rng, passes: int,
                         pair_idx: int, side: str) -> tuple:
    """Mean embedding and per-point variance over stochastic passes."""
    p_drop = _mcd_dropout(params)
    feats = point_features(cloud, params.config.context_neighbors)
    stack = []
    for k in range(passes):
        h = trunk_features(params, feats, dropout_p=p_drop,
                           dropout_rng=rng.derive("mcd", pair_idx, side, k))
        stack.append(head_outputs(params, h, "deterministic")["mean"].value)
    stack = np.stack(stack)
    return stack.mean(axis=0), stack.var(axis=0, ddof=1).mean(axis=1)


def evaluate_matching(params: NetParams, pairs, method: str, rng: Rng,
                      num_bins: int = DEFAULT_NUM_BINS,
                      threshold: float = DEFAULT_INLIER_THRESHOLD,
                      recall_threshold: float = FMR_RECALL_THRESHOLD,
                      mcd_passes: int = MCD_DEFAULT_PASSES) -> tuple:
    """Returns (CalibrationReport, EvalItems) over all pairs' correspondences."""
    if method not in MATCH_METHODS:
        raise ValueError(f"unknown matching method {method!r}")
    if method in ("cue", "cue_plus"):
        _require_heads(params, {"var"} | ({"factor"} if method == "cue_plus" else set()),
                       method)

    per_pair_hits = []
    all_hits, all_unc = [], []
    for pair_idx, (cloud_i, cloud_j, transform) in enumerate(pairs):
        gt = find_correspondences(cloud_i, cloud_j, transform, threshold)
        if len(gt) == 0:
            raise ValueError(f"pair {pair_idx} has no ground-truth correspondences")
        if method == "mcd":
            mean_i, u_i = _mcd_embedding_stats(params, cloud_i, rng, mcd_passes,
                                               pair_idx, "i")
            mean_j, u_j = _mcd_embedding_stats(params, cloud_j, rng, mcd_passes,
                                               pair_idx, "j")
        else:
            feats_i = point_features(cloud_i, params.config.context_neighbors)
            feats_j = point_features(cloud_j, params.config.context_neighbors)
            mode = embedding_mode(method)
            out_i = head_outputs(params, trunk_features(params, feats_i), mode)
            out_j = head_outputs(params, trunk_features(params, feats_j), mode)
            mean_i, mean_j = out_i["mean"].value, out_j["mean"].value
            if method in ("cue", "cue_plus"):
                emb_i, _ = _embeddings_from_out(out_i, method)
                emb_j, _ = _embeddings_from_out(out_j, method)
                u_i = point_uncertainties(emb_i)
                u_j = point_uncertainties(emb_j)
            else:
                u_i = np.zeros(cloud_i.n_points)
                u_j = np.zeros(cloud_j.n_points)

        anchors = gt.pairs[:, 0]
        matched = _embedding_matches(mean_i, mean_j, anchors)
        predicted = np.stack([anchors, matched], axis=1)
        hits = correspondence_hits(predicted, gt, cloud_j.coords, threshold)
        per_pair_hits.append(float(hits.mean()))
        all_hits.append(hits.astype(np.float64))
        # correspondence uncertainty: sum of the two endpoints'
        all_unc.append(u_i[anchors] + u_j[matched])

    hits = np.concatenate(all_hits)
    unc = np.concatenate(all_unc)
    if method == "rg":
        unc = random_guess_levels(hits.size, rng.derive("rg"))
        levels = unc
    else:
        levels = normalize_uncertainty(unc)

    bins = reliability_bins(levels, hits, num_bins)
    report = CalibrationReport(
        bins=bins, ece=ece(bins), metric_kind="fmr",
        metric_value=fmr(per_pair_hits, recall_threshold), method=method,
        seed=rng.seed, per_pair_hit_ratio=tuple(per_pair_hits))
    return report, EvalItems(unc, levels, hits)
