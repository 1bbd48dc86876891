"""Calibration metrics: uncertainty binning, ECE, and task metrics.

Uncertainty scalars are min-max normalized over the evaluation set into
levels in [0, 1], binned into equal-width bins, and compared against
per-bin accuracy (hit ratio for matching, precision for segmentation).
A bin's confidence is 1 - its mean level, so an ideally calibrated method
has accuracy equal to confidence in every bin and zero expected
calibration error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .embeddings import correspondence_uncertainty  # re-exported for pipelines
from .sampling import CorrespondenceSet

__all__ = [
    "BinStats", "CalibrationReport", "normalize_uncertainty", "softmax_entropy",
    "au_uncertainty_level", "mcd_aggregate", "reliability_bins", "ece",
    "correspondence_hits", "hit_ratio", "fmr", "miou", "random_guess_levels",
    "correspondence_uncertainty",
]

DEFAULT_NUM_BINS = 10
FMR_RECALL_THRESHOLD = 0.05
MCD_DEFAULT_PASSES = 40
AU_DEFAULT_SAMPLES = 10


@dataclass(frozen=True)
class BinStats:
    """Per-bin statistics of a reliability diagram.

    `accuracy` is NaN for empty bins (carried with count 0).
    """

    centers: np.ndarray
    mean_levels: np.ndarray
    counts: np.ndarray
    accuracies: np.ndarray

    def __post_init__(self):
        for name in ("centers", "mean_levels", "counts", "accuracies"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def confidences(self) -> np.ndarray:
        return 1.0 - self.mean_levels

    @property
    def num_bins(self) -> int:
        return int(self.centers.shape[0])

    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class CalibrationReport:
    bins: BinStats
    ece: float
    metric_kind: str          # "miou" or "fmr"
    metric_value: float
    method: str
    seed: int
    config_hash: str = ""
    per_pair_hit_ratio: Optional[tuple] = None
    extras: dict = field(default_factory=dict)


def normalize_uncertainty(values) -> np.ndarray:
    """Min-max normalize non-negative uncertainties over the evaluation set;
    a constant input maps to all zeros."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("normalize_uncertainty requires a nonempty input")
    if np.any(values < 0):
        raise ValueError("uncertainties must be non-negative")
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def softmax_entropy(probs) -> np.ndarray:
    """Entropy of a softmax output normalized to [0, 1] by log C.

    Accepts a single C-vector or an (N, C) stack; 0 * log 0 = 0.
    """
    probs = np.asarray(probs, dtype=np.float64)
    squeeze = probs.ndim == 1
    probs = np.atleast_2d(probs)
    c = probs.shape[1]
    if np.any(probs < -1e-12) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("rows must be probability vectors summing to 1")
    safe = np.clip(probs, 1e-300, None)
    h = -(np.where(probs > 0, probs * np.log(safe), 0.0)).sum(axis=1) / np.log(c)
    h = np.clip(h, 0.0, 1.0)
    return float(h[0]) if squeeze else h


def au_uncertainty_level(q, y):
    """Label-dependent variance-to-level transform: y(1-0.5q) + (1-y)(0.5q).

    Implemented verbatim for baseline parity. Note the transform consumes
    the ground-truth correctness indicator y, which makes the resulting
    level label-dependent; see the README discussion.
    """
    q = np.asarray(q, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any(q < 0) or np.any(q > 1):
        raise ValueError("normalized variance q must lie in [0, 1]")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("correctness indicator y must be 0 or 1")
    out = y * (1.0 - 0.5 * q) + (1.0 - y) * (0.5 * q)
    return float(out) if out.ndim == 0 else out


def mcd_aggregate(prob_stack) -> tuple:
    """Mean and unbiased variance of softmax outputs across stochastic passes.

    `prob_stack` has shape (n_passes, ..., C) with n_passes >= 2. The
    prediction is the argmax of the mean; the per-item uncertainty scalar
    used downstream is the variance at that predicted class.
    """
    stack = np.asarray(prob_stack, dtype=np.float64)
    if stack.ndim < 2 or stack.shape[0] < 2:
        raise ValueError("need at least 2 passes of shape (n_passes, ..., C)")
    mean = stack.mean(axis=0)
    var = stack.var(axis=0, ddof=1)
    return mean, var


def reliability_bins(levels, correct, num_bins: int = DEFAULT_NUM_BINS) -> BinStats:
    """Equal-width bins over [0, 1], right-inclusive at 1.0."""
    levels = np.asarray(levels, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    if levels.shape != correct.shape:
        raise ValueError("levels and correctness must have equal length")
    if levels.size and (levels.min() < 0 or levels.max() > 1):
        raise ValueError("levels must lie in [0, 1]")
    idx = np.minimum((levels * num_bins).astype(np.int64), num_bins - 1)
    counts = np.bincount(idx, minlength=num_bins).astype(np.float64)
    level_sum = np.bincount(idx, weights=levels, minlength=num_bins)
    hit_sum = np.bincount(idx, weights=correct, minlength=num_bins)
    with np.errstate(invalid="ignore"):
        mean_levels = np.where(counts > 0, level_sum / np.maximum(counts, 1), np.nan)
        accuracies = np.where(counts > 0, hit_sum / np.maximum(counts, 1), np.nan)
    centers = (np.arange(num_bins) + 0.5) / num_bins
    return BinStats(centers, mean_levels, counts, accuracies)


def ece(bins: BinStats, weighted: bool = True) -> float:
    """Count-weighted mean |accuracy - confidence| over nonempty bins.

    `weighted=False` averages the gaps uniformly over nonempty bins
    instead.
    """
    occupied = bins.counts > 0
    if not occupied.any():
        raise ValueError("all bins are empty")
    gaps = np.abs(bins.accuracies[occupied] - bins.confidences[occupied])
    if weighted:
        weights = bins.counts[occupied] / bins.counts[occupied].sum()
        return float(np.sum(weights * gaps))
    return float(np.mean(gaps))


def correspondence_hits(predicted_pairs, ground_truth: CorrespondenceSet,
                        coords_j, threshold: float) -> np.ndarray:
    """Hit flag per evaluated anchor.

    `predicted_pairs` maps each ground-truth anchor (column 0) to the
    index its embedding matched in cloud j; a hit means the matched point
    lies within `threshold` meters of the true correspondent.
    """
    predicted_pairs = np.asarray(predicted_pairs, dtype=np.int64).reshape(-1, 2)
    gt = ground_truth.pairs
    if predicted_pairs.shape[0] != gt.shape[0]:
        raise ValueError("one prediction per ground-truth anchor required")
    if predicted_pairs.shape[0] == 0:
        raise ValueError("empty evaluation set")
    if not np.array_equal(predicted_pairs[:, 0], gt[:, 0]):
        raise ValueError("predictions must be aligned with ground-truth anchors")
    coords_j = np.asarray(coords_j, dtype=np.float64)
    dist = np.linalg.norm(coords_j[predicted_pairs[:, 1]] - coords_j[gt[:, 1]], axis=1)
    return dist <= threshold


def hit_ratio(predicted_pairs, ground_truth: CorrespondenceSet, coords_j,
              threshold: float) -> float:
    """Fraction of anchors whose match lands within the inlier threshold."""
    return float(correspondence_hits(predicted_pairs, ground_truth, coords_j,
                                     threshold).mean())


def fmr(per_pair_hit_ratios, recall_threshold: float = FMR_RECALL_THRESHOLD) -> float:
    """Fraction of cloud pairs whose hit ratio exceeds the recall threshold."""
    ratios = np.asarray(per_pair_hit_ratios, dtype=np.float64)
    if ratios.size == 0:
        raise ValueError("fmr requires at least one pair")
    return float(np.mean(ratios > recall_threshold))


def miou(predictions, labels, num_classes: int) -> float:
    """Mean intersection-over-union; classes absent from both sides are
    excluded from the mean."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape or predictions.size == 0:
        raise ValueError("predictions and labels must be equal-length and nonempty")
    if predictions.min() < 0 or predictions.max() >= num_classes \
            or labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError("class ids must lie in [0, num_classes)")
    ious = []
    for c in range(num_classes):
        pred_c = predictions == c
        true_c = labels == c
        union = np.logical_or(pred_c, true_c).sum()
        if union == 0:
            continue
        inter = np.logical_and(pred_c, true_c).sum()
        ious.append(inter / union)
    return float(np.mean(ious))


def random_guess_levels(n: int, rng) -> np.ndarray:
    """I.i.d. uniform [0, 1] uncertainty levels (the random baseline)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return rng.uniform((n,))
