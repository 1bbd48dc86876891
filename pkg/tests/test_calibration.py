"""Calibration metrics: normalization, binning, ECE, task metrics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointcal.calibration import (au_uncertainty_level, ece, fmr, hit_ratio,
                                  mcd_aggregate, miou, normalize_uncertainty,
                                  random_guess_levels, reliability_bins,
                                  softmax_entropy)
from pointcal.sampling import CorrespondenceSet
from pointcal.rng import Rng


class TestNormalizeUncertainty:
    def test_constant_maps_to_zero(self):
        np.testing.assert_array_equal(normalize_uncertainty([2.0, 2.0, 2.0]),
                                      [0.0, 0.0, 0.0])

    def test_min_max(self):
        np.testing.assert_allclose(normalize_uncertainty([0.0, 1.0, 3.0]),
                                   [0.0, 1.0 / 3.0, 1.0])

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            normalize_uncertainty([-0.1, 0.5])

    @given(st.lists(st.floats(min_value=0, max_value=100), min_size=2, max_size=50))
    @settings(max_examples=100, deadline=None)
    def test_order_preserved(self, values):
        levels = normalize_uncertainty(values)
        order = np.argsort(values, kind="stable")
        assert np.all(np.diff(levels[order]) >= -1e-12)


class TestSoftmaxEntropy:
    def test_uniform_is_one(self):
        assert softmax_entropy(np.full(4, 0.25)) == pytest.approx(1.0)

    def test_one_hot_is_zero(self):
        assert softmax_entropy(np.array([1.0, 0.0, 0.0, 0.0])) == 0.0

    def test_half_half(self):
        # ln 2 / ln 4 = 0.5
        assert softmax_entropy(np.array([0.5, 0.5, 0.0, 0.0])) == pytest.approx(0.5)

    def test_rejects_non_simplex(self):
        with pytest.raises(ValueError):
            softmax_entropy(np.array([0.5, 0.6]))


class TestAuTransform:
    def test_confident_correct(self):
        assert au_uncertainty_level(0.0, 1) == pytest.approx(1.0)

    def test_q_one_is_half_either_way(self):
        assert au_uncertainty_level(1.0, 0) == pytest.approx(0.5)
        assert au_uncertainty_level(1.0, 1) == pytest.approx(0.5)

    def test_hand_computed(self):
        assert au_uncertainty_level(0.4, 0) == pytest.approx(0.2)

    def test_bounds_enforced(self):
        with pytest.raises(ValueError):
            au_uncertainty_level(1.2, 1)
        with pytest.raises(ValueError):
            au_uncertainty_level(0.5, 0.5)


class TestMcdAggregate:
    def test_identical_passes_zero_variance(self):
        stack = np.tile(np.array([[0.2, 0.8]]), (5, 1))
        mean, var = mcd_aggregate(stack)
        np.testing.assert_allclose(mean, [0.2, 0.8])
        np.testing.assert_allclose(var, 0.0)

    def test_two_pass_hand_case(self):
        stack = np.array([[1.0, 0.0], [0.0, 1.0]])
        mean, var = mcd_aggregate(stack)
        np.testing.assert_allclose(mean, [0.5, 0.5])
        np.testing.assert_allclose(var, [0.5, 0.5])

    def test_needs_two_passes(self):
        with pytest.raises(ValueError):
            mcd_aggregate(np.ones((1, 3)))


class TestReliabilityBins:
    def test_all_in_first_bin(self):
        bins = reliability_bins(np.full(10, 0.05), np.ones(10), 10)
        assert bins.counts[0] == 10
        assert bins.accuracies[0] == 1.0
        assert np.all(bins.counts[1:] == 0)
        assert np.all(np.isnan(bins.accuracies[1:]))

    def test_two_cohorts(self):
        levels = np.concatenate([np.full(10, 0.05), np.full(10, 0.95)])
        correct = np.concatenate([np.ones(10), np.zeros(10)])
        bins = reliability_bins(levels, correct, 10)
        assert bins.accuracies[0] == 1.0
        assert bins.accuracies[-1] == 0.0

    def test_right_edge_inclusive(self):
        bins = reliability_bins(np.array([1.0]), np.array([1.0]), 10)
        assert bins.counts[-1] == 1

    def test_counts_match_histogram_oracle(self):
        rng = Rng(5)
        levels = rng.uniform((500,))
        correct = (rng.derive("c").uniform((500,)) < 0.5).astype(float)
        bins = reliability_bins(levels, correct, 10)
        hist, _ = np.histogram(levels, bins=10, range=(0.0, 1.0))
        np.testing.assert_array_equal(bins.counts, hist)
        assert bins.total() == 500

    def test_permutation_invariance(self):
        rng = Rng(6)
        levels = rng.uniform((200,))
        correct = (rng.derive("c").uniform((200,)) < 0.7).astype(float)
        bins_a = reliability_bins(levels, correct, 10)
        perm = rng.derive("p").permutation(200)
        bins_b = reliability_bins(levels[perm], correct[perm], 10)
        np.testing.assert_allclose(bins_a.counts, bins_b.counts)
        np.testing.assert_allclose(bins_a.accuracies, bins_b.accuracies,
                                   equal_nan=True)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            reliability_bins(np.zeros(3), np.zeros(4))


class TestEce:
    def test_perfect_single_bin(self):
        bins = reliability_bins(np.zeros(20), np.ones(20), 10)
        assert ece(bins) == pytest.approx(0.0)

    def test_hand_computed_two_bin_fixture(self):
        # bins: (count 10, acc 0.9, mean level 0.15), (count 30, acc 0.7,
        # mean level 0.25) -> (10*|0.9-0.85| + 30*|0.7-0.75|)/40 = 0.05
        levels = np.concatenate([np.full(10, 0.15), np.full(30, 0.25)])
        correct = np.concatenate([np.ones(9), np.zeros(1), np.ones(21), np.zeros(9)])
        bins = reliability_bins(levels, correct, 10)
        assert ece(bins) == pytest.approx(0.05, abs=1e-12)

    def test_zero_iff_every_bin_calibrated(self):
        levels = np.concatenate([np.full(10, 0.1), np.full(10, 0.3)])
        correct = np.concatenate([np.ones(9), [0.0], np.ones(7), np.zeros(3)])
        bins = reliability_bins(levels, correct, 10)
        assert ece(bins) == pytest.approx(0.0, abs=1e-12)

    def test_unweighted_flag(self):
        levels = np.concatenate([np.full(10, 0.15), np.full(30, 0.25)])
        correct = np.concatenate([np.ones(9), np.zeros(1), np.ones(21), np.zeros(9)])
        bins = reliability_bins(levels, correct, 10)
        assert ece(bins, weighted=False) == pytest.approx(0.05)  # equal gaps

    def test_all_empty_rejected(self):
        bins = reliability_bins(np.zeros(0), np.zeros(0), 10)
        with pytest.raises(ValueError):
            ece(bins)

    def test_bernoulli_stream_is_calibrated(self):
        rng = Rng(77)
        levels = rng.uniform((10 ** 5,))
        correct = (rng.derive("y").uniform((10 ** 5,)) < 1.0 - levels).astype(float)
        bins = reliability_bins(levels, correct, 10)
        assert ece(bins) < 0.02


class TestHitRatioAndFmr:
    def _identity_setup(self, n=20):
        coords_j = Rng(3).uniform((n, 3), -1.0, 1.0)
        gt = CorrespondenceSet(np.stack([np.arange(n), np.arange(n)], axis=1), 0.1)
        return coords_j, gt

    def test_identity_predictions(self):
        coords_j, gt = self._identity_setup()
        predicted = gt.pairs.copy()
        assert hit_ratio(predicted, gt, coords_j, 0.1) == 1.0

    def test_zero_threshold_requires_exact(self):
        coords_j, gt = self._identity_setup()
        predicted = gt.pairs.copy()
        predicted[0, 1] = 1  # wrong match for anchor 0
        assert hit_ratio(predicted, gt, coords_j, 0.0) == pytest.approx(19 / 20)

    def test_random_matches_near_chance(self):
        n = 500
        rng = Rng(9)
        coords_j = rng.uniform((n, 3), -1.0, 1.0)
        gt = CorrespondenceSet(np.stack([np.arange(n), np.arange(n)], axis=1), 0.1)
        predicted = np.stack([np.arange(n), rng.derive("m").integers(n, size=n)],
                             axis=1)
        # chance rate: expected fraction of random points within 0.1 of the
        # target; ball volume fraction ~ (4/3 pi 0.001)/8 ~ 5e-4, far below 0.1
        assert hit_ratio(predicted, gt, coords_j, 0.1) < 0.1

    def test_fmr_trivial_and_straddle(self):
        assert fmr([1.0, 1.0, 1.0]) == 1.0
        assert fmr([0.04, 0.06]) == pytest.approx(0.5)

    def test_fmr_matches_recount(self):
        rng = Rng(10)
        ratios = rng.uniform((100,))
        expected = sum(1 for r in ratios if r > 0.05) / 100
        assert fmr(ratios) == pytest.approx(expected)


class TestMiou:
    def test_perfect(self):
        labels = Rng(1).integers(4, size=50)
        assert miou(labels, labels, 4) == 1.0

    def test_disjoint_binary(self):
        labels = np.array([0, 0, 1, 1])
        preds = np.array([1, 1, 0, 0])
        assert miou(preds, labels, 2) == 0.0

    def test_hand_computed(self):
        labels = np.array([0, 0, 1, 1])
        preds = np.array([0, 1, 1, 1])
        assert miou(preds, labels, 2) == pytest.approx(7 / 12)

    def test_absent_classes_excluded(self):
        labels = np.array([0, 0, 1, 1])
        preds = np.array([0, 1, 1, 1])
        assert miou(preds, labels, 5) == pytest.approx(7 / 12)

    def test_relabeling_symmetry(self):
        rng = Rng(2)
        labels = rng.integers(3, size=60)
        preds = rng.derive("p").integers(3, size=60)
        perm = np.array([2, 0, 1])
        assert miou(preds, labels, 3) == pytest.approx(
            miou(perm[preds], perm[labels], 3))


class TestRandomGuessLevels:
    def test_deterministic(self):
        np.testing.assert_array_equal(random_guess_levels(16, Rng(4)),
                                      random_guess_levels(16, Rng(4)))

    def test_mean_near_half(self):
        levels = random_guess_levels(10 ** 5, Rng(5))
        assert abs(levels.mean() - 0.5) < 3 * np.sqrt(1 / 12 / 10 ** 5)

    def test_expected_ece_matches_closed_form(self):
        # flat accuracy a, uniform levels: ECE -> integral |a - (1-u)| du
        # = ((1-a)^2 + a^2) / 2
        a = 0.8
        rng = Rng(6)
        n = 10 ** 5
        levels = random_guess_levels(n, rng)
        correct = (rng.derive("y").uniform((n,)) < a).astype(float)
        bins = reliability_bins(levels, correct, 10)
        analytic = ((1 - a) ** 2 + a ** 2) / 2
        assert ece(bins) == pytest.approx(analytic, abs=0.02)
