import math

import numpy as np
import pytest
import torch

from cirrusseg import coverage_histogram, coverage_kl, dice, iou


class TestIoUDice:
    def test_perfect_match(self):
        mask = torch.tensor([1.0, 0.0, 1.0, 1.0])
        assert iou(mask, mask) == 1.0
        assert dice(mask, mask) == 1.0

    def test_disjoint_masks(self):
        pred = torch.tensor([1.0, 1.0, 0.0, 0.0])
        target = torch.tensor([0.0, 0.0, 1.0, 1.0])
        assert iou(pred, target) == 0.0
        assert dice(pred, target) == 0.0

    def test_hand_enumerated_four_pixel_case(self):
        pred = torch.tensor([1.0, 1.0, 0.0, 0.0])
        target = torch.tensor([1.0, 0.0, 1.0, 0.0])
        assert iou(pred, target) == pytest.approx(1 / 3)
        assert dice(pred, target) == pytest.approx(1 / 2)

    def test_empty_union_convention(self):
        empty = torch.zeros(8)
        assert iou(empty, empty) == 1.0
        assert dice(empty, empty) == 1.0

    def test_uncertain_target_band_excluded(self):
        # Pixels with target in (0.25, 0.5) count for neither mask.
        pred = torch.tensor([1.0, 1.0, 0.0])
        target = torch.tensor([1.0, 0.3, 0.9])
        # valid pixels: 0 (TP) and 2 (FN) -> IoU 1/2, Dice 2/3
        assert iou(pred, target) == pytest.approx(1 / 2)
        assert dice(pred, target) == pytest.approx(2 / 3)

    def test_bounds_and_dice_dominates_iou(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            pred = torch.from_numpy(rng.random(24))
            target = torch.from_numpy((rng.random(24) > 0.5).astype(np.float64))
            i = iou(pred, target)
            d = dice(pred, target)
            assert 0.0 <= i <= 1.0
            assert 0.0 <= d <= 1.0
            assert d >= i - 1e-12

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            iou(torch.zeros(4), torch.zeros(5))


class TestCoverageKL:
    def test_identical_sets_zero(self):
        masks = [torch.rand(8, 8) for _ in range(5)]
        binary = [(m > 0.5).float() for m in masks]
        assert coverage_kl(binary, binary) == pytest.approx(0.0, abs=1e-9)

    def test_empty_predictions_large_but_bounded(self):
        rng = np.random.default_rng(3)
        targets = [torch.from_numpy((rng.random((8, 8)) < p).astype(np.float32))
                   for p in (0.1, 0.5, 0.9, 0.7)]
        preds = [torch.zeros(8, 8) for _ in targets]
        value = coverage_kl(preds, targets, bins=10, eps=1e-6)
        assert value > 1.0
        assert value <= math.log(1.0 / 1e-6) + 1.0

    def test_hand_computed_three_image_example(self):
        # Coverages: predictions {0, 0.5, 1}, targets {0, 0, 1}; two bins.
        # Smoothed histograms: t = (2+e, 1+e)/(3+2e), p = (1+e, 2+e)/(3+2e);
        # KL(t || p) = (1/(3+2e)) * ln((2+e)/(1+e)) ~= (1/3) ln 2.
        def flat(frac):
            m = torch.zeros(10)
            m[:int(round(frac * 10))] = 1.0
            return m

        preds = [flat(0.0), flat(0.5), flat(1.0)]
        targets = [flat(0.0), flat(0.0), flat(1.0)]
        eps = 1e-6
        expected = (1.0 / (3 + 2 * eps)) * math.log((2 + eps) / (1 + eps))
        got = coverage_kl(preds, targets, bins=2, eps=eps)
        assert got == pytest.approx(expected, abs=1e-9)
        assert got == pytest.approx(math.log(2.0) / 3.0, abs=1e-5)

    def test_nonnegative_and_zero_iff_equal(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            preds = [torch.from_numpy((rng.random((6, 6)) < rng.random()).astype(np.float32))
                     for _ in range(6)]
            targets = [torch.from_numpy((rng.random((6, 6)) < rng.random()).astype(np.float32))
                       for _ in range(6)]
            value = coverage_kl(preds, targets)
            assert value >= -1e-12
        same = [torch.ones(4, 4) * (i % 2) for i in range(6)]
        assert coverage_kl(same, same) <= 1e-9

    def test_histogram_smoothing_normalizes(self):
        hist = coverage_histogram([0.0, 0.5, 1.0], bins=4)
        assert hist.sum() == pytest.approx(1.0)
        assert (hist > 0).all()

    def test_rejects_empty_or_mismatched_sets(self):
        with pytest.raises(ValueError):
            coverage_kl([], [])
        with pytest.raises(ValueError):
            coverage_kl([torch.zeros(2, 2)], [])
