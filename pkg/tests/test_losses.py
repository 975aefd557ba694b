import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from cirrusseg import (LossConfig, SegOutputs, focal_loss, quartile_bands,
                       rounded_focal_loss, super_majority_loss, total_loss)

from conftest import finite_difference_grad, max_relative_error


def closed_form_focal(x, t, gamma, alpha):
    p = 1.0 / (1.0 + math.exp(-x))
    pt = p if t == 1 else 1.0 - p
    return -alpha * (1.0 - pt) ** gamma * math.log(pt)


def make_outputs(logits_maps):
    return SegOutputs(attention_logits=logits_maps[:3], feature_logits=logits_maps[3:])


class TestFocalLoss:
    def test_gamma_zero_alpha_one_is_bce(self):
        torch.manual_seed(0)
        logits = torch.randn(100)
        targets = (torch.rand(100) > 0.5).float()
        got = focal_loss(logits, targets, gamma=0.0, alpha=1.0)
        ref = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
        assert (got - ref).abs().max().item() <= 1e-6

    def test_confident_positive_vanishes(self):
        loss = focal_loss(torch.tensor([50.0]), torch.tensor([1.0]))
        assert loss.item() < 1e-10

    def test_hand_evaluated_midpoint(self):
        # x = 0, t = 1, gamma = 2, alpha = 1: 0.25 * ln 2
        loss = focal_loss(torch.tensor([0.0]), torch.tensor([1.0]), gamma=2.0, alpha=1.0)
        assert loss.item() == pytest.approx(0.25 * math.log(2.0), abs=1e-7)

    def test_numerically_stable_at_extreme_logits(self):
        logits = torch.tensor([-1e4, 1e4])
        targets = torch.tensor([1.0, 0.0])
        loss = focal_loss(logits, targets)
        assert torch.isfinite(loss).all()


class TestSuperMajorityLoss:
    def test_boost_ratio_across_bands(self):
        x = torch.full((8,), -0.3)
        hi = super_majority_loss(x, torch.full((8,), 0.8))
        lo = super_majority_loss(x, torch.full((8,), 0.6))
        ratio = (hi / lo).unique()
        assert torch.allclose(ratio, torch.tensor(1.25))

    def test_ignore_band_zero_loss_and_gradient(self):
        x = torch.randn(16, requires_grad=True)
        loss = super_majority_loss(x, torch.full((16,), 0.3)).sum()
        assert loss.item() == 0.0
        loss.backward()
        assert torch.all(x.grad == 0)

    def test_confident_negative_vanishes(self):
        loss = super_majority_loss(torch.tensor([-40.0]), torch.tensor([0.0]))
        assert loss.item() < 1e-10

    def test_band_boundaries_literal(self):
        super_m, majority, ignored, negative = quartile_bands(
            torch.tensor([0.25, 0.5, 0.75]))
        assert negative.tolist() == [True, False, False]
        assert majority.tolist() == [False, True, False]
        assert super_m.tolist() == [False, False, True]
        assert ignored.tolist() == [False, False, False]

    def test_piecewise_exactness_on_random_pairs(self):
        rng = np.random.default_rng(42)
        x = rng.normal(0, 3, 1000)
        y = rng.uniform(0, 1, 1000)
        cfg = LossConfig()
        got = super_majority_loss(torch.tensor(x), torch.tensor(y), cfg).numpy()
        for xi, yi, gi in zip(x, y, got):
            if yi >= 0.75:
                expected = 1.25 * closed_form_focal(xi, 1, 2.0, 0.25)
            elif yi >= 0.5:
                expected = closed_form_focal(xi, 1, 2.0, 0.25)
            elif yi > 0.25:
                expected = 0.0
            else:
                expected = closed_form_focal(xi, 0, 2.0, 0.25)
            assert abs(gi - expected) <= 1e-7

    def test_rejects_out_of_range_consensus(self):
        with pytest.raises(ValueError):
            super_majority_loss(torch.zeros(3), torch.tensor([0.0, 0.5, 1.2]))

    def test_soft_target_flag_changes_positive_band(self):
        cfg = LossConfig(soft_targets=True)
        x = torch.tensor([0.4])
        hard = super_majority_loss(x, torch.tensor([0.6]))
        soft = super_majority_loss(x, torch.tensor([0.6]), cfg)
        assert not torch.allclose(hard, soft)


class TestTotalLoss:
    def test_identical_heads_scale_by_six(self):
        torch.manual_seed(1)
        logits = torch.randn(1, 1, 8, 8)
        y = torch.rand(1, 1, 8, 8)
        outputs = make_outputs([logits.clone() for _ in range(6)])
        total = total_loss(outputs, y)
        _, _, ignored, _ = quartile_bands(y)
        valid = (~ignored).float()
        single = (super_majority_loss(logits, y) * valid).sum() / valid.sum()
        assert total.item() == pytest.approx(6 * single.item(), rel=1e-6)

    def test_fully_ignored_target_warns_and_zeroes(self):
        outputs = make_outputs([torch.randn(1, 1, 4, 4) for _ in range(6)])
        y = torch.full((1, 1, 4, 4), 0.3)
        with pytest.warns(UserWarning, match="ignored"):
            assert total_loss(outputs, y).item() == 0.0

    def test_matches_per_head_recomputation(self):
        torch.manual_seed(2)
        maps = [torch.randn(2, 1, 6, 6) for _ in range(6)]
        y = torch.rand(2, 1, 6, 6)
        total = total_loss(make_outputs(maps), y)
        _, _, ignored, _ = quartile_bands(y)
        valid = (~ignored).float()
        expected = sum(
            (super_majority_loss(m, y) * valid).sum() / valid.sum() for m in maps)
        assert total.item() == pytest.approx(expected.item(), abs=1e-6)

    def test_wrong_head_count_rejected(self):
        outputs = SegOutputs(attention_logits=[torch.zeros(1, 1, 2, 2)],
                             feature_logits=[])
        with pytest.raises(ValueError):
            total_loss(outputs, torch.zeros(1, 1, 2, 2))

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(3)
        y = torch.rand(1, 1, 4, 4, dtype=torch.float64)
        base = [torch.randn(1, 1, 4, 4, dtype=torch.float64) for _ in range(6)]

        head0 = base[0].clone().requires_grad_(True)
        outputs = make_outputs([head0] + [m.clone() for m in base[1:]])
        total_loss(outputs, y).backward()

        eval_map = base[0].clone()

        def recompute():
            outs = make_outputs([eval_map] + [m.clone() for m in base[1:]])
            return total_loss(outs, y)

        fd = finite_difference_grad(recompute, eval_map)
        assert max_relative_error(head0.grad, fd) <= 1e-3


class TestRoundedFocalBaseline:
    def test_rounds_at_half(self):
        maps = [torch.zeros(1, 1, 2, 2) for _ in range(6)]
        y = torch.tensor([[[[0.49, 0.5], [0.3, 0.9]]]])
        loss = rounded_focal_loss(make_outputs(maps), y)
        hard = torch.tensor([[[[0.0, 1.0], [0.0, 1.0]]]])
        expected = 6 * focal_loss(maps[0], hard).mean()
        assert loss.item() == pytest.approx(expected.item(), rel=1e-6)
