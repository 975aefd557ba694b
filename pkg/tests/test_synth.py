import math

import numpy as np
import pytest

from cirrusseg import (AnnotatorSpec, CirrusParams, IDENTITY_TRANSFORM,
                       apply_transform, augment, generate_cirrus_sample,
                       invert_transform, iou, sample_transform,
                       simulate_consensus)


def flat_annotators(thresholds, weights):
    return tuple(AnnotatorSpec(threshold=t, jitter_scale=0.0, weight=w)
                 for t, w in zip(thresholds, weights))


class TestGeneration:
    def test_absent_cirrus_gives_empty_truth(self):
        params = CirrusParams(size=64, cirrus_present=False)
        sample = generate_cirrus_sample(5, params=params)
        assert not sample.has_cirrus
        assert np.all(sample.intensity == 0)
        assert np.all(sample.consensus == 0)
        assert np.isfinite(sample.image).all()

    def test_same_seed_bit_identical(self):
        a = generate_cirrus_sample(17, size=64)
        b = generate_cirrus_sample(17, size=64)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.intensity, b.intensity)
        assert np.array_equal(a.consensus, b.consensus)
        assert a.has_cirrus == b.has_cirrus

    def test_prevalence_matches_configuration(self):
        n = 200
        flags = [generate_cirrus_sample(i, size=64).has_cirrus for i in range(n)]
        frac = np.mean(flags)
        sigma = math.sqrt(0.25 * 0.75 / n)
        assert abs(frac - 0.25) <= 3 * sigma

    def test_intensity_in_unit_interval(self):
        sample = generate_cirrus_sample(3, params=CirrusParams(size=64, cirrus_present=True))
        assert sample.intensity.min() >= 0.0
        assert sample.intensity.max() <= 1.0
        assert sample.has_cirrus

    def test_rejects_tiny_size(self):
        with pytest.raises(ValueError):
            generate_cirrus_sample(0, size=32)

    def test_coverage_statistic_near_target(self):
        params = CirrusParams(size=128, cirrus_present=True)
        covs = [(generate_cirrus_sample(1000 + i, params=params).consensus >= 0.5).mean()
                for i in range(200)]
        assert abs(np.mean(covs) - params.coverage) <= 0.1


class TestConsensus:
    def test_full_intensity_always_detected(self):
        intensity = np.ones((16, 16))
        consensus = simulate_consensus(intensity, rng=np.random.default_rng(1))
        assert np.all(consensus == 1.0)

    def test_three_of_four_equal_weights(self):
        annotators = flat_annotators([0.2, 0.3, 0.4, 0.9], [1, 1, 1, 1])
        consensus = simulate_consensus(np.full((4, 4), 0.5), annotators)
        assert np.allclose(consensus, 0.75)

    def test_expert_weighting(self):
        # Experts (weight 2) detect, non-experts (weight 1) do not: 4/6.
        annotators = flat_annotators([0.3, 0.3, 0.9, 0.9], [2, 2, 1, 1])
        consensus = simulate_consensus(np.full((4, 4), 0.5), annotators)
        assert np.allclose(consensus, 4.0 / 6.0)

    def test_equal_weight_value_lattice(self):
        sample = generate_cirrus_sample(9, params=CirrusParams(
            size=64, cirrus_present=True,
            annotators=flat_annotators([0.4, 0.45, 0.55, 0.6], [1, 1, 1, 1])))
        values = np.unique(sample.consensus)
        lattice = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
        assert all(np.isclose(lattice, v).any() for v in values)

    def test_rejects_empty_annotators_and_bad_intensity(self):
        with pytest.raises(ValueError):
            simulate_consensus(np.zeros((4, 4)), annotators=())
        with pytest.raises(ValueError):
            simulate_consensus(np.full((4, 4), 1.5))

    def test_annotator_spec_validation(self):
        with pytest.raises(ValueError):
            AnnotatorSpec(threshold=1.0, jitter_scale=1.0, weight=1.0)
        with pytest.raises(ValueError):
            AnnotatorSpec(threshold=0.5, jitter_scale=1.0, weight=0.0)


class TestAugment:
    def test_identity_transform_no_noise_is_identity(self):
        rng = np.random.default_rng(0)
        image = rng.random((32, 32)).astype(np.float32)
        mask = (rng.random((32, 32)) > 0.5).astype(np.float32)
        out_img, out_mask = augment(image, mask, rng, transform=IDENTITY_TRANSFORM,
                                    add_noise=False)
        assert np.array_equal(out_img, image)
        assert np.array_equal(out_mask, mask)

    def test_flip_rotation_preserve_positive_count(self):
        rng = np.random.default_rng(1)
        mask = (rng.random((24, 24)) > 0.7).astype(np.float32)
        for k in range(4):
            for fh in (False, True):
                for fv in (False, True):
                    t = {"flip_h": fh, "flip_v": fv, "rot90": k, "shift": (0, 0)}
                    out = apply_transform(mask, t)
                    assert out.sum() == mask.sum()

    def test_label_consistency_under_back_transform(self):
        rng = np.random.default_rng(2)
        mask = (rng.random((20, 20)) > 0.6).astype(np.float32)
        for seed in range(20):
            t = sample_transform(np.random.default_rng(seed), max_shift=0)
            restored = invert_transform(apply_transform(mask, t), t)
            assert iou(restored, mask) == 1.0

    def test_noise_variance_matches_specification(self):
        rng = np.random.default_rng(3)
        image = np.zeros((1000, 1000), dtype=np.float32)
        mask = np.zeros_like(image)
        noisy, _ = augment(image, mask, rng, noise_var=0.1,
                           transform=IDENTITY_TRANSFORM)
        measured = float(np.var(noisy - image))
        assert abs(measured - 0.1) <= 0.005

    def test_translation_uses_reflect_padding(self):
        image = np.arange(16, dtype=np.float32).reshape(4, 4)
        t = {"flip_h": False, "flip_v": False, "rot90": 0, "shift": (1, 0)}
        out = apply_transform(image, t)
        assert np.array_equal(out[1:], image[:-1])   # content shifted down one row
        assert np.array_equal(out[0], image[1])      # reflected row fills the gap

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            augment(np.zeros((4, 4)), np.zeros((5, 5)), rng)
