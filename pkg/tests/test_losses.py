"""Tests for the loss zoo: cross-entropies, focal/balanced variants, smooth
L1, and restricted-KL distillation. Gradients are checked against central
differences throughout."""

import math

import numpy as np
import pytest

from owlab.losses import (
    BALANCED_MODES,
    ClassCounts,
    LossConfig,
    balanced_factor,
    balanced_loss,
    balanced_loss_grad,
    ce_binary,
    ce_binary_grad,
    ce_multiclass,
    ce_multiclass_grad,
    focal_softmax,
    focal_softmax_grad,
    inverse_frequency_alpha,
    kl_old_classes,
    kl_old_classes_grad,
    smooth_l1,
    smooth_l1_grad,
)
from owlab.numcore import finite_diff_grad, max_rel_err, softmax


def random_simplex(rng, k):
    return softmax(rng.normal(scale=1.5, size=k))


class TestClassCounts:
    def test_from_labels(self):
        counts = ClassCounts.from_labels([0, 0, 1, 2, 0])
        assert counts.total == 5
        assert counts.count(0) == 3
        assert counts.count(1) == 1
        assert counts.count(7) == 0

    def test_merged(self):
        a = ClassCounts.from_labels([0, 0, 1])
        b = ClassCounts.from_labels([1, 2])
        m = a.merged(b)
        assert m.total == 5
        assert m.per_class == {0: 2, 1: 2, 2: 1}
        # inputs untouched
        assert a.per_class == {0: 2, 1: 1}

    def test_validation(self):
        with pytest.raises(ValueError):
            ClassCounts(total=3, per_class={0: 1})
        with pytest.raises(ValueError):
            ClassCounts(total=-1, per_class={})
        with pytest.raises(ValueError):
            ClassCounts(total=0, per_class={0: -1, 1: 1})


class TestLossConfig:
    def test_defaults(self):
        cfg = LossConfig()
        assert cfg.gamma == 2.0
        assert cfg.alpha == 1.0
        assert cfg.balanced_mode == "fraction"

    def test_alpha_mapping(self):
        cfg = LossConfig(alpha={0: 0.25, 3: 2.0})
        assert cfg.alpha_for(0) == 0.25
        assert cfg.alpha_for(3) == 2.0
        assert cfg.alpha_for(5) == 1.0

    def test_validation(self):
        with pytest.raises(ValueError):
            LossConfig(gamma=-0.1)
        with pytest.raises(ValueError):
            LossConfig(alpha=0.0)
        with pytest.raises(ValueError):
            LossConfig(alpha={0: -1.0})
        with pytest.raises(ValueError):
            LossConfig(balanced_mode="nope")


class TestBalancedFactor:
    def test_fraction_oracle(self):
        counts = ClassCounts(total=10, per_class={0: 1, 1: 9})
        assert balanced_factor(counts, 0, "fraction") == pytest.approx(0.9)
        assert balanced_factor(counts, 1, "fraction") == pytest.approx(0.1)

    def test_unscaled_oracle(self):
        counts = ClassCounts(total=10, per_class={0: 1, 1: 9})
        assert balanced_factor(counts, 0, "unscaled") == pytest.approx(9.9)
        assert balanced_factor(counts, 1, "unscaled") == pytest.approx(9.1)

    def test_fraction_bounds_and_monotonicity(self):
        rng = np.random.default_rng(101)
        for _ in range(100):
            k = int(rng.integers(2, 8))
            cts = {c: int(rng.integers(1, 500)) for c in range(k)}
            counts = ClassCounts(total=sum(cts.values()), per_class=cts)
            factors = [balanced_factor(counts, c) for c in range(k)]
            assert all(0.0 <= f < 1.0 for f in factors)
            # rarer classes never get a smaller factor
            order = sorted(range(k), key=lambda c: cts[c])
            for a, b in zip(order, order[1:]):
                assert factors[a] >= factors[b]

    def test_absent_class_gets_full_weight(self):
        counts = ClassCounts(total=10, per_class={0: 10})
        assert balanced_factor(counts, 5) == 1.0

    def test_empty_stream_rejected(self):
        counts = ClassCounts(total=0, per_class={})
        with pytest.raises(ValueError):
            balanced_factor(counts, 0)

    def test_unknown_mode_rejected(self):
        counts = ClassCounts(total=1, per_class={0: 1})
        with pytest.raises(ValueError):
            balanced_factor(counts, 0, "quadratic")
        assert BALANCED_MODES == ("fraction", "unscaled")


class TestBinaryCe:
    def test_oracles(self):
        assert ce_binary(0.8, 1) == pytest.approx(0.2231435513142097, abs=1e-15)
        assert ce_binary(0.8, 0) == pytest.approx(1.6094379124341003, abs=1e-15)
        assert ce_binary(1.0, 1) == pytest.approx(0.0, abs=1e-10)

    def test_extreme_probabilities_stay_finite(self):
        assert math.isfinite(ce_binary(0.0, 1))
        assert math.isfinite(ce_binary(1.0, 0))

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            ce_binary(1.2, 1)
        with pytest.raises(ValueError):
            ce_binary(-0.1, 0)
        with pytest.raises(ValueError):
            ce_binary(0.5, 2)

    def test_grad_against_fd(self):
        rng = np.random.default_rng(102)
        for _ in range(100):
            p = float(rng.uniform(0.05, 0.95))
            y = int(rng.integers(0, 2))
            numeric = finite_diff_grad(
                lambda v: ce_binary(float(v[0]), y), np.array([p]))
            assert max_rel_err(np.array([ce_binary_grad(p, y)]), numeric) < 1e-6


class TestMulticlassCe:
    def test_oracle(self):
        assert ce_multiclass([0.1, 0.6, 0.3], 0) == pytest.approx(
            2.302585092994046, abs=1e-12)

    def test_zero_loss_at_certainty(self):
        assert ce_multiclass([0.0, 1.0, 0.0], 1) == pytest.approx(0.0, abs=1e-10)

    def test_simplex_validation(self):
        with pytest.raises(ValueError):
            ce_multiclass([0.5, 0.9], 0)
        with pytest.raises(ValueError):
            ce_multiclass([1.2, -0.2], 0)
        with pytest.raises(ValueError):
            ce_multiclass([0.5, 0.5], 3)

    def test_grad_against_fd(self):
        rng = np.random.default_rng(103)
        for _ in range(100):
            k = int(rng.integers(2, 9))
            p = random_simplex(rng, k)
            t = int(rng.integers(k))
            if p[t] < 0.02:
                continue  # 1/p curvature swamps central differences there
            analytic = ce_multiclass_grad(p, t)
            numeric = finite_diff_grad(lambda v: ce_multiclass(v, t), p)
            assert max_rel_err(analytic, numeric) < 1e-5
            # only the target coordinate matters
            assert np.count_nonzero(analytic) == 1


class TestFocal:
    def test_oracle(self):
        # p_t = 0.5, gamma = 2: 0.25 * ln 2
        val = focal_softmax([0.5, 0.5], 0)
        assert val == pytest.approx(0.17328679513998632, abs=1e-15)

    def test_gamma_zero_reduces_to_ce(self):
        rng = np.random.default_rng(104)
        cfg = LossConfig(gamma=0.0)
        for _ in range(50):
            p = random_simplex(rng, 5)
            t = int(rng.integers(5))
            assert focal_softmax(p, t, cfg) == pytest.approx(
                ce_multiclass(p, t), abs=1e-12)

    def test_down_weights_easy_examples(self):
        # relative to CE, confident correct predictions shrink much faster
        easy = focal_softmax([0.9, 0.1], 0) / ce_multiclass([0.9, 0.1], 0)
        hard = focal_softmax([0.2, 0.8], 0) / ce_multiclass([0.2, 0.8], 0)
        assert easy < hard < 1.0

    def test_alpha_scales_linearly(self):
        p = [0.3, 0.7]
        base = focal_softmax(p, 0, LossConfig(alpha=1.0))
        assert focal_softmax(p, 0, LossConfig(alpha=2.5)) == pytest.approx(
            2.5 * base, rel=1e-12)

    def test_grad_against_fd(self):
        rng = np.random.default_rng(105)
        cfg = LossConfig(gamma=2.0, alpha=0.75)
        for _ in range(100):
            k = int(rng.integers(2, 7))
            p = random_simplex(rng, k)
            t = int(rng.integers(k))
            analytic = focal_softmax_grad(p, t, cfg)
            numeric = finite_diff_grad(lambda v: focal_softmax(v, t, cfg), p)
            assert max_rel_err(analytic, numeric) < 1e-4

    def test_grad_gamma_one(self):
        # exercises the (1-p)^(gamma-1) branch at gamma = 1
        cfg = LossConfig(gamma=1.0)
        p = np.array([0.4, 0.6])
        numeric = finite_diff_grad(lambda v: focal_softmax(v, 0, cfg), p)
        assert max_rel_err(focal_softmax_grad(p, 0, cfg), numeric) < 1e-5


class TestBalancedLoss:
    def test_oracle(self):
        # factor 0.9 on the focal oracle
        counts = ClassCounts(total=10, per_class={0: 1, 1: 9})
        val = balanced_loss([0.5, 0.5], 0, counts)
        assert val == pytest.approx(0.1559581156259877, abs=1e-15)

    def test_is_factor_times_focal(self):
        rng = np.random.default_rng(106)
        cfg = LossConfig()
        for _ in range(50):
            k = int(rng.integers(2, 6))
            cts = {c: int(rng.integers(1, 100)) for c in range(k)}
            counts = ClassCounts(total=sum(cts.values()), per_class=cts)
            p = random_simplex(rng, k)
            t = int(rng.integers(k))
            expect = balanced_factor(counts, t) * focal_softmax(p, t, cfg)
            assert balanced_loss(p, t, counts, cfg) == pytest.approx(expect, rel=1e-12)

    def test_majority_class_discounted(self):
        counts = ClassCounts(total=1000, per_class={0: 990, 1: 10})
        p = [0.5, 0.5]
        assert balanced_loss(p, 0, counts) < balanced_loss(p, 1, counts)

    def test_empty_stream_rejected(self):
        counts = ClassCounts(total=0, per_class={})
        with pytest.raises(ValueError):
            balanced_loss([0.5, 0.5], 0, counts)

    def test_grad_against_fd(self):
        rng = np.random.default_rng(107)
        counts = ClassCounts(total=60, per_class={0: 50, 1: 7, 2: 3})
        for _ in range(60):
            p = random_simplex(rng, 3)
            t = int(rng.integers(3))
            analytic = balanced_loss_grad(p, t, counts)
            numeric = finite_diff_grad(lambda v: balanced_loss(v, t, counts), p)
            assert max_rel_err(analytic, numeric) < 1e-4


class TestInverseFrequencyAlpha:
    def test_uniform_stream_gets_unit_weights(self):
        counts = ClassCounts(total=30, per_class={0: 10, 1: 10, 2: 10})
        assert inverse_frequency_alpha(counts) == {0: 1.0, 1: 1.0, 2: 1.0}

    def test_minority_upweighted_and_clipped(self):
        counts = ClassCounts(total=1001, per_class={0: 1000, 1: 1})
        weights = inverse_frequency_alpha(counts)
        assert weights[0] == pytest.approx(0.5005)
        assert weights[1] == 5.0  # clipped from ~500

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            inverse_frequency_alpha(ClassCounts(total=0, per_class={}))


class TestSmoothL1:
    def test_oracles(self):
        assert smooth_l1([0.5], [0.0]) == pytest.approx(0.125, abs=1e-15)
        assert smooth_l1([2.0], [0.0]) == pytest.approx(1.5, abs=1e-15)
        assert smooth_l1([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_continuous_at_beta(self):
        below = smooth_l1([1.0 - 1e-9], [0.0])
        above = smooth_l1([1.0 + 1e-9], [0.0])
        assert abs(below - above) < 1e-8

    def test_quadratic_inside_linear_outside(self):
        rng = np.random.default_rng(108)
        for _ in range(100):
            d = float(rng.uniform(-4, 4))
            val = smooth_l1([d], [0.0])
            if abs(d) < 1.0:
                assert val == pytest.approx(0.5 * d * d, rel=1e-12)
            else:
                assert val == pytest.approx(abs(d) - 0.5, rel=1e-12)

    def test_beta_parameter(self):
        assert smooth_l1([0.5], [0.0], beta=2.0) == pytest.approx(0.0625)
        with pytest.raises(ValueError):
            smooth_l1([1.0], [0.0], beta=0.0)

    def test_grad_against_fd(self):
        rng = np.random.default_rng(109)
        for _ in range(100):
            pred = rng.uniform(-3, 3, size=4)
            target = rng.uniform(-3, 3, size=4)
            # keep away from the kink where FD straddles the regime switch
            if np.any(np.abs(np.abs(pred - target) - 1.0) < 1e-3):
                continue
            analytic = smooth_l1_grad(pred, target)
            numeric = finite_diff_grad(lambda v: smooth_l1(v, target), pred)
            assert max_rel_err(analytic, numeric) < 1e-5

    def test_grad_bounded_by_one(self):
        rng = np.random.default_rng(110)
        g = smooth_l1_grad(rng.uniform(-10, 10, size=50), np.zeros(50))
        assert np.all(np.abs(g) <= 1.0)


class TestKlOldClasses:
    def test_identical_distributions_give_zero(self):
        rng = np.random.default_rng(111)
        for _ in range(50):
            p = random_simplex(rng, 6)
            mask = np.array([True, True, True, False, False, False])
            assert kl_old_classes(p, p, mask) == pytest.approx(0.0, abs=1e-12)

    def test_full_mask_oracle(self):
        val = kl_old_classes([0.9, 0.1], [0.5, 0.5], [True, True])
        assert val == pytest.approx(0.3680642071684971, abs=1e-14)

    def test_renormalized_oracle(self):
        # teacher [0.6,0.2,0.2] -> [0.75,0.25]; student [0.3,0.3,0.4] -> [0.5,0.5]
        val = kl_old_classes([0.6, 0.2, 0.2], [0.3, 0.3, 0.4],
                             [True, True, False])
        assert val == pytest.approx(0.13081203594113697, abs=1e-14)

    def test_new_class_mass_is_ignored(self):
        mask = np.array([True, True, False])
        a = kl_old_classes([0.6, 0.2, 0.2], [0.3, 0.3, 0.4], mask)
        b = kl_old_classes([0.6, 0.2, 0.2], [0.06, 0.06, 0.88], mask)
        assert a == pytest.approx(b, abs=1e-12)

    def test_nonnegative(self):
        rng = np.random.default_rng(112)
        for _ in range(100):
            k = int(rng.integers(2, 8))
            mask = rng.random(k) < 0.6
            if not mask.any():
                mask[0] = True
            t = random_simplex(rng, k)
            s = random_simplex(rng, k)
            assert kl_old_classes(t, s, mask) >= -1e-12

    def test_grad_oracle(self):
        g = kl_old_classes_grad([0.6, 0.2, 0.2], [0.3, 0.3, 0.4],
                                [True, True, False])
        np.testing.assert_allclose(
            g, [-0.8333333333333333, 0.8333333333333334, 0.0], atol=1e-12)

    def test_grad_zero_on_new_classes(self):
        rng = np.random.default_rng(113)
        mask = np.array([True, False, True, False, False])
        t = random_simplex(rng, 5)
        s = random_simplex(rng, 5)
        g = kl_old_classes_grad(t, s, mask)
        assert np.all(g[~mask] == 0.0)

    def test_grad_against_fd(self):
        rng = np.random.default_rng(114)
        for _ in range(60):
            k = int(rng.integers(2, 7))
            mask = rng.random(k) < 0.6
            if not mask.any():
                mask[int(rng.integers(k))] = True
            t = random_simplex(rng, k)
            s = random_simplex(rng, k)
            analytic = kl_old_classes_grad(t, s, mask)
            numeric = finite_diff_grad(lambda v: kl_old_classes(t, v, mask), s)
            assert max_rel_err(analytic, numeric) < 1e-4

    def test_tiny_negative_drift_tolerated(self):
        val = kl_old_classes([0.7, 0.3, 0.0], [0.5, 0.5, -1e-10],
                             [True, True, True])
        assert math.isfinite(val)

    def test_errors(self):
        with pytest.raises(ValueError):
            kl_old_classes([0.5, 0.5], [0.5, 0.5], [False, False])
        with pytest.raises(ValueError):
            kl_old_classes([0.0, 0.0, 1.0], [0.5, 0.2, 0.3],
                           [True, True, False])
        with pytest.raises(ValueError):
            kl_old_classes([0.5, 0.5], [0.3, 0.3, 0.4], [True, True, False])
