"""Closed-form loss values and gradient checks.

The hand-computed constants follow the loss definitions directly: a single
pixel with p=0.5 under the focal weighting gives alpha * 0.25 * ln 2; dice on
an all-ones prediction over a 2x2 frame with two true pixels and no smoothing
is 1 - 4/6; the combined objective is 20*focal + 1*dice.
"""

import numpy as np
import pytest

from liveseg import autodiff as ad
from liveseg.autodiff import DimensionError, Tensor, finite_diff_grad
from liveseg.losses import (ClassLossConfig, SegLossConfig, class_loss, dice_loss,
                            focal_loss, seg_loss)

LN2 = np.log(2.0)


def fd_check(f, x_data, tol=1e-4, seed_cases=1):
    x = Tensor(np.asarray(x_data, np.float64), requires_grad=True)
    loss = f(x)
    ad.backward(loss)
    fd = finite_diff_grad(lambda t: f(t).item(), Tensor(x.data), 1e-3)
    rel = np.abs(x.grad - fd) / np.maximum(np.abs(fd), 1e-6)
    assert rel.max() < tol


class TestFocal:
    def test_perfect_prediction_vanishes(self):
        target = np.array([[1, 0], [0, 1]])
        logits = Tensor(np.where(target, 40.0, -40.0))
        assert focal_loss(logits, target).item() < 1e-12

    def test_single_pixel_half_probability(self):
        # p_t=0.5, gamma=2, alpha=0.25 -> 0.25 * 0.25 * ln 2
        val = focal_loss(Tensor(np.zeros((1, 1))), np.ones((1, 1))).item()
        assert val == pytest.approx(0.25 * 0.25 * LN2, abs=1e-9)

    def test_gamma_zero_is_weighted_bce(self):
        cfg = SegLossConfig(focal_gamma=0.0, focal_alpha=0.5)
        val = focal_loss(Tensor(np.zeros((1, 1))), np.ones((1, 1)), cfg).item()
        assert val == pytest.approx(0.5 * LN2, abs=1e-9)

    def test_gamma_zero_matches_bce_on_random_inputs(self):
        rng = np.random.default_rng(0)
        cfg = SegLossConfig(focal_gamma=0.0, focal_alpha=0.25)
        for _ in range(10):
            logits = rng.uniform(-3, 3, (5, 5))
            target = rng.random((5, 5)) > 0.5
            p = 1 / (1 + np.exp(-logits))
            alpha_t = np.where(target, 0.25, 0.75)
            bce = -(alpha_t * np.where(target, np.log(p), np.log(1 - p))).mean()
            got = focal_loss(Tensor(logits), target, cfg).item()
            assert got == pytest.approx(bce, abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            focal_loss(Tensor(np.zeros((2, 2))), np.zeros((3, 3)))

    def test_non_binary_target(self):
        with pytest.raises(ValueError, match="binary"):
            focal_loss(Tensor(np.zeros((2, 2))), np.full((2, 2), 0.5))


class TestDice:
    def test_perfect_hard_prediction_near_zero(self):
        target = np.zeros((20, 20), dtype=bool)
        target[3:15, 4:16] = True  # 144 foreground pixels
        loss = dice_loss(Tensor(target.astype(float)), target).item()
        assert loss < 1e-3

    def test_all_ones_on_two_true_pixels(self):
        cfg = SegLossConfig(dice_eps=1e-12)  # effectively eps=0
        target = np.array([[1, 0], [1, 0]])
        val = dice_loss(Tensor(np.ones((2, 2))), target, cfg).item()
        assert val == pytest.approx(1.0 - 4.0 / 6.0, abs=1e-9)

    def test_all_zero_prediction_nonempty_target(self):
        target = np.zeros((3, 3), dtype=bool)
        target[0, :2] = True
        val = dice_loss(Tensor(np.zeros((3, 3))), target).item()
        assert val == pytest.approx(1.0 - 1.0 / (2.0 + 1.0), abs=1e-9)

    def test_range_and_monotonicity(self):
        rng = np.random.default_rng(1)
        target = rng.random((6, 6)) > 0.5
        probs = rng.random((6, 6))
        base = dice_loss(Tensor(probs), target).item()
        assert 0.0 <= base <= 1.0
        # moving any single pixel toward its label can only lower the loss
        for (r, c) in [(0, 0), (2, 3), (5, 5)]:
            toward = probs.copy()
            toward[r, c] = 1.0 if target[r, c] else 0.0
            assert dice_loss(Tensor(toward), target).item() <= base + 1e-12

    def test_probability_domain_enforced(self):
        with pytest.raises(ValueError):
            dice_loss(Tensor(np.full((2, 2), 1.5)), np.ones((2, 2)))


class TestSegLoss:
    def test_composition_equals_weighted_parts(self):
        rng = np.random.default_rng(2)
        logits = rng.uniform(-2, 2, (7, 7))
        target = rng.random((7, 7)) > 0.4
        cfg = SegLossConfig()
        combined = seg_loss(Tensor(logits), target, cfg).item()
        f = focal_loss(Tensor(logits), target, cfg).item()
        d = dice_loss(ad.sigmoid(Tensor(logits)), target, cfg).item()
        assert combined == pytest.approx(20.0 * f + 1.0 * d, rel=1e-10)

    def test_perfect_prediction_small(self):
        target = np.zeros((16, 16), dtype=bool)
        target[2:14, 2:14] = True
        logits = Tensor(np.where(target, 40.0, -40.0))
        assert seg_loss(logits, target).item() < 1e-2  # dice eps slack only

    def test_gradcheck(self):
        rng = np.random.default_rng(3)
        for seed in range(20):
            target = rng.random((4, 5)) > 0.5
            fd_check(lambda t: seg_loss(t, target), rng.uniform(-2, 2, (4, 5)))

    def test_focal_dice_gradchecks(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            target = rng.random((3, 4)) > 0.5
            fd_check(lambda t: focal_loss(t, target), rng.uniform(-2, 2, (3, 4)))
            fd_check(lambda t: dice_loss(ad.sigmoid(t), target),
                     rng.uniform(-2, 2, (3, 4)))


class TestClassLoss:
    def test_uniform_logits_closed_form(self):
        val = class_loss(Tensor(np.zeros(3)), 0, []).item()
        assert val == pytest.approx(np.log(3.0) + 0.1 * 10.0, abs=1e-9)

    def test_margin_inactive_when_separated(self):
        logits = np.zeros(4)
        logits[1] = 12.0
        val = class_loss(Tensor(logits), 1, []).item()
        ce = -np.log(np.exp(12.0) / (np.exp(12.0) + 3.0))
        assert val == pytest.approx(ce, abs=1e-9)

    def test_margin_partial(self):
        logits = np.zeros(4)
        logits[2] = 4.0  # s_y - s_max = 4, m=10 -> 0.1 * 6
        val = class_loss(Tensor(logits), 2, []).item()
        ce = -np.log(np.exp(4.0) / (np.exp(4.0) + 3.0))
        assert val == pytest.approx(ce + 0.6, abs=1e-9)

    def test_margin_zero_iff_separation_met(self):
        for gap in (9.999, 10.0, 10.001, 15.0, 0.0, -3.0):
            logits = np.zeros(3)
            logits[0] = gap
            cfg = ClassLossConfig(w_l2=0.0)
            got = class_loss(Tensor(logits), 0, [], cfg).item()
            z = logits - logits.max()
            ce = -np.log(np.exp(z[0]) / np.exp(z).sum())
            margin = 0.1 * max(0.0, 10.0 - gap)
            assert got == pytest.approx(ce + margin, abs=1e-9)
            assert (margin == 0.0) == (gap >= 10.0)

    def test_l2_term(self):
        delta = [Tensor(np.full((2, 2), 2.0)), Tensor(np.ones(3))]
        cfg = ClassLossConfig(w_l2=0.5)
        with_l2 = class_loss(Tensor(np.zeros(2)), 0, delta, cfg).item()
        without = class_loss(Tensor(np.zeros(2)), 0, [], cfg).item()
        assert with_l2 - without == pytest.approx(0.5 * (16.0 + 3.0), abs=1e-9)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            class_loss(Tensor(np.zeros(3)), 3, [])
        with pytest.raises(ValueError):
            class_loss(Tensor(np.zeros(3)), -1, [])

    def test_gradcheck(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            label = int(rng.integers(0, 5))
            x = rng.uniform(-2, 2, 5)
            if abs((10.0 - (x[label] - np.max(np.delete(x, label))))) < 0.05:
                continue  # keep clear of the hinge kink where FD is one-sided
            fd_check(lambda t: class_loss(t, label, []), x)
