import math

import numpy as np
import pytest
import torch

from adverseg.losses import (HyperParams, build_self_taught_target, loss_adv,
                             loss_ce, loss_discriminator, loss_semi,
                             loss_seg_total, masked_self_taught_ce,
                             one_hot_targets)
from adverseg.maps import IGNORE, InvalidThresholdError, one_hot_encode

LN2 = math.log(2.0)


def conf_map(values):
    """(H, W) nested list -> (1, 1, H, W) tensor."""
    return torch.tensor(values, dtype=torch.float64).unsqueeze(0).unsqueeze(0)


class TestLossDiscriminator:
    def test_perfect_real_score(self):
        out = loss_discriminator(conf_map([[1.0, 1.0], [1.0, 1.0]]), True)
        assert out.item() == 0.0
        assert out.contributing_pixels == 4

    def test_half_confidence_is_ln2(self):
        out = loss_discriminator(conf_map([[0.5, 0.5], [0.5, 0.5]]), True)
        assert abs(out.item() - LN2) < 1e-12

    def test_fake_target_oracle(self):
        # -ln(1 - 0.1) evaluated independently with math.log
        out = loss_discriminator(conf_map([[0.1]]), False)
        assert abs(out.item() - (-math.log(0.9))) < 1e-12
        assert abs(out.item() - 0.10536051565782628) < 1e-9

    def test_both_targets_at_half_equal_ln2(self):
        conf = conf_map([[0.5, 0.5]])
        real = loss_discriminator(conf, True)
        fake = loss_discriminator(conf, False)
        assert abs(real.item() - LN2) < 1e-12
        assert abs(fake.item() - LN2) < 1e-12

    def test_ignore_mask_drops_pixels(self):
        conf = conf_map([[0.5, 1.0]])
        ignore = torch.tensor([[[[False, True]]]])
        out = loss_discriminator(conf, True, ignore=ignore)
        assert abs(out.item() - LN2) < 1e-12
        assert out.contributing_pixels == 1

    def test_all_ignored(self):
        conf = conf_map([[0.5]])
        out = loss_discriminator(conf, True, ignore=torch.ones(1, 1, 1, 1).bool())
        assert out.item() == 0.0
        assert out.contributing_pixels == 0

    def test_clamp_keeps_loss_finite(self):
        out = loss_discriminator(conf_map([[0.0]]), True)
        assert math.isfinite(out.item())


class TestLossCE:
    def test_exact_match_is_zero(self):
        target = torch.zeros(1, 3, 2, 2, dtype=torch.float64)
        target[0, 1] = 1.0
        assert loss_ce(target.clone(), target).item() == 0.0

    def test_quarter_probability_oracle(self):
        prob = torch.tensor([[[[0.25]], [[0.75]]]], dtype=torch.float64)
        target = torch.tensor([[[[1.0]], [[0.0]]]], dtype=torch.float64)
        out = loss_ce(prob, target)
        assert abs(out.item() - math.log(4.0)) < 1e-12
        assert abs(out.item() - 1.3862943611198906) < 1e-12

    def test_all_ignored_gives_zero(self):
        prob = torch.full((1, 3, 2, 2), 1 / 3, dtype=torch.float64)
        target = torch.zeros(1, 3, 2, 2, dtype=torch.float64)
        out = loss_ce(prob, target)
        assert out.item() == 0.0
        assert out.contributing_pixels == 0

    def test_mean_over_contributing_pixels_only(self):
        prob = torch.full((1, 2, 1, 2), 0.5, dtype=torch.float64)
        target = torch.zeros(1, 2, 1, 2, dtype=torch.float64)
        target[0, 0, 0, 0] = 1.0  # second pixel ignored
        out = loss_ce(prob, target)
        assert abs(out.item() - LN2) < 1e-12
        assert out.contributing_pixels == 1

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            loss_ce(torch.zeros(1, 3, 2, 2), torch.zeros(1, 3, 2, 3))


class TestLossAdv:
    def test_fully_fooled_is_zero(self):
        assert loss_adv(conf_map([[1.0, 1.0]])).item() == 0.0

    def test_half_is_ln2(self):
        for shape in [(1, 1), (3, 5)]:
            conf = torch.full((1, 1, *shape), 0.5, dtype=torch.float64)
            assert abs(loss_adv(conf).item() - LN2) < 1e-12

    def test_two_pixel_oracle(self):
        out = loss_adv(conf_map([[0.25, 1.0]]))
        expected = (-math.log(0.25) - math.log(1.0)) / 2.0
        assert abs(out.item() - expected) < 1e-12
        assert abs(out.item() - 0.6931471805599453) < 1e-12


class TestSelfTaughtTarget:
    def test_argmax_one_hot(self):
        prob = torch.tensor([[[[0.9]], [[0.1]]]])
        torch.testing.assert_close(build_self_taught_target(prob),
                                   torch.tensor([[[[1.0]], [[0.0]]]]))

    def test_tie_breaks_to_smallest_class(self):
        prob = torch.tensor([[[[0.5]], [[0.5]]]])
        torch.testing.assert_close(build_self_taught_target(prob),
                                   torch.tensor([[[[1.0]], [[0.0]]]]))

    def test_no_gradient_flows(self):
        prob = torch.rand(1, 3, 4, 4, dtype=torch.float64, requires_grad=True)
        target = build_self_taught_target(torch.softmax(prob, dim=1))
        assert not target.requires_grad

    def test_composition_with_ce(self):
        # ce(prob, self_taught(prob)) equals the mean of -log(max_c prob).
        torch.manual_seed(0)
        prob = torch.softmax(torch.randn(1, 4, 5, 5, dtype=torch.float64), dim=1)
        out = loss_ce(prob, build_self_taught_target(prob))
        expected = float((-torch.log(prob.max(dim=1).values)).mean())
        assert abs(out.item() - expected) < 1e-12


class TestLossSemi:
    def test_threshold_one_empty_mask(self):
        prob = torch.softmax(torch.randn(1, 3, 2, 2, dtype=torch.float64), dim=1)
        conf = torch.full((1, 1, 2, 2), 0.999, dtype=torch.float64)
        out = loss_semi(prob, conf, 1.0)
        assert out.item() == 0.0
        assert out.contributing_pixels == 0

    def test_masked_oracle(self):
        # conf selects pixels (0,0) and (1,0) at threshold 0.2; their argmax
        # probabilities are 0.8 and 0.5 (tie at the second pixel).
        conf = conf_map([[0.3, 0.1], [0.25, 0.05]])
        prob = torch.tensor([
            [[[0.8, 0.6], [0.5, 0.3]],
             [[0.2, 0.4], [0.5, 0.7]]]
        ], dtype=torch.float64)
        out = loss_semi(prob, conf, 0.2)
        expected = (-math.log(0.8) - math.log(0.5)) / 2.0
        assert abs(out.item() - expected) < 1e-12
        assert abs(out.item() - 0.45814536593707753) < 1e-9
        assert out.contributing_pixels == 2

    def test_one_hot_prediction_gives_zero(self):
        prob = torch.zeros(1, 3, 2, 2, dtype=torch.float64)
        prob[0, 2] = 1.0
        conf = torch.full((1, 1, 2, 2), 0.9, dtype=torch.float64)
        assert loss_semi(prob, conf, 0.2).item() == 0.0

    def test_invalid_threshold(self):
        prob = torch.full((1, 2, 1, 1), 0.5)
        conf = torch.full((1, 1, 1, 1), 0.5)
        with pytest.raises(InvalidThresholdError):
            loss_semi(prob, conf, 1.5)

    def test_contributing_pixels_monotone_in_threshold(self):
        rng = torch.Generator().manual_seed(5)
        for _ in range(10):
            prob = torch.softmax(torch.randn(1, 3, 6, 6, generator=rng,
                                             dtype=torch.float64), dim=1)
            conf = torch.rand(1, 1, 6, 6, generator=rng, dtype=torch.float64)
            counts = [loss_semi(prob, conf, t).contributing_pixels
                      for t in (0.0, 0.25, 0.5, 0.75, 1.0)]
            assert all(a >= b for a, b in zip(counts, counts[1:]))

    def test_frozen_constants_match_recomputed_bitwise(self):
        # Gradients must be identical whether mask and target are produced
        # inside loss_semi or precomputed and held fixed.
        rng = torch.Generator().manual_seed(7)
        for _ in range(10):
            logits = torch.randn(1, 3, 4, 4, generator=rng, dtype=torch.float64,
                                 requires_grad=True)
            conf = torch.rand(1, 1, 4, 4, generator=rng, dtype=torch.float64)

            prob = torch.softmax(logits, dim=1)
            out = loss_semi(prob, conf, 0.5)
            grad_recomputed = torch.autograd.grad(out.value, logits)[0] \
                if out.value.requires_grad else torch.zeros_like(logits)

            prob2 = torch.softmax(logits, dim=1)
            with torch.no_grad():
                mask = (conf > 0.5).to(prob2.dtype)
                target = build_self_taught_target(prob2)
            out2 = masked_self_taught_ce(prob2, mask, target)
            grad_frozen = torch.autograd.grad(out2.value, logits)[0] \
                if out2.value.requires_grad else torch.zeros_like(logits)

            torch.testing.assert_close(grad_recomputed, grad_frozen,
                                       rtol=0, atol=0)


class TestLossSegTotal:
    def _lv(self, value, n=4):
        from adverseg.losses import LossValue
        return LossValue(torch.tensor(float(value), dtype=torch.float64), n)

    def test_labeled_composite_with_defaults(self):
        hp = HyperParams()  # lambda_adv_labeled = 0.01
        out = loss_seg_total(self._lv(1.0), self._lv(0.5), None, hp, labeled=True)
        assert abs(out.item() - 1.005) < 1e-12

    def test_unlabeled_composite_with_defaults(self):
        hp = HyperParams()  # lambda_adv_unlabeled = 0.001, lambda_semi = 0.1
        out = loss_seg_total(None, self._lv(0.5), self._lv(2.0), hp, labeled=False)
        assert abs(out.item() - 0.2005) < 1e-12

    def test_zero_lambdas_reduce_to_ce(self):
        hp = HyperParams(lambda_adv_labeled=0.0, lambda_adv_unlabeled=0.0,
                         lambda_semi=0.0)
        ce = self._lv(0.7313)
        out = loss_seg_total(ce, self._lv(0.9), None, hp, labeled=True)
        assert out.item() == ce.item()

    def test_affine_in_lambda_semi(self):
        semi = self._lv(1.7)
        adv = self._lv(0.3)
        base = loss_seg_total(None, adv, semi,
                              HyperParams(lambda_semi=0.0), labeled=False).item()
        one = loss_seg_total(None, adv, semi,
                             HyperParams(lambda_semi=0.1), labeled=False).item()
        two = loss_seg_total(None, adv, semi,
                             HyperParams(lambda_semi=0.2), labeled=False).item()
        assert abs((two - base) - 2.0 * (one - base)) < 1e-12

    def test_invalid_combinations(self):
        hp = HyperParams()
        with pytest.raises(ValueError):
            loss_seg_total(None, self._lv(0.5), None, hp, labeled=True)
        with pytest.raises(ValueError):
            loss_seg_total(self._lv(1.0), None, self._lv(1.0), hp, labeled=True)
        with pytest.raises(ValueError):
            loss_seg_total(self._lv(1.0), None, None, hp, labeled=False)


class TestOneHotTargets:
    def test_matches_numpy_encoder(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 3, size=(2, 4, 4))
        labels[0, 0, 0] = IGNORE
        batched = one_hot_targets(torch.from_numpy(labels), 3).numpy()
        for i in range(2):
            single = one_hot_encode(labels[i], 3)  # (H, W, C)
            np.testing.assert_array_equal(batched[i], single.transpose(2, 0, 1))

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            one_hot_targets(torch.tensor([[[5]]]), 3)
