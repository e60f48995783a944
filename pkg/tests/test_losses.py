"""Adversarial, voxel, and perceptual loss terms and their composition."""

import math

import numpy as np
import pytest
import torch

from voxtrans.errors import NaNLoss, ShapeMismatch
from voxtrans.features import standin_extractor
from voxtrans.losses import (
    LossWeights,
    adversarial_g_loss,
    bce_g_loss,
    bce_voxel_d_loss,
    generator_total_loss,
    perception_2p5d,
    relativistic_d_loss,
    voxel_l1,
)

TWO_LN_TWO = 2.0 * math.log(2.0)


def _const_logits(value, dims=(4, 4, 4), levels=2, batch=2):
    return [
        torch.full((batch, 1, *(d // 2**k for d in dims)), float(value))
        for k in range(levels)
    ]


def _rand_pyramid(seed, dims=(4, 4, 4), levels=2, batch=2):
    g = torch.Generator().manual_seed(seed)
    return [
        torch.rand((batch, 1, *(d // 2**k for d in dims)), generator=g)
        for k in range(levels)
    ]


class TestRelativisticLosses:
    def test_identical_constant_logits_hit_equilibrium(self):
        real, fake = _const_logits(1.7, levels=1), _const_logits(1.7, levels=1)
        assert float(relativistic_d_loss(real, fake)) == pytest.approx(
            TWO_LN_TWO, abs=1e-6
        )
        assert float(adversarial_g_loss(real, fake)) == pytest.approx(
            TWO_LN_TWO, abs=1e-6
        )

    def test_equilibrium_scales_with_level_count(self):
        real, fake = _const_logits(1.7, levels=2), _const_logits(1.7, levels=2)
        assert float(relativistic_d_loss(real, fake)) == pytest.approx(
            2.0 * TWO_LN_TWO, abs=1e-6
        )

    def test_wide_margins_saturate_to_zero(self):
        assert float(relativistic_d_loss(_const_logits(20), _const_logits(0))) < 1e-6
        assert float(adversarial_g_loss(_const_logits(0), _const_logits(20))) < 1e-6

    def test_role_swap_identity(self):
        real, fake = _rand_pyramid(1), _rand_pyramid(2)
        assert torch.equal(
            relativistic_d_loss(real, fake), adversarial_g_loss(fake, real)
        )

    def test_swapped_symmetric_logits_leave_loss_unchanged(self):
        real, fake = _const_logits(0.3), _const_logits(0.3)
        a = float(relativistic_d_loss(real, fake))
        b = float(relativistic_d_loss(fake, real))
        assert a == b

    def test_matches_scalar_loop_oracle(self):
        real, fake = _rand_pyramid(3, levels=1), _rand_pyramid(4, levels=1)
        r = real[0].numpy().ravel().astype(np.float64)
        f = fake[0].numpy().ravel().astype(np.float64)

        def softplus(x):
            return math.log1p(math.exp(-abs(x))) + max(x, 0.0)

        oracle = np.mean([softplus(-(x - f.mean())) for x in r]) + np.mean(
            [softplus(x - r.mean()) for x in f]
        )
        assert float(relativistic_d_loss(real, fake)) == pytest.approx(
            oracle, abs=1e-6
        )

    def test_duplicated_level_doubles_the_loss(self):
        real, fake = _rand_pyramid(5, levels=1), _rand_pyramid(6, levels=1)
        double_r, double_f = real * 2, fake * 2
        assert float(relativistic_d_loss(double_r, double_f)) == pytest.approx(
            2.0 * float(relativistic_d_loss(real, fake)), abs=1e-6
        )

    def test_nonnegative_on_random_inputs(self):
        for seed in range(5):
            real, fake = _rand_pyramid(seed), _rand_pyramid(seed + 50)
            assert float(relativistic_d_loss(real, fake)) >= 0.0
            assert float(adversarial_g_loss(real, fake)) >= 0.0

    def test_mismatched_pyramids_rejected(self):
        with pytest.raises(ShapeMismatch):
            relativistic_d_loss(_const_logits(0, levels=2), _const_logits(0, levels=1))

    def test_nan_logits_guarded(self):
        bad = _const_logits(0)
        bad[0][0, 0, 0, 0, 0] = float("nan")
        with pytest.raises(NaNLoss):
            relativistic_d_loss(bad, _const_logits(0))


class TestBceLosses:
    def test_zero_logits_hit_equilibrium(self):
        real = _const_logits(0, levels=1)
        fake = _const_logits(0, levels=1)
        assert float(bce_voxel_d_loss(real, fake)) == (
            pytest.approx(TWO_LN_TWO, abs=1e-6)
        )

    def test_confident_split_saturates(self):
        assert float(bce_voxel_d_loss(_const_logits(20), _const_logits(-20))) < 1e-6

    def test_matches_scalar_loop_oracle_on_2_cube(self):
        real = [torch.rand(1, 1, 2, 2, 2, generator=torch.Generator().manual_seed(7))]
        fake = [torch.rand(1, 1, 2, 2, 2, generator=torch.Generator().manual_seed(8))]
        r = real[0].numpy().ravel().astype(np.float64)
        f = fake[0].numpy().ravel().astype(np.float64)
        sigmoid = lambda x: 1.0 / (1.0 + math.exp(-x))
        oracle = np.mean([-math.log(sigmoid(x)) for x in r]) + np.mean(
            [-math.log(1.0 - sigmoid(x)) for x in f]
        )
        assert float(bce_voxel_d_loss(real, fake)) == pytest.approx(oracle, abs=1e-6)

    def test_generator_side_rewards_confident_fakes(self):
        assert float(bce_g_loss(_const_logits(20))) < 1e-6
        assert float(bce_g_loss(_const_logits(0, levels=1))) == pytest.approx(
            math.log(2.0), abs=1e-6
        )


class TestVoxelL1:
    def test_identity_is_zero(self):
        pyr = _rand_pyramid(9)
        total, per_level = voxel_l1(pyr, [p.clone() for p in pyr])
        assert float(total) == 0.0
        assert all(float(l) == 0.0 for l in per_level)

    def test_constant_offset(self):
        syn = _const_logits(0.5, levels=1)
        gt = _const_logits(0.0, levels=1)
        total, _ = voxel_l1(syn, gt)
        assert float(total) == pytest.approx(0.5, abs=1e-7)

    def test_matches_scalar_loop_oracle(self):
        syn, gt = _rand_pyramid(11, levels=1), _rand_pyramid(12, levels=1)
        a = syn[0].numpy().ravel().astype(np.float64)
        b = gt[0].numpy().ravel().astype(np.float64)
        oracle = np.mean([abs(x - y) for x, y in zip(a, b)])
        total, _ = voxel_l1(syn, gt)
        assert float(total) == pytest.approx(oracle, abs=1e-6)

    def test_multi_level_total_is_sum_of_levels(self):
        syn, gt = _rand_pyramid(13), _rand_pyramid(14)
        total, per_level = voxel_l1(syn, gt)
        assert float(total) == pytest.approx(
            float(np.sum([float(l) for l in per_level])), abs=1e-7
        )


class TestPerception:
    def test_identity_is_zero(self):
        fx = standin_extractor(seed=0)
        x = torch.rand(1, 1, 8, 8, 8, generator=torch.Generator().manual_seed(1))
        assert float(perception_2p5d(x, x.clone(), fx)) == 0.0

    def test_symmetric(self):
        fx = standin_extractor(seed=0)
        g = torch.Generator().manual_seed(2)
        a, b = torch.rand(1, 1, 8, 8, 8, generator=g), torch.rand(
            1, 1, 8, 8, 8, generator=g
        )
        assert float(perception_2p5d(a, b, fx)) == pytest.approx(
            float(perception_2p5d(b, a, fx)), abs=1e-7
        )

    def test_matches_slice_loop_oracle(self):
        fx = standin_extractor(seed=0)
        g = torch.Generator().manual_seed(3)
        a = torch.rand(1, 1, 8, 8, 8, generator=g)
        b = torch.rand(1, 1, 8, 8, 8, generator=g)
        loss = float(perception_2p5d(a, b, fx))

        def view_slices(x, axis):
            vol = x[0, 0]
            if axis == 0:
                return [vol[i][None] for i in range(vol.shape[0])]
            if axis == 1:
                return [vol[:, i][None] for i in range(vol.shape[1])]
            return [vol[:, :, i][None] for i in range(vol.shape[2])]

        oracle = 0.0
        with torch.no_grad():
            for axis in range(3):
                sa, sb = view_slices(a, axis), view_slices(b, axis)
                diffs = [
                    float((fx.features(x[None]) - fx.features(y[None])).abs().mean())
                    for x, y in zip(sa, sb)
                ]
                oracle += float(np.mean(diffs))
        assert loss == pytest.approx(oracle, abs=1e-5)


class TestGeneratorTotalLoss:
    def _setup(self, seed=0):
        syn, gt = _rand_pyramid(seed), _rand_pyramid(seed + 100)
        d_real, d_fake = _rand_pyramid(seed + 200), _rand_pyramid(seed + 300)
        fx = standin_extractor(seed=0)
        return syn, gt, d_real, d_fake, fx

    def test_identity_with_no_adversarial_term_is_zero(self):
        syn, _, _, _, fx = self._setup()
        total, report = generator_total_loss(
            syn, [p.clone() for p in syn], None, None, LossWeights(1, 1, 0), fx
        )
        assert float(total) == 0.0
        assert report.l_voxel == 0.0
        assert report.l_perception == 0.0

    def test_report_total_is_weighted_sum_of_parts(self):
        syn, gt, d_real, d_fake, fx = self._setup(7)
        weights = LossWeights(0.7, 0.2, 0.1)
        total, report = generator_total_loss(syn, gt, d_real, d_fake, weights, fx)
        recomposed = (
            weights.lambda1 * report.l_voxel
            + weights.lambda2 * report.l_perception
            + weights.lambda3 * report.l_adv
        )
        assert float(total) == pytest.approx(recomposed, abs=1e-6)
        assert report.l_g_total == pytest.approx(float(total), abs=1e-7)

    def test_all_parts_nonnegative(self):
        syn, gt, d_real, d_fake, fx = self._setup(21)
        _, report = generator_total_loss(
            syn, gt, d_real, d_fake, LossWeights(1, 1, 1e-4), fx
        )
        for value in (report.l_voxel, report.l_perception, report.l_adv):
            assert value >= 0.0

    def test_adversarial_variant_switch(self):
        syn, gt, d_real, d_fake, fx = self._setup(5)
        _, rel = generator_total_loss(
            syn, gt, d_real, d_fake, LossWeights(0, 0, 1), fx
        )
        _, bce = generator_total_loss(
            syn, gt, d_real, d_fake, LossWeights(0, 0, 1), fx, adversarial="bce"
        )
        assert rel.l_adv == pytest.approx(
            float(adversarial_g_loss(d_real, d_fake)), abs=1e-6
        )
        assert bce.l_adv == pytest.approx(float(bce_g_loss(d_fake)), abs=1e-6)

    def test_missing_discriminator_logits_need_zero_weight(self):
        syn, gt, _, _, fx = self._setup(9)
        with pytest.raises(ValueError):
            generator_total_loss(syn, gt, None, None, LossWeights(1, 1, 1e-4), fx)

    def test_voxel_gradient_matches_finite_difference(self):
        g = torch.Generator().manual_seed(17)
        syn = [torch.rand(1, 1, 6, 6, 6, generator=g, requires_grad=True)]
        gt = [torch.rand(1, 1, 6, 6, 6, generator=g)]
        fx = standin_extractor(seed=0)
        weights = LossWeights(1, 1, 0)

        total, _ = generator_total_loss(syn, gt, None, None, weights, fx)
        (grad,) = torch.autograd.grad(total, syn[0])

        torch.manual_seed(17)
        direction = torch.randn_like(syn[0])
        direction /= direction.norm()
        autodiff = float((grad * direction).sum())

        eps = 1e-3
        with torch.no_grad():
            plus, _ = generator_total_loss(
                [syn[0] + eps * direction], gt, None, None, weights, fx
            )
            minus, _ = generator_total_loss(
                [syn[0] - eps * direction], gt, None, None, weights, fx
            )
        numeric = (float(plus) - float(minus)) / (2 * eps)
        assert numeric == pytest.approx(autodiff, rel=1e-2, abs=1e-6)

    def test_nan_input_guarded(self):
        syn, gt, d_real, d_fake, fx = self._setup(3)
        syn[0] = syn[0].clone()
        syn[0][0, 0, 0, 0, 0] = float("nan")
        with pytest.raises(NaNLoss):
            generator_total_loss(syn, gt, d_real, d_fake, LossWeights(), fx)


class TestLossWeights:
    def test_defaults(self):
        w = LossWeights()
        assert (w.lambda1, w.lambda2, w.lambda3) == (1.0, 1.0, 0.0001)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda1=-1.0)
