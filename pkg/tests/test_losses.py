"""Loss terms, composites, feature extractor, and their gradients."""

import math

import numpy as np
import pytest
import torch

from srres.losses import (
    DomainLossTerms,
    FeatureExtractor,
    LossWeights,
    SRLossTerms,
    color_loss,
    domain_composite_loss,
    gaussian_highpass,
    gaussian_lowpass,
    l1_loss,
    perceptual_loss,
    ragan_discriminator_loss,
    ragan_generator_loss,
    sr_composite_loss,
    tv_loss,
)


def rand(shape, seed, lo=0.0, hi=1.0):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(shape, generator=gen, dtype=torch.float64) * (hi - lo) + lo


class TestL1Loss:
    def test_identical_zero(self):
        a = rand((2, 3, 6, 6), 0)
        assert float(l1_loss(a, a)) == 0.0

    def test_constant_offset(self):
        a = torch.full((2, 3, 4, 4), 0.2, dtype=torch.float64)
        b = torch.full((2, 3, 4, 4), 0.5, dtype=torch.float64)
        assert float(l1_loss(a, b)) == pytest.approx(0.3, abs=1e-12)

    def test_symmetry(self):
        a, b = rand((1, 3, 5, 5), 1), rand((1, 3, 5, 5), 2)
        assert float(l1_loss(a, b)) == float(l1_loss(b, a))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            l1_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 5, 5))


class TestTvLoss:
    def test_identical_zero(self):
        a = rand((1, 3, 6, 6), 3)
        assert float(tv_loss(a, a)) == 0.0

    def test_constants_have_no_gradients(self):
        a = torch.full((1, 1, 4, 4), 0.1, dtype=torch.float64)
        b = torch.full((1, 1, 4, 4), 0.9, dtype=torch.float64)
        assert float(tv_loss(a, b)) == 0.0

    def test_ramp_vs_constant_by_hand(self):
        # 2x2 horizontal unit ramp: one horizontal difference of 1 per row,
        # zero vertical differences -> mean|dh| = 1, mean|dv| = 0
        sr = torch.tensor([[[[0.0, 1.0], [0.0, 1.0]]]], dtype=torch.float64)
        hr = torch.full((1, 1, 2, 2), 0.5, dtype=torch.float64)
        assert float(tv_loss(sr, hr)) == pytest.approx(1.0, abs=1e-12)


class TestPerceptualLoss:
    def test_identical_zero(self):
        ext = FeatureExtractor(channels=3, seed=0)
        a = rand((2, 3, 8, 8), 4)
        assert float(perceptual_loss(ext, a, a)) == 0.0

    def test_non_negative(self):
        ext = FeatureExtractor(channels=3, seed=0)
        a, b = rand((1, 3, 8, 8), 5), rand((1, 3, 8, 8), 6)
        assert float(perceptual_loss(ext, a, b)) >= 0.0

    def test_identity_extractor_reduces_to_l1(self):
        identity = lambda x: [x]
        a, b = rand((2, 3, 6, 6), 7), rand((2, 3, 6, 6), 8)
        assert float(perceptual_loss(identity, a, b)) == pytest.approx(float(l1_loss(a, b)), abs=1e-15)

    def test_extractor_determinism(self):
        a = rand((1, 3, 8, 8), 9)
        f1 = FeatureExtractor(channels=3, seed=3)(a)
        f2 = FeatureExtractor(channels=3, seed=3)(a)
        for x, y in zip(f1, f2):
            torch.testing.assert_close(x, y, rtol=0, atol=0)

    def test_extractor_npz_roundtrip(self, tmp_path):
        ext = FeatureExtractor(channels=3, seed=1)
        ext.save_npz(tmp_path / "feat.npz")
        loaded = FeatureExtractor.from_npz(tmp_path / "feat.npz")
        assert loaded.provenance == "external-weights"
        a = rand((1, 3, 8, 8), 10)
        for x, y in zip(ext(a), loaded(a)):
            torch.testing.assert_close(x, y, rtol=0, atol=0)

    def test_extractor_version_check(self, tmp_path):
        np.savez(tmp_path / "bad.npz", version=99, num_stages=0)
        with pytest.raises(ValueError, match="version"):
            FeatureExtractor.from_npz(tmp_path / "bad.npz")


class TestRaganLosses:
    def test_generator_equal_scores(self):
        scores = [0.7, 0.7, 0.7]
        val = float(ragan_generator_loss(scores, scores))
        assert val == pytest.approx(2 * math.log(2), abs=1e-9)

    def test_discriminator_equal_scores(self):
        scores = [0.1, 0.1]
        val = float(ragan_discriminator_loss(scores, scores))
        assert val == pytest.approx(2 * math.log(2), abs=1e-9)

    def test_sum_at_equal_scores(self):
        scores = [1.3, 1.3, 1.3, 1.3]
        total = float(ragan_generator_loss(scores, scores)) + float(
            ragan_discriminator_loss(scores, scores)
        )
        assert total == pytest.approx(4 * math.log(2), abs=1e-9)

    def test_generator_wins_saturates_to_zero(self):
        real, fake = [0.0], [40.0]
        assert float(ragan_generator_loss(real, fake)) == pytest.approx(0.0, abs=1e-8)

    def test_discriminator_wins_saturates_to_zero(self):
        real, fake = [40.0], [0.0]
        assert float(ragan_discriminator_loss(real, fake)) == pytest.approx(0.0, abs=1e-8)

    def test_generator_losing_hits_clamp_ceiling(self):
        # hand evaluation with probabilities clamped at 1e-12: at gap +40 both
        # log arguments collapse to the clamp floor, capping each term
        real, fake = [40.0], [0.0]
        d_real = torch.sigmoid(torch.tensor(40.0, dtype=torch.float64))
        d_fake = torch.sigmoid(torch.tensor(-40.0, dtype=torch.float64))
        expected = -(
            math.log(max(1.0 - float(d_real), 1e-12)) + math.log(max(float(d_fake), 1e-12))
        )
        got = float(ragan_generator_loss(real, fake))
        assert got == pytest.approx(expected, rel=1e-9)
        assert got == pytest.approx(2 * -math.log(1e-12), rel=1e-6)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            ragan_generator_loss([], [1.0])

    def test_accepts_score_maps(self):
        real = rand((2, 1, 4, 4), 11)
        fake = rand((2, 1, 4, 4), 12)
        assert np.isfinite(float(ragan_generator_loss(real, fake)))


class TestColorLoss:
    def test_identical_zero(self):
        a = rand((1, 3, 8, 8), 13)
        assert float(color_loss(a, a)) == 0.0

    def test_high_band_difference_strongly_attenuated(self):
        # a Nyquist checkerboard is the extreme high-band signal; the Gaussian
        # window passes only ~0.4% of it, so the color loss barely reacts
        a = rand((1, 3, 16, 16), 14)
        yy, xx = np.mgrid[0:16, 0:16]
        checker = torch.as_tensor(((-1.0) ** (yy + xx))[None, None] * 0.1).expand(1, 3, 16, 16)
        b = a + checker
        residual = float(color_loss(a, b))
        direct = float(l1_loss(a, b))
        assert residual < 0.02 * direct

    def test_dc_preserved(self):
        a = torch.full((1, 3, 8, 8), 0.2, dtype=torch.float64)
        b = torch.full((1, 3, 8, 8), 0.5, dtype=torch.float64)
        assert float(color_loss(a, b)) == pytest.approx(0.3, abs=1e-12)


class TestComposites:
    def test_sr_zero_terms(self):
        assert float(sr_composite_loss(LossWeights(), SRLossTerms())) == 0.0

    def test_sr_weighted_sum(self):
        terms = SRLossTerms(per=0.1, gan=0.2, tv=0.3, l1=0.05)
        assert float(sr_composite_loss(LossWeights(), terms)) == pytest.approx(1.1, abs=1e-12)

    def test_sr_linear_in_l1(self):
        w = LossWeights()
        base = sr_composite_loss(w, SRLossTerms(l1=0.1))
        double = sr_composite_loss(w, SRLossTerms(l1=0.2))
        assert float(double - base) == pytest.approx(10 * 0.1, abs=1e-12)

    def test_sr_non_finite_named(self):
        with pytest.raises(ValueError, match="tv"):
            sr_composite_loss(LossWeights(), SRLossTerms(tv=float("nan")))

    def test_domain_weighted_sum(self):
        terms = DomainLossTerms(color=1.0, tex=1.0, per=1.0)
        assert float(domain_composite_loss(LossWeights(), terms)) == pytest.approx(1.015, abs=1e-12)

    def test_domain_color_only(self):
        terms = DomainLossTerms(color=0.37)
        assert float(domain_composite_loss(LossWeights(), terms)) == pytest.approx(0.37, abs=1e-12)

    def test_domain_non_finite_named(self):
        with pytest.raises(ValueError, match="texture"):
            domain_composite_loss(LossWeights(), DomainLossTerms(tex=float("inf")))

    def test_coefficient_probes(self):
        w = LossWeights()
        assert float(sr_composite_loss(w, SRLossTerms(per=1.0))) == 1.0
        assert float(sr_composite_loss(w, SRLossTerms(gan=1.0))) == 1.0
        assert float(sr_composite_loss(w, SRLossTerms(tv=1.0))) == 1.0
        assert float(sr_composite_loss(w, SRLossTerms(l1=1.0))) == 10.0
        assert float(domain_composite_loss(w, DomainLossTerms(color=1.0))) == 1.0
        assert float(domain_composite_loss(w, DomainLossTerms(tex=1.0))) == 0.005
        assert float(domain_composite_loss(w, DomainLossTerms(per=1.0))) == 0.01


def _input_grad_check(fn, *tensors, rel_tol=1e-3, h=1e-6):
    """Autograd input-gradients vs central differences on every coordinate."""
    leaves = [t.clone().requires_grad_(True) for t in tensors]
    out = fn(*leaves)
    out.backward()
    for leaf in leaves:
        flat = leaf.data.view(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + h
                up = float(fn(*leaves))
                flat[i] = orig - h
                down = float(fn(*leaves))
                flat[i] = orig
            fd = (up - down) / (2 * h)
            grad = float(leaf.grad.view(-1)[i])
            if max(abs(fd), abs(grad)) > 1e-9:
                assert abs(grad - fd) / max(abs(fd), abs(grad)) < rel_tol


class TestLossGradients:
    def test_l1_gradient_off_kinks(self):
        a = rand((1, 1, 4, 4), 16, lo=0.6, hi=0.9)
        b = rand((1, 1, 4, 4), 17, lo=0.1, hi=0.4)  # |a-b| bounded away from 0
        _input_grad_check(lambda x: l1_loss(x, b), a)

    def test_tv_gradient_off_kinks(self):
        gen = torch.Generator().manual_seed(18)
        a = torch.cumsum(torch.rand((1, 1, 4, 4), generator=gen, dtype=torch.float64) + 0.5, dim=-1)
        b = torch.zeros_like(a)
        _input_grad_check(lambda x: tv_loss(x, b), a)

    def test_perceptual_gradient(self):
        ext = FeatureExtractor(channels=1, seed=2).double()
        a = rand((1, 1, 4, 4), 19)
        b = rand((1, 1, 4, 4), 20)
        _input_grad_check(lambda x: perceptual_loss(ext, x, b), a)

    def test_ragan_generator_gradient(self):
        real = rand((4,), 21, lo=-1, hi=1)
        fake = rand((4,), 22, lo=-1, hi=1)
        _input_grad_check(lambda r, f: ragan_generator_loss(r, f), real, fake)

    def test_ragan_discriminator_gradient(self):
        real = rand((4,), 23, lo=-1, hi=1)
        fake = rand((4,), 24, lo=-1, hi=1)
        _input_grad_check(lambda r, f: ragan_discriminator_loss(r, f), real, fake)
