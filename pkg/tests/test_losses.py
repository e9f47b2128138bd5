import math

import numpy as np
import pytest
import torch

from aesop_sr.autoencoder import AEPretrainConfig, AEState, freeze_ae, pretrain_ae
from aesop_sr.exceptions import FrozenModelError
from aesop_sr.losses import (
    FeatureExtractorConfig,
    LossConfig,
    MODE_AESOP,
    MODE_BASELINE,
    build_extractor,
    loss_adversarial,
    loss_aesop,
    loss_artifact,
    loss_perceptual,
    loss_pix,
    total_loss,
)
from aesop_sr.networks import (
    EncoderConfig,
    GeneratorConfig,
    build_discriminator,
    build_encoder,
    build_generator,
)

TINY_GEN = GeneratorConfig(scale=2, num_rrdb_blocks=1, base_channels=8, growth_channels=4)
TINY_ENC = EncoderConfig(scale=2, rrdb_channels=8)


def make_tiny_ae(seed=0, frozen=True, pretrain_step=0):
    ae = AEState(
        encoder=build_encoder(TINY_ENC, seed=seed),
        decoder=build_generator(TINY_GEN, seed=seed + 1),
        pretrain_step=pretrain_step,
    )
    if frozen:
        with pytest.warns(UserWarning) if pretrain_step == 0 else _nullcontext():
            freeze_ae(ae)
    return ae


class _nullcontext:
    def __enter__(self):
        return None

    def __exit__(self, *args):
        return False


@pytest.fixture(scope="module")
def trained_tiny_ae(tiny_dataset):
    cfg = AEPretrainConfig(
        scale=2, steps=300, batch_size=4, hr_patch=16, learning_rate=2e-3, seed=0,
        encoder_channels=8, decoder=TINY_GEN,
    )
    return pretrain_ae(tiny_dataset, cfg).ae


class TestLossPix:
    def test_identical_zero(self):
        x = torch.rand(1, 3, 8, 8)
        assert float(loss_pix(x, x)) == 0.0

    def test_constant_offset(self):
        hr = torch.rand(1, 3, 8, 8)
        sr = hr + 0.1
        assert float(loss_pix(sr, hr, p=1)) == pytest.approx(0.1, abs=1e-6)

    def test_matches_scalar_reference(self, rng):
        a = rng.random((2, 3, 5, 5))
        b = rng.random((2, 3, 5, 5))
        expected = float(np.mean(np.abs(a - b)))
        assert float(loss_pix(torch.from_numpy(a), torch.from_numpy(b), p=1)) == pytest.approx(
            expected, abs=1e-7
        )
        expected2 = float(np.mean((a - b) ** 2))
        assert float(loss_pix(torch.from_numpy(a), torch.from_numpy(b), p=2)) == pytest.approx(
            expected2, abs=1e-7
        )

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            loss_pix(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 4, 4))


class TestLossAesop:
    def test_identical_inputs_zero(self):
        ae = make_tiny_ae()
        x = torch.rand(1, 3, 8, 8)
        assert float(loss_aesop(x, x, ae)) == pytest.approx(0.0, abs=1e-9)

    def test_unfrozen_ae_refused(self):
        ae = make_tiny_ae(frozen=False)
        x = torch.rand(1, 3, 8, 8)
        with pytest.raises(FrozenModelError):
            loss_aesop(x, x, ae)

    def test_gradients_reach_sr_only(self):
        ae = make_tiny_ae()
        hr = torch.rand(1, 3, 8, 8)
        sr = torch.rand(1, 3, 8, 8, requires_grad=True)
        loss_aesop(sr, hr, ae).backward()
        assert sr.grad is not None and float(sr.grad.abs().sum()) > 0
        assert all(p.grad is None for p in ae.parameters())

    def test_near_null_perturbation_much_cheaper_than_pixel(self, trained_tiny_ae):
        # Numerically search a perturbation direction the AE barely responds
        # to; the same perturbation costs the pixel loss its full magnitude.
        ae = trained_tiny_ae
        torch.manual_seed(0)
        hr = torch.rand(1, 3, 16, 16)
        checker = ((torch.arange(16)[:, None] + torch.arange(16)[None, :]) % 2).float() * 2 - 1
        v = checker.repeat(1, 3, 1, 1).clone()
        v += 0.01 * torch.randn_like(v)
        v = torch.nn.Parameter(v)
        eps = 0.05
        opt = torch.optim.Adam([v], lr=3e-2)
        for _ in range(150):
            delta = v / v.norm() * (eps * v.numel() ** 0.5)
            loss = loss_aesop(hr + delta, hr, ae)
            opt.zero_grad()
            loss.backward()
            opt.step()
        with torch.no_grad():
            delta = (v / v.norm() * (eps * v.numel() ** 0.5)).detach()
            sr = hr + delta
            ratio = float(loss_aesop(sr, hr, ae)) / float(loss_pix(sr, hr))
        assert not torch.equal(sr, hr)
        assert ratio < 0.1

    def test_null_direction_has_vanishing_directional_derivative(self, trained_tiny_ae):
        # First-order invariance: along a numerically-found near-null
        # direction of the frozen AE's Jacobian the loss derivative vanishes,
        # while a random direction keeps a full-size derivative.
        import copy

        ae = copy.deepcopy(trained_tiny_ae)  # keep the shared fixture float32
        ae.encoder.module.double()
        ae.decoder.module.double()
        hr = torch.rand(1, 3, 16, 16, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(0))
        sr0 = (hr + 0.03 * torch.randn(hr.shape, dtype=torch.float64,
                                       generator=torch.Generator().manual_seed(1))).detach()
        checker = (((torch.arange(16)[:, None] + torch.arange(16)[None, :]) % 2)
                   .double() * 2 - 1)
        v = torch.nn.Parameter(checker.repeat(1, 3, 1, 1)
                               + 0.01 * torch.randn(1, 3, 16, 16, dtype=torch.float64,
                                                    generator=torch.Generator().manual_seed(2)))
        for lr, iters in ((3e-2, 300), (3e-3, 300)):
            opt = torch.optim.Adam([v], lr=lr)
            for _ in range(iters):
                d = v / v.norm()
                jd = (ae.reconstruct(sr0 + 1e-4 * d) - ae.reconstruct(sr0)) / 1e-4
                opt.zero_grad()
                jd.norm().backward()
                opt.step()
        with torch.no_grad():
            d_null = (v / v.norm()).detach()
        sr = sr0.clone().requires_grad_(True)
        loss_aesop(sr, hr, ae).backward()
        dd_null = abs(float((sr.grad * d_null).sum()))
        rand = torch.randn(sr0.shape, dtype=torch.float64,
                           generator=torch.Generator().manual_seed(3))
        rand = rand / rand.norm()
        dd_rand = abs(float((sr.grad * rand).sum()))
        assert dd_null < 1e-6
        assert dd_rand > 100 * dd_null

    def test_checkerboard_attenuated_after_training(self, trained_tiny_ae):
        # The trained encoder approximates the antialiased downsampler, which
        # cancels an alternating pattern outright.
        hr = torch.rand(1, 3, 16, 16)
        checker = (((torch.arange(16)[:, None] + torch.arange(16)[None, :]) % 2).float() * 2 - 1) * 0.05
        sr = hr + checker
        aesop_val = float(loss_aesop(sr, hr, trained_tiny_ae))
        pix_val = float(loss_pix(sr, hr))
        assert aesop_val < 0.5 * pix_val


class TestLossPerceptual:
    def test_identical_zero_and_symmetry(self, rng):
        extractor = build_extractor(FeatureExtractorConfig(channels=(8, 8), seed=0))
        a = torch.from_numpy(rng.random((1, 3, 16, 16))).float()
        b = torch.from_numpy(rng.random((1, 3, 16, 16))).float()
        assert float(loss_perceptual(a, a, extractor)) == 0.0
        assert float(loss_perceptual(a, b, extractor)) == pytest.approx(
            float(loss_perceptual(b, a, extractor)), abs=1e-7
        )

    def test_decreases_along_interpolation_path(self, rng):
        extractor = build_extractor(FeatureExtractorConfig(seed=1))
        sr = torch.from_numpy(rng.random((1, 3, 16, 16))).float()
        hr = torch.from_numpy(rng.random((1, 3, 16, 16))).float()
        values = []
        for t in (0.0, 0.25, 0.5, 0.75, 1.0):
            mid = sr + t * (hr - sr)
            values.append(float(loss_perceptual(mid, hr, extractor)))
        violations = sum(1 for i in range(4) if values[i + 1] > values[i] + 1e-9)
        assert violations <= 1
        assert values[-1] == pytest.approx(0.0, abs=1e-6)  # float32 path interpolation noise

    def test_missing_extractor_is_config_error(self):
        with pytest.raises(ValueError):
            loss_perceptual(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8), None)

    def test_extractor_frozen_after_build(self):
        extractor = build_extractor(FeatureExtractorConfig(seed=0))
        assert extractor.frozen
        assert all(not p.requires_grad for p in extractor.module.parameters())


class TestLossAdversarial:
    def test_symmetric_inputs_near_two_log_two(self):
        # sr and hr drawn from the same distribution: both relativistic terms
        # sit at 2 log 2 in expectation (logit differences symmetric about 0).
        disc = build_discriminator(8, base_channels=8, seed=0)
        torch.manual_seed(0)
        g_vals, d_vals = [], []
        for _ in range(40):
            sr = torch.rand(4, 3, 8, 8)
            hr = torch.rand(4, 3, 8, 8)
            with torch.no_grad():
                g, d = loss_adversarial(sr, hr, disc)
            g_vals.append(float(g))
            d_vals.append(float(d))
        target = 2 * math.log(2.0)
        assert np.mean(g_vals) == pytest.approx(target, rel=0.2)
        assert np.mean(d_vals) == pytest.approx(target, rel=0.2)
        assert np.mean(g_vals) == pytest.approx(np.mean(d_vals), rel=0.1)

    def test_discriminator_steps_reduce_d_loss(self):
        disc = build_discriminator(8, base_channels=8, seed=1)
        torch.manual_seed(1)
        sr = torch.rand(4, 3, 8, 8)
        hr = (torch.rand(4, 3, 8, 8) * 0.5 + 0.25)
        opt = torch.optim.Adam(disc.module.parameters(), lr=1e-3)
        _, initial = loss_adversarial(sr, hr, disc)
        initial = float(initial)
        for _ in range(40):
            _, d_loss = loss_adversarial(sr, hr, disc)
            opt.zero_grad()
            d_loss.backward()
            opt.step()
        _, final = loss_adversarial(sr, hr, disc)
        assert float(final) < initial

    def test_gradients_reach_sr(self):
        disc = build_discriminator(8, base_channels=8, seed=2)
        sr = torch.rand(1, 3, 8, 8, requires_grad=True)
        g, _ = loss_adversarial(sr, torch.rand(1, 3, 8, 8), disc)
        g.backward()
        assert float(sr.grad.abs().sum()) > 0


class TestLossArtifact:
    def test_identical_zero(self):
        x = torch.rand(1, 3, 16, 16)
        assert float(loss_artifact(x, x)) == 0.0

    def test_spiky_residual_costs_more_than_uniform(self):
        hr = torch.zeros(1, 3, 16, 16)
        uniform = hr + 0.05
        spiky = hr.clone()
        # same total residual energy concentrated in a few pixels
        spiky[0, :, 4:6, 4:6] = 0.05 * (16 * 16) / 4.0
        uniform_val = float(loss_artifact(uniform, hr))
        spiky_val = float(loss_artifact(spiky, hr))
        assert spiky_val > uniform_val

    def test_reference_residual_exempts_improved_pixels(self):
        hr = torch.zeros(1, 3, 8, 8)
        sr = hr + 0.1
        ref = torch.full((1, 1, 8, 8), 10.0)
        assert float(loss_artifact(sr, hr, ref_residual=ref)) == 0.0


class TestTotalLoss:
    def test_all_zero_lambdas(self):
        cfg = LossConfig(mode=MODE_BASELINE, lambda_pix=0, lambda_percep=0,
                         lambda_adv=0, lambda_artif=0)
        bd = total_loss(cfg, torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8))
        assert bd.total == 0.0 and float(bd.generator_total) == 0.0

    def test_aesop_only_reduces_to_loss_aesop(self):
        ae = make_tiny_ae()
        cfg = LossConfig(mode=MODE_AESOP, lambda_aesop=1, lambda_percep=0,
                         lambda_adv=0, lambda_artif=0)
        sr = torch.rand(1, 3, 8, 8)
        hr = torch.rand(1, 3, 8, 8)
        bd = total_loss(cfg, sr, hr, ae=ae)
        assert float(bd.generator_total) == pytest.approx(float(loss_aesop(sr, hr, ae)), abs=1e-9)
        assert bd.pix == 0.0

    def test_fields_sum_to_total(self):
        ae = make_tiny_ae()
        extractor = build_extractor(FeatureExtractorConfig(channels=(8, 8), seed=0))
        disc = build_discriminator(8, base_channels=8, seed=0)
        cfg = LossConfig(mode=MODE_AESOP)
        bd = total_loss(cfg, torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8),
                        ae=ae, extractor=extractor, discriminator=disc)
        assert bd.total == pytest.approx(bd.aesop + bd.pix + bd.percep + bd.adv_g + bd.artif, abs=1e-9)
        assert bd.adv_d > 0

    def test_baseline_has_no_ae_term_and_aesop_no_pix(self):
        ae = make_tiny_ae()
        extractor = build_extractor(FeatureExtractorConfig(channels=(8, 8), seed=0))
        disc = build_discriminator(8, base_channels=8, seed=0)
        sr, hr = torch.rand(1, 3, 8, 8), torch.rand(2 - 1, 3, 8, 8)
        base = total_loss(LossConfig(mode=MODE_BASELINE), sr, hr,
                          extractor=extractor, discriminator=disc)
        assert base.aesop == 0.0 and base.pix > 0.0
        aesop = total_loss(LossConfig(mode=MODE_AESOP), sr, hr, ae=ae,
                           extractor=extractor, discriminator=disc)
        assert aesop.pix == 0.0 and aesop.aesop > 0.0

    def test_mode_validation(self):
        with pytest.raises(ValueError):
            LossConfig(mode="nope")


def _fd_check(fn, x: torch.Tensor, n_pixels: int = 10, eps: float = 1e-6, rel_tol: float = 1e-4):
    """Central finite differences vs autograd at randomly probed pixels."""
    x = x.clone().detach().requires_grad_(True)
    fn(x).backward()
    grad = x.grad.clone()
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(n_pixels):
        idx = tuple(int(rng.integers(s)) for s in x.shape)
        plus = x.detach().clone()
        plus[idx] += eps
        minus = x.detach().clone()
        minus[idx] -= eps
        with torch.no_grad():
            fd = (float(fn(plus)) - float(fn(minus))) / (2 * eps)
        analytic = float(grad[idx])
        scale = max(abs(fd), abs(analytic), 1e-8)
        assert abs(fd - analytic) / scale < rel_tol, f"pixel {idx}: fd={fd} analytic={analytic}"
        checked += 1
    assert checked == n_pixels


class TestGradientCorrectness:
    """Analytic gradients vs central finite differences, double precision."""

    def _double_ae(self):
        ae = make_tiny_ae(seed=5)
        ae.encoder.module.double()
        ae.decoder.module.double()
        return ae

    def test_loss_pix(self, rng):
        hr = torch.from_numpy(rng.random((1, 3, 8, 8)))
        sr = torch.from_numpy(rng.random((1, 3, 8, 8)))
        _fd_check(lambda x: loss_pix(x, hr, p=1), sr)
        _fd_check(lambda x: loss_pix(x, hr, p=2), sr)

    def test_loss_aesop(self, rng):
        ae = self._double_ae()
        hr = torch.from_numpy(rng.random((1, 3, 8, 8)))
        sr = torch.from_numpy(rng.random((1, 3, 8, 8)))
        _fd_check(lambda x: loss_aesop(x, hr, ae), sr)

    def test_loss_perceptual(self, rng):
        extractor = build_extractor(FeatureExtractorConfig(channels=(8, 8, 8), seed=3))
        extractor.module.double()
        hr = torch.from_numpy(rng.random((1, 3, 8, 8)))
        sr = torch.from_numpy(rng.random((1, 3, 8, 8)))
        _fd_check(lambda x: loss_perceptual(x, hr, extractor), sr)

    def test_loss_adversarial_both_sides(self, rng):
        disc = build_discriminator(8, base_channels=4, seed=4)
        disc.module.double()
        hr = torch.from_numpy(rng.random((1, 3, 8, 8)))
        sr = torch.from_numpy(rng.random((1, 3, 8, 8)))
        _fd_check(lambda x: loss_adversarial(x, hr, disc)[0], sr)

    def test_loss_artifact(self, rng):
        hr = torch.from_numpy(rng.random((1, 3, 8, 8)))
        sr = torch.from_numpy(rng.random((1, 3, 8, 8)))
        _fd_check(lambda x: loss_artifact(x, hr), sr)


class TestFreezeContracts:
    def test_checksums_stable_under_backward_bearing_evaluations(self):
        ae = make_tiny_ae(seed=6)
        extractor = build_extractor(FeatureExtractorConfig(channels=(8, 8), seed=6))
        ae_before = ae.checksum()
        ex_before = extractor.checksum()
        for _ in range(50):
            sr = torch.rand(1, 3, 8, 8, requires_grad=True)
            hr = torch.rand(1, 3, 8, 8)
            (loss_aesop(sr, hr, ae) + loss_perceptual(sr, hr, extractor)).backward()
        assert ae.checksum() == ae_before
        assert extractor.checksum() == ex_before

    def test_gradient_flows_through_frozen_ae(self):
        # Finite-difference probe of the supervision loss w.r.t. one sr pixel.
        ae = make_tiny_ae(seed=7)
        torch.manual_seed(7)
        hr = torch.rand(1, 3, 8, 8).double()
        sr = torch.rand(1, 3, 8, 8).double()
        ae.encoder.module.double()
        ae.decoder.module.double()
        eps = 1e-6
        plus = sr.clone()
        plus[0, 0, 3, 3] += eps
        minus = sr.clone()
        minus[0, 0, 3, 3] -= eps
        fd = (float(loss_aesop(plus, hr, ae)) - float(loss_aesop(minus, hr, ae))) / (2 * eps)
        assert abs(fd) > 1e-8
