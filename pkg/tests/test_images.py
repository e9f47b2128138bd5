import math

import numpy as np
import pytest
import torch

from aesop_sr.images import (
    COLOR_RGB,
    COLOR_Y,
    ImageTensor,
    ResampleSpec,
    bicubic_downsample,
    bicubic_upsample,
    highfreq_energy,
    lowpass_filter,
    pixel_shuffle,
    pixel_unshuffle,
    quantize,
    read_image,
    rgb_to_y,
    spectral_magnitude,
    write_image,
)

from oracles import resample_2d

SPEC2 = ResampleSpec(scale=2)
SPEC4 = ResampleSpec(scale=4)


def rand_image(rng, c=3, h=8, w=8):
    return torch.from_numpy(rng.random((c, h, w))).float()


class TestImageTensor:
    def test_channel_count_enforced(self):
        with pytest.raises(ValueError):
            ImageTensor(torch.rand(1, 4, 4), COLOR_RGB)
        with pytest.raises(ValueError):
            ImageTensor(torch.rand(3, 4, 4), COLOR_Y)

    def test_non_finite_rejected(self):
        data = torch.rand(3, 4, 4)
        data[0, 0, 0] = float("nan")
        with pytest.raises(ValueError):
            ImageTensor(data)

    def test_batch_round_trip(self):
        img = ImageTensor(torch.rand(3, 5, 7))
        batched = img.batched()
        assert batched.shape == (1, 3, 5, 7)
        back = ImageTensor(batched).unbatch()
        assert torch.equal(back.data, img.data)

    def test_spec_requires_scale_two(self):
        with pytest.raises(ValueError):
            ResampleSpec(scale=1)


class TestBicubicResample:
    def test_constant_preserved_exactly(self, rng):
        for spec in (SPEC2, SPEC4):
            img = torch.full((3, 8, 8), 0.37)
            out = bicubic_downsample(img, spec)
            assert torch.allclose(out, torch.full_like(out, 0.37), atol=1e-7)
            up = bicubic_upsample(img, spec)
            assert torch.allclose(up, torch.full_like(up, 0.37), atol=1e-7)

    def test_downsample_matches_reference_convolution(self, rng):
        img = rng.random((6, 12, 12))
        ours = bicubic_downsample(torch.from_numpy(img[None]), SPEC2).numpy()[0]
        for c in range(6):
            expected = resample_2d(img[c], 2, down=True, antialias=True)
            np.testing.assert_allclose(ours[c], expected, atol=1e-12)

    def test_upsample_matches_reference_convolution(self, rng):
        img = rng.random((5, 5))
        ours = bicubic_upsample(torch.from_numpy(img[None]), SPEC2).numpy()[0]
        expected = resample_2d(img, 2, down=False, antialias=False)
        np.testing.assert_allclose(ours, expected, atol=1e-12)

    def test_checkerboard_averages_to_half(self):
        # 0/1 checkerboard under the antialiased kernel: the alternating sums
        # cancel exactly wherever the window stays inside the image, giving a
        # uniform 0.5; mirror-padded border windows deviate slightly, with
        # values pinned by the reference convolution.
        cb4 = (torch.arange(4)[:, None] + torch.arange(4)[None, :]) % 2
        out4 = bicubic_downsample(cb4[None].double(), SPEC2)[0]
        expected4 = resample_2d(cb4.double().numpy(), 2, down=True, antialias=True)
        np.testing.assert_allclose(out4.numpy(), expected4, atol=1e-12)
        np.testing.assert_allclose(
            out4.numpy(),
            [[0.45593262, 0.54406738], [0.54406738, 0.45593262]],
            atol=1e-8,
        )
        cb16 = ((torch.arange(16)[:, None] + torch.arange(16)[None, :]) % 2).double()
        out16 = bicubic_downsample(cb16[None], SPEC2)[0]
        assert torch.allclose(out16[2:-2, 2:-2], torch.full((4, 4), 0.5).double(), atol=1e-12)

    def test_single_pixel_upsample(self):
        out = bicubic_upsample(torch.full((1, 1, 1), 0.7), SPEC2)
        assert out.shape == (1, 2, 2)
        assert torch.allclose(out, torch.full_like(out, 0.7), atol=1e-7)

    def test_delta_footprint_matches_reference(self, rng):
        img = np.zeros((7, 7))
        img[3, 3] = 1.0
        ours = bicubic_upsample(torch.from_numpy(img[None]), SPEC2).numpy()[0]
        expected = resample_2d(img, 2, down=False, antialias=False)
        np.testing.assert_allclose(ours, expected, atol=1e-12)

    def test_linearity(self, rng):
        x = torch.from_numpy(rng.random((3, 8, 8)))
        y = torch.from_numpy(rng.random((3, 8, 8)))
        a, b = 1.7, -0.4
        lhs = bicubic_downsample(a * x + b * y, SPEC2)
        rhs = a * bicubic_downsample(x, SPEC2) + b * bicubic_downsample(y, SPEC2)
        assert torch.allclose(lhs, rhs, atol=1e-12)

    def test_non_divisible_dims_rejected(self):
        with pytest.raises(ValueError):
            bicubic_downsample(torch.rand(3, 9, 8), SPEC2)

    def test_image_tensor_round_trip_type(self):
        img = ImageTensor(torch.rand(3, 8, 8))
        out = bicubic_downsample(img, SPEC2)
        assert isinstance(out, ImageTensor)
        assert (out.height, out.width) == (4, 4)

    def test_gradients_flow(self):
        x = torch.rand(1, 3, 8, 8, requires_grad=True)
        bicubic_downsample(x, SPEC2).sum().backward()
        assert x.grad is not None and torch.isfinite(x.grad).all()


class TestColorConversion:
    def test_white_black_red(self):
        white = torch.ones(3, 2, 2)
        black = torch.zeros(3, 2, 2)
        red = torch.zeros(3, 2, 2)
        red[0] = 1.0
        assert torch.equal(rgb_to_y(white), torch.ones(1, 2, 2))
        assert torch.equal(rgb_to_y(black), torch.zeros(1, 2, 2))
        assert torch.allclose(rgb_to_y(red), torch.full((1, 2, 2), 0.299))

    def test_gray_is_exact(self, rng):
        for v in rng.random(20):
            gray = torch.full((3, 3, 3), float(v))
            assert torch.equal(rgb_to_y(gray), torch.full((1, 3, 3), float(v)))

    def test_wrong_color_space(self):
        y_img = ImageTensor(torch.rand(1, 4, 4), COLOR_Y)
        with pytest.raises(TypeError):
            rgb_to_y(y_img)

    def test_matches_weighted_sum(self, rng):
        img = torch.from_numpy(rng.random((3, 5, 5)))
        expected = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
        assert torch.allclose(rgb_to_y(img)[0], expected, atol=1e-12)


class TestPixelShuffle:
    def test_documented_channel_order(self):
        img = torch.tensor([[[0.1, 0.2], [0.3, 0.4]]])
        out = pixel_unshuffle(img, 2)
        assert out.shape == (4, 1, 1)
        assert torch.equal(out.flatten(), torch.tensor([0.1, 0.2, 0.3, 0.4]))

    def test_round_trip_many_shapes(self, rng):
        for c, h, w, s in [(3, 4, 4, 2), (1, 6, 9, 3), (5, 8, 8, 4), (2, 12, 6, 2)]:
            img = torch.from_numpy(rng.random((c, h, w)))
            assert torch.equal(pixel_shuffle(pixel_unshuffle(img, s), s), img)

    def test_sum_preserved(self, rng):
        img = torch.from_numpy(rng.random((3, 8, 8)))
        assert torch.allclose(pixel_unshuffle(img, 2).sum(), img.sum(), atol=1e-9)

    def test_non_divisible(self):
        with pytest.raises(ValueError):
            pixel_unshuffle(torch.rand(3, 5, 4), 2)


class TestSpectral:
    def test_constant_image_dc_only(self):
        img = torch.full((1, 8, 8), 0.5)
        mag = spectral_magnitude(img)
        center = mag[4, 4]
        assert center > 0
        off = mag.clone()
        off[4, 4] = 0
        assert torch.allclose(off, torch.zeros_like(off), atol=1e-5)

    def test_sinusoid_two_peaks(self):
        x = torch.arange(16).float()
        img = (0.5 + 0.5 * torch.cos(2 * math.pi * 4 * x / 16)).repeat(16, 1)[None]
        mag = spectral_magnitude(img)
        flat = mag.flatten()
        top = torch.topk(flat, 3).indices
        coords = {(int(i // 16), int(i % 16)) for i in top}
        assert (8, 8) in coords  # DC
        assert (8, 4) in coords and (8, 12) in coords  # symmetric +-f peaks

    def test_parseval(self, rng):
        img = torch.from_numpy(rng.random((8, 8)))
        spectrum = torch.fft.fft2(img)
        lhs = float((spectrum.abs() ** 2).sum())
        rhs = 64 * float((img ** 2).sum())
        assert math.isclose(lhs, rhs, rel_tol=1e-12)

    def test_requires_single_channel(self):
        with pytest.raises(ValueError):
            spectral_magnitude(torch.rand(3, 8, 8))


class TestLowpass:
    def test_nyquist_cutoff_is_identity(self, rng):
        img = torch.from_numpy(rng.random((1, 8, 8)))
        out = lowpass_filter(img, 0.5)
        assert torch.allclose(out, img, atol=1e-6)

    def test_constant_unchanged(self):
        img = torch.full((1, 8, 8), 0.3)
        for cutoff in (0.05, 0.2, 0.5):
            assert torch.allclose(lowpass_filter(img, cutoff), img, atol=1e-7)

    def test_high_sinusoid_removed(self):
        x = torch.arange(16).float()
        img = (0.5 * torch.cos(2 * math.pi * 6 * x / 16)).repeat(16, 1)[None]  # f = 0.375
        out = lowpass_filter(img, 0.25)
        assert float(out.abs().max()) < 1e-6

    def test_residual_energy_above_cutoff(self, rng):
        img = torch.from_numpy(rng.random((1, 16, 16)))
        out = lowpass_filter(img, 0.2)
        total = float((torch.fft.fft2(out[0]).abs() ** 2).sum())
        assert highfreq_energy(out, 0.2) < 1e-6 * total

    def test_cutoff_validation(self):
        with pytest.raises(ValueError):
            lowpass_filter(torch.rand(1, 8, 8), 0.0)
        with pytest.raises(ValueError):
            lowpass_filter(torch.rand(1, 8, 8), 0.6)


class TestQuantizeAndPng:
    def test_quantize_snaps_to_grid(self, rng):
        img = torch.from_numpy(rng.random((3, 4, 4))).float() * 1.4 - 0.2
        q = quantize(img)
        assert float(q.min()) >= 0 and float(q.max()) <= 1
        assert torch.equal(quantize(q), q)
        levels = torch.round(q * 255)
        assert torch.allclose(levels, q * 255, atol=1e-4)

    def test_png_round_trip_bit_exact(self, tmp_path, rng):
        img = ImageTensor(quantize(torch.from_numpy(rng.random((3, 9, 7))).float()))
        path = tmp_path / "img.png"
        write_image(img, path)
        back = read_image(path)
        assert torch.equal(back.data, img.data)
