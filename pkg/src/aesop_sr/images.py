"""Image tensors and deterministic low-level operators.

Images are float arrays in [0, 1], laid out row-major as [C, H, W] (or
batched [N, C, H, W]).  Values are only clamped and quantized at image
export and file-convention metric computation; loss paths stay unclamped.

Conventions fixed here and recorded in metric metadata:
  * bicubic kernel parameter a = -0.5, antialiased when downscaling
    (kernel support scaled by the scale factor), mirror boundary handling;
  * luminance uses full-range BT.601 coefficients (0.299, 0.587, 0.114)
    applied to [0, 1] floats;
  * 8-bit quantization rounds half to even (numpy/torch default).
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

COLOR_RGB = "rgb"
COLOR_Y = "y"

# Full-range BT.601 luma coefficients on [0, 1] floats.
Y_COEFF_R = 0.299
Y_COEFF_G = 0.587
Y_COEFF_B = 0.114

BICUBIC_A = -0.5


@dataclass(frozen=True)
class ImageTensor:
    """A real-valued image or image batch with an explicit color-space tag.

    ``data`` is [C, H, W] or [N, C, H, W]; RGB images carry 3 channels,
    luminance images carry 1.  Batched and unbatched forms interconvert
    losslessly through :meth:`batched` / :meth:`unbatch`.
    """

    data: torch.Tensor
    color_space: str = COLOR_RGB

    def __post_init__(self):
        if not isinstance(self.data, torch.Tensor):
            object.__setattr__(self, "data", torch.as_tensor(self.data))
        if self.data.ndim not in (3, 4):
            raise ValueError(f"image data must be [C,H,W] or [N,C,H,W], got shape {tuple(self.data.shape)}")
        if self.color_space not in (COLOR_RGB, COLOR_Y):
            raise ValueError(f"unknown color space {self.color_space!r}")
        expected_c = 3 if self.color_space == COLOR_RGB else 1
        if self.channels != expected_c:
            raise ValueError(
                f"{self.color_space} image must have {expected_c} channels, got {self.channels}"
            )
        if self.height < 1 or self.width < 1:
            raise ValueError("image spatial dims must be >= 1")
        if not torch.isfinite(self.data).all():
            raise ValueError("image data contains non-finite values")

    @property
    def channels(self) -> int:
        return self.data.shape[-3]

    @property
    def height(self) -> int:
        return self.data.shape[-2]

    @property
    def width(self) -> int:
        return self.data.shape[-1]

    @property
    def is_batched(self) -> bool:
        return self.data.ndim == 4

    def batched(self) -> torch.Tensor:
        """Return the data as [N, C, H, W] (N=1 for a single image)."""
        return self.data if self.is_batched else self.data.unsqueeze(0)

    def unbatch(self) -> "ImageTensor":
        if not self.is_batched:
            return self
        if self.data.shape[0] != 1:
            raise ValueError("cannot unbatch a multi-image batch")
        return replace(self, data=self.data.squeeze(0))

    def with_data(self, data: torch.Tensor, color_space: str | None = None) -> "ImageTensor":
        return ImageTensor(data, color_space or self.color_space)


@dataclass(frozen=True)
class ResampleSpec:
    """Integer-scale bicubic resampling parameters, fixed per run."""

    scale: int
    kernel: str = "bicubic"
    kernel_a: float = BICUBIC_A
    antialias: bool = True

    def __post_init__(self):
        if self.kernel != "bicubic":
            raise ValueError(f"unsupported kernel {self.kernel!r}")
        if int(self.scale) != self.scale or self.scale < 2:
            raise ValueError("scale must be an integer >= 2")


def _unwrap(img) -> tuple[torch.Tensor, ImageTensor | None]:
    if isinstance(img, ImageTensor):
        return img.data, img
    return torch.as_tensor(img), None


def _rewrap(data: torch.Tensor, template: ImageTensor | None, color_space: str | None = None):
    if template is None:
        return data
    return ImageTensor(data, color_space or template.color_space)


def _cubic_kernel(x: float, a: float) -> float:
    x = abs(x)
    if x <= 1.0:
        return (a + 2.0) * x ** 3 - (a + 3.0) * x ** 2 + 1.0
    if x < 2.0:
        return a * x ** 3 - 5.0 * a * x ** 2 + 8.0 * a * x - 4.0 * a
    return 0.0


def _mirror_index(j: int, n: int) -> int:
    # Symmetric reflection with edge repeat: ..., 1, 0 | 0, 1, ..., n-1 | n-1, n-2, ...
    if n == 1:
        return 0
    period = 2 * n
    j %= period
    if j < 0:
        j += period
    return j if j < n else period - 1 - j


@functools.lru_cache(maxsize=None)
def _resample_weights(n_in: int, scale: int, down: bool, antialias: bool, a: float) -> np.ndarray:
    """Dense [n_out, n_in] weight matrix for one axis of a separable bicubic
    resample.  Rows are normalized to sum to one, so constants are preserved
    exactly and the operator is linear by construction."""
    if down:
        if n_in % scale != 0:
            raise ValueError(f"length {n_in} not divisible by scale {scale}")
        n_out = n_in // scale
        kernel_width = float(scale) if antialias else 1.0
    else:
        n_out = n_in * scale
        kernel_width = 1.0
    support = 2.0 * kernel_width
    ratio = n_in / n_out
    weights = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        center = (i + 0.5) * ratio - 0.5
        lo = int(np.floor(center - support))
        hi = int(np.ceil(center + support))
        raw = []
        for j in range(lo, hi + 1):
            w = _cubic_kernel((j - center) / kernel_width, a)
            if w != 0.0:
                raw.append((j, w))
        total = sum(w for _, w in raw)
        for j, w in raw:
            weights[i, _mirror_index(j, n_in)] += w / total
    return weights


def _separable_resample(data: torch.Tensor, scale: int, down: bool, antialias: bool, a: float) -> torch.Tensor:
    wh = _resample_weights(data.shape[-2], scale, down, antialias, a)
    ww = _resample_weights(data.shape[-1], scale, down, antialias, a)
    mat_h = torch.as_tensor(wh, dtype=data.dtype, device=data.device)
    mat_w = torch.as_tensor(ww, dtype=data.dtype, device=data.device)
    return mat_h @ data @ mat_w.T


def bicubic_downsample(img, spec: ResampleSpec):
    """Downscale by ``spec.scale``; H and W must be divisible by the scale.

    Deterministic and linear; no clamping (loss-path safe)."""
    data, template = _unwrap(img)
    if data.shape[-2] % spec.scale or data.shape[-1] % spec.scale:
        raise ValueError(
            f"dims {data.shape[-2]}x{data.shape[-1]} not divisible by scale {spec.scale}"
        )
    out = _separable_resample(data, spec.scale, True, spec.antialias, spec.kernel_a)
    return _rewrap(out, template)


def bicubic_upsample(img, spec: ResampleSpec):
    """Upscale by ``spec.scale`` with the (non-antialiased) bicubic kernel."""
    data, template = _unwrap(img)
    out = _separable_resample(data, spec.scale, False, False, spec.kernel_a)
    return _rewrap(out, template)


def rgb_to_y(img):
    """Convert an RGB image to single-channel luminance.

    Written so that gray inputs (r = g = b = v) map to exactly v; pure red
    maps to exactly 0.299."""
    data, template = _unwrap(img)
    if template is not None and template.color_space != COLOR_RGB:
        raise TypeError("rgb_to_y expects an RGB image")
    if data.shape[-3] != 3:
        raise TypeError(f"rgb_to_y expects 3 channels, got {data.shape[-3]}")
    r, g, b = data[..., 0:1, :, :], data[..., 1:2, :, :], data[..., 2:3, :, :]
    y = b + Y_COEFF_R * (r - b) + Y_COEFF_G * (g - b)
    if template is not None:
        return ImageTensor(y, COLOR_Y)
    return y


def pixel_unshuffle(img, s: int):
    """Rearrange [C, H, W] -> [C*s^2, H/s, W/s]; lossless, inverse of
    :func:`pixel_shuffle`.  Output channel order follows torch: index
    c*s*s + dy*s + dx for source offset (dy, dx) within each s x s cell."""
    data, _ = _unwrap(img)
    if data.shape[-2] % s or data.shape[-1] % s:
        raise ValueError(f"dims not divisible by {s}")
    # channel count changes, so the result is a plain tensor, never re-tagged
    return F.pixel_unshuffle(data, s)


def pixel_shuffle(img, s: int):
    data, _ = _unwrap(img)
    if data.shape[-3] % (s * s):
        raise ValueError(f"channel count not divisible by {s * s}")
    return F.pixel_shuffle(data, s)


def spectral_magnitude(img) -> torch.Tensor:
    """Centered log-magnitude spectrum log(1 + |F|) of a single-channel image."""
    data, template = _unwrap(img)
    if data.ndim == 3:
        if data.shape[0] != 1:
            raise ValueError("spectral_magnitude expects a single-channel image")
        data = data[0]
    elif data.ndim != 2:
        raise ValueError("spectral_magnitude expects [H,W] or [1,H,W]")
    spectrum = torch.fft.fftshift(torch.fft.fft2(data))
    return torch.log1p(spectrum.abs())


def _frequency_mask(h: int, w: int, cutoff: float, device, above: bool) -> torch.Tensor:
    # Separable cutoff on per-axis normalized frequency, so cutoff = 0.5
    # (Nyquist) keeps every representable component.
    fy = torch.fft.fftfreq(h, device=device).abs()
    fx = torch.fft.fftfreq(w, device=device).abs()
    radius = torch.maximum(fy[:, None], fx[None, :])
    eps = 1e-12
    return radius > cutoff + eps if above else radius <= cutoff + eps


def lowpass_filter(img, cutoff: float):
    """Ideal sharp low-pass: spectral components above ``cutoff`` (normalized
    per-axis frequency, Nyquist = 0.5) are removed exactly."""
    if not 0.0 < cutoff <= 0.5:
        raise ValueError(f"cutoff must be in (0, 0.5], got {cutoff}")
    data, template = _unwrap(img)
    mask = _frequency_mask(data.shape[-2], data.shape[-1], cutoff, data.device, above=False)
    spectrum = torch.fft.fft2(data)
    filtered = torch.fft.ifft2(spectrum * mask).real.to(data.dtype)
    return _rewrap(filtered, template)


def highfreq_energy(img, cutoff: float) -> float:
    """Spectral energy sum(|F|^2) strictly above the cutoff, using the same
    frequency-region definition as :func:`lowpass_filter`."""
    data, _ = _unwrap(img)
    if data.ndim == 3:
        data = data[0] if data.shape[0] == 1 else rgb_to_y(data)[0]
    mask = _frequency_mask(data.shape[-2], data.shape[-1], cutoff, data.device, above=True)
    spectrum = torch.fft.fft2(data)
    return float((spectrum.abs() ** 2 * mask).sum())


def quantize(img):
    """Clamp to [0, 1] and snap to the 8-bit grid (round half to even).
    Applied at image export and in file-convention metric paths only."""
    data, template = _unwrap(img)
    out = torch.round(data.clamp(0.0, 1.0) * 255.0) / 255.0
    return _rewrap(out, template)


def read_image(path) -> ImageTensor:
    """Load an 8-bit PNG (or any PIL-readable file) as an RGB ImageTensor."""
    with Image.open(path) as handle:
        arr = np.asarray(handle.convert("RGB"), dtype=np.float32) / 255.0
    data = torch.from_numpy(arr).permute(2, 0, 1).contiguous()
    return ImageTensor(data, COLOR_RGB)


def write_image(img, path) -> None:
    """Quantize and write an image as 8-bit PNG (RGB or grayscale)."""
    data, template = _unwrap(img)
    if data.ndim == 4:
        if data.shape[0] != 1:
            raise ValueError("write_image expects a single image")
        data = data[0]
    arr = (quantize(data).detach().cpu().numpy() * 255.0).round().astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    elif arr.shape[0] == 3:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)
    else:
        raise ValueError(f"cannot write image with {arr.shape[0]} channels")
