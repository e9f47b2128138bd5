"""Quantitative metrics and analysis outputs.

PSNR/SSIM follow the standard SR evaluation convention: computed on the
luminance channel with a border crop of ``scale`` pixels.  Two companion
diagnostics target the reconstruction objective itself:

  * AE-PSNR: PSNR between the frozen autoencoder's outputs on SR and HR --
    alignment of the regressable component, with stochastic texture removed;
  * LR-PSNR: PSNR between downsampled SR and the original LR input -- an
    AE-independent consistency score.

Metric values of identical inputs are +inf; CSV output stores the 1e9
sentinel so logs stay numeric.  File-convention paths snap inputs to the
8-bit grid first (``quantize=True``) so in-memory results match evaluating
saved PNG files exactly; the pure functions default to unquantized math.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .images import (
    ImageTensor,
    ResampleSpec,
    bicubic_downsample,
    highfreq_energy,
    lowpass_filter,
    quantize,
    rgb_to_y,
    spectral_magnitude,
    write_image,
)

PSNR_INF_SENTINEL = 1e9


@dataclass(frozen=True)
class MetricRecord:
    metric: str
    value: float
    dataset_id: str = ""
    image_id: str = ""
    checkpoint_id: str = ""
    metadata: dict = field(default_factory=dict)


def _prep(img, on_y: bool, border: int, do_quantize: bool) -> torch.Tensor:
    data = img.data if isinstance(img, ImageTensor) else torch.as_tensor(img)
    if data.ndim == 3:
        data = data.unsqueeze(0)
    if do_quantize:
        data = quantize(data)
    if on_y and data.shape[1] == 3:
        data = rgb_to_y(data)
    if border:
        if border >= min(data.shape[-2], data.shape[-1]) / 2:
            raise ValueError(f"border {border} too large for {tuple(data.shape[-2:])}")
        data = data[..., border:-border, border:-border]
    return data


def psnr(a, b, on_y: bool = True, border: int = 0, quantize: bool = False) -> float:
    """10*log10(1 / MSE) on [0, 1] data; +inf for identical inputs."""
    ta = _prep(a, on_y, border, quantize)
    tb = _prep(b, on_y, border, quantize)
    if ta.shape != tb.shape:
        raise ValueError(f"shape mismatch {tuple(ta.shape)} vs {tuple(tb.shape)}")
    mse = float(((ta.double() - tb.double()) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return (g[:, None] * g[None, :]).unsqueeze(0).unsqueeze(0)


def ssim(a, b, on_y: bool = True, quantize: bool = False) -> float:
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), K1=0.01,
    K2=0.03, dynamic range 1."""
    ta = _prep(a, on_y, 0, quantize).double()
    tb = _prep(b, on_y, 0, quantize).double()
    if ta.shape != tb.shape:
        raise ValueError(f"shape mismatch {tuple(ta.shape)} vs {tuple(tb.shape)}")
    window = _gaussian_window()
    if min(ta.shape[-2], ta.shape[-1]) < window.shape[-1]:
        raise ValueError("image smaller than the SSIM window")
    channels = ta.shape[1]
    kernel = window.expand(channels, 1, -1, -1)
    conv = lambda x: torch.nn.functional.conv2d(x, kernel, groups=channels)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu_a, mu_b = conv(ta), conv(tb)
    var_a = conv(ta * ta) - mu_a ** 2
    var_b = conv(tb * tb) - mu_b ** 2
    cov = conv(ta * tb) - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    )
    return float(ssim_map.mean())


def ae_psnr(sr, hr, ae, border: int | None = None) -> float:
    """PSNR between the frozen AE's outputs on sr and hr (luminance, border
    crop defaulting to the AE scale)."""
    sr_t = sr.data if isinstance(sr, ImageTensor) else torch.as_tensor(sr)
    hr_t = hr.data if isinstance(hr, ImageTensor) else torch.as_tensor(hr)
    if sr_t.ndim == 3:
        sr_t, hr_t = sr_t.unsqueeze(0), hr_t.unsqueeze(0)
    with torch.no_grad():
        enc_sr = ae.reconstruct(sr_t)
        enc_hr = ae.reconstruct(hr_t)
    if border is None:
        border = int(ae.scale)
    return psnr(enc_sr, enc_hr, on_y=True, border=border)


def lr_psnr(sr, lr_ref, spec: ResampleSpec, quantize: bool = True) -> float:
    """PSNR between the downsampled SR image and the reference LR (luminance,
    border 1).  Quantized by default to match file-based LR storage, which
    makes the score +inf whenever sr is the HR the LR file was derived from."""
    sr_t = sr.data if isinstance(sr, ImageTensor) else torch.as_tensor(sr)
    if sr_t.ndim == 3:
        sr_t = sr_t.unsqueeze(0)
    down = bicubic_downsample(sr_t, spec)
    return psnr(down, lr_ref, on_y=True, border=1, quantize=quantize)


def _normalized_map(data: torch.Tensor) -> tuple[torch.Tensor, float]:
    scale = float(data.max())
    if scale <= 0:
        return torch.zeros_like(data), 0.0
    return data / scale, scale


def export_loss_maps(sr, hr, ae, out_dir) -> dict[str, str]:
    """Write the diagnostic maps comparing pixel-space and AE-space residuals.

    Emits: the raw |sr-hr| map, the |AE(sr)-AE(hr)| map, the AE output of hr
    (the regressable-component image), and the positive part of their
    difference (a proxy for the texture-variance component the AE-space loss
    ignores).  Maps are normalized to [0, 1]; scales go to scales.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sr_t = sr.data if isinstance(sr, ImageTensor) else torch.as_tensor(sr)
    hr_t = hr.data if isinstance(hr, ImageTensor) else torch.as_tensor(hr)
    if sr_t.ndim == 3:
        sr_t, hr_t = sr_t.unsqueeze(0), hr_t.unsqueeze(0)
    with torch.no_grad():
        enc_sr = ae.reconstruct(sr_t)
        enc_hr = ae.reconstruct(hr_t)

    pix_map = (sr_t - hr_t).abs().mean(dim=1, keepdim=True)[0]
    ae_map = (enc_sr - enc_hr).abs().mean(dim=1, keepdim=True)[0]
    variance_proxy = (pix_map - ae_map).clamp_min(0.0)

    paths: dict[str, str] = {}
    scales: dict[str, float] = {}
    for name, tensor in (
        ("pixel_residual", pix_map),
        ("ae_residual", ae_map),
        ("ae_bias_image", enc_hr[0]),
        ("variance_proxy", variance_proxy),
    ):
        if name == "ae_bias_image":
            normalized, scale = tensor.clamp(0.0, 1.0), 1.0
        else:
            normalized, scale = _normalized_map(tensor)
        path = out / f"{name}.png"
        write_image(normalized, path)
        paths[name] = str(path)
        scales[name] = scale
    scales_path = out / "scales.json"
    scales_path.write_text(json.dumps(scales, indent=2, sort_keys=True))
    paths["scales"] = str(scales_path)
    return paths


@dataclass
class SpectralReport:
    cutoff: float
    ae_retention: float
    lowpass_retention: float
    spectra: dict[str, torch.Tensor] = field(default_factory=dict)


def spectral_report(img, ae, cutoff: float = 0.125, out_dir=None) -> SpectralReport:
    """Compare the AE against an ideal low-pass filter in the spectral domain.

    Retention = spectral energy above the cutoff after the operator, divided
    by the input's energy above the cutoff.  The ideal filter retains nothing
    by construction; a trained AE keeps the regressable high-frequency
    structure (edges), which is the property that separates it from any
    band-limiting filter."""
    data = img.data if isinstance(img, ImageTensor) else torch.as_tensor(img)
    if data.ndim == 3:
        data = data.unsqueeze(0)
    luma = rgb_to_y(data) if data.shape[1] == 3 else data
    with torch.no_grad():
        ae_out = ae.reconstruct(data)
    ae_luma = rgb_to_y(ae_out) if ae_out.shape[1] == 3 else ae_out
    lp_luma = lowpass_filter(luma, cutoff)

    input_hf = highfreq_energy(luma[0], cutoff)
    ae_hf = highfreq_energy(ae_luma[0], cutoff)
    lp_hf = highfreq_energy(lp_luma[0], cutoff)
    denom = max(input_hf, 1e-30)

    spectra = {
        "original": spectral_magnitude(luma[0]),
        "autoencoded": spectral_magnitude(ae_luma[0]),
        "lowpass": spectral_magnitude(lp_luma[0]),
    }
    spectra["difference"] = (spectra["autoencoded"] - spectra["lowpass"]).abs()
    report = SpectralReport(
        cutoff=cutoff,
        ae_retention=ae_hf / denom,
        lowpass_retention=lp_hf / denom,
        spectra=spectra,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, spec_map in report.spectra.items():
            normalized, _ = _normalized_map(spec_map.unsqueeze(0))
            write_image(normalized, out / f"spectrum_{name}.png")
        (out / "retention.json").write_text(
            json.dumps(
                {
                    "cutoff": cutoff,
                    "ae_retention": report.ae_retention,
                    "lowpass_retention": report.lowpass_retention,
                },
                indent=2,
                sort_keys=True,
            )
        )
    return report


def proxy_perception_score(sr, hr, extractor, cutoff: float = 0.125) -> float:
    """Desk-scale stand-in for learned perceptual metrics (documented, not a
    drop-in): the negative feature distance, amplified by the image's deficit
    in retained high-frequency energy relative to the reference.  Blurrier
    outputs therefore score strictly worse.  Less negative is better."""
    from .losses import loss_perceptual

    with torch.no_grad():
        feat = float(loss_perceptual(sr, hr, extractor))
    sr_t = sr.data if isinstance(sr, ImageTensor) else torch.as_tensor(sr)
    hr_t = hr.data if isinstance(hr, ImageTensor) else torch.as_tensor(hr)
    hf_sr = highfreq_energy(sr_t[0] if sr_t.ndim == 4 else sr_t, cutoff)
    hf_hr = highfreq_energy(hr_t[0] if hr_t.ndim == 4 else hr_t, cutoff)
    deficit = max(0.0, 1.0 - hf_sr / max(hf_hr, 1e-30))
    return -feat * (1.0 + deficit)


def evaluate_pairs(
    generator,
    dataset,
    indices,
    ae=None,
    extractor=None,
    dataset_id: str = "",
    checkpoint_id: str = "",
) -> list[MetricRecord]:
    """Run the generator over full validation images and collect the metric
    records (PSNR/SSIM on the 8-bit convention, plus AE-PSNR / LR-PSNR when
    the corresponding reference models are supplied)."""
    module = generator.module if hasattr(generator, "module") else generator
    module.eval()
    border = dataset.scale
    meta = {"color_space": "y", "border": border, "quantized": True}
    records: list[MetricRecord] = []
    with torch.no_grad():
        for index in indices:
            hr, lr = dataset.load_pair(index)
            sr = module(lr.batched())
            image_id = dataset.image_id(index)
            common = dict(dataset_id=dataset_id, image_id=image_id, checkpoint_id=checkpoint_id)
            records.append(MetricRecord("psnr", psnr(sr, hr.batched(), border=border, quantize=True),
                                        metadata=meta, **common))
            records.append(MetricRecord("ssim", ssim(sr, hr.batched(), quantize=True),
                                        metadata=meta, **common))
            records.append(MetricRecord("lr_psnr", lr_psnr(sr, lr.batched(), dataset.spec),
                                        metadata={**meta, "border": 1}, **common))
            if ae is not None:
                records.append(MetricRecord("ae_psnr", ae_psnr(sr, hr.batched(), ae),
                                            metadata=meta, **common))
            if extractor is not None:
                records.append(
                    MetricRecord("proxy_perception", proxy_perception_score(sr, hr.batched(), extractor),
                                 metadata={"kind": "hf-weighted feature distance"}, **common)
                )
    return records


def mean_metric(records: list[MetricRecord], name: str) -> float:
    values = [r.value for r in records if r.metric == name and not math.isinf(r.value)]
    if not values:
        raise ValueError(f"no finite records for metric {name!r}")
    return sum(values) / len(values)


def pd_curve_emit(checkpoints: list, dataset, indices, extractor, out_csv) -> list[dict]:
    """Emit one (checkpoint, distortion, perception) row per checkpoint.

    ``checkpoints`` holds (checkpoint_id, training_step, generator) triples;
    rows are sorted by training step.  Distortion is mean PSNR; perception is
    the documented proxy score (not a learned perceptual metric)."""
    rows = []
    for checkpoint_id, step, generator in sorted(checkpoints, key=lambda item: item[1]):
        records = evaluate_pairs(
            generator, dataset, indices, extractor=extractor,
            dataset_id="pd", checkpoint_id=checkpoint_id,
        )
        rows.append(
            {
                "checkpoint": checkpoint_id,
                "step": step,
                "psnr": mean_metric(records, "psnr"),
                "proxy_perception": mean_metric(records, "proxy_perception"),
            }
        )
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["checkpoint", "step", "psnr", "proxy_perception"])
        for row in rows:
            writer.writerow([row["checkpoint"], row["step"],
                             f"{csv_value(row['psnr']):.6f}", f"{row['proxy_perception']:.6f}"])
    return rows


def csv_value(value: float) -> float:
    return PSNR_INF_SENTINEL if math.isinf(value) else value


def write_metric_csv(records: list[MetricRecord], path) -> None:
    """Merge metric records into a CSV, deterministically sorted by
    (dataset, image, metric, checkpoint)."""
    ordered = sorted(records, key=lambda r: (r.dataset_id, r.image_id, r.metric, r.checkpoint_id))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["dataset", "image", "metric", "checkpoint", "value", "metadata"])
        for record in ordered:
            writer.writerow(
                [
                    record.dataset_id,
                    record.image_id,
                    record.metric,
                    record.checkpoint_id,
                    f"{csv_value(record.value):.6f}",
                    json.dumps(record.metadata, sort_keys=True),
                ]
            )
