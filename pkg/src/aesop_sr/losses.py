"""Training objectives.

Two generator objectives are supported:

  baseline:  lambda_pix * L_pix   + lambda_percep * L_percep
                                  + lambda_artif * L_artif + lambda_adv * L_adv
  aesop:     lambda_aesop * L_aesop + the same three perceptual-side terms

L_pix is the elementwise p-norm distance in pixel space.  L_aesop is the
same distance measured between the outputs of a frozen pretrained
autoencoder applied to both images (the space after the decoder, not the
bottleneck).  Because the AE's bottleneck matches the LR dimensionality and
it was pretrained with an elementwise loss, its output keeps only the
component of an image that elementwise regression can pin down; distances
in that space penalize misalignment of those components while ignoring the
stochastic texture component that elementwise losses would otherwise blur
away.  The aesop objective substitutes the pixel term (it is not added on
top), and its default weight is 1 versus the conventional 0.01 for the
pixel term.

All image losses are means over elements so coefficients transfer across
patch sizes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .autoencoder import AEState
from .exceptions import FrozenModelError
from .images import ImageTensor
from .networks import ModelState, init_weights

MODE_BASELINE = "baseline"
MODE_AESOP = "aesop"


@dataclass(frozen=True)
class LossConfig:
    """Objective selection and coefficients.  Exactly one reconstruction term
    is active per mode: the pixel term in baseline mode, the auto-encoded
    term in aesop mode.  0.005 is bound to the adversarial term in both."""

    mode: str = MODE_AESOP
    lambda_aesop: float = 1.0
    lambda_pix: float = 0.01
    lambda_percep: float = 1.0
    lambda_adv: float = 0.005
    lambda_artif: float = 1.0
    p: int = 1

    def __post_init__(self):
        if self.mode not in (MODE_BASELINE, MODE_AESOP):
            raise ValueError(f"unknown loss mode {self.mode!r}")
        if self.p not in (1, 2):
            raise ValueError("p must be 1 or 2")


@dataclass
class LossBreakdown:
    """Per-step record of weighted loss contributions.

    The reported fields are coefficient * term, so the generator-side fields
    (aesop, pix, percep, adv_g, artif) sum to ``total`` exactly; adv_d is the
    discriminator's own objective and is excluded from the sum.  The live
    tensors used for backprop ride along outside comparison/serialization."""

    step: int
    aesop: float = 0.0
    pix: float = 0.0
    percep: float = 0.0
    adv_g: float = 0.0
    adv_d: float = 0.0
    artif: float = 0.0
    total: float = 0.0
    generator_total: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)
    discriminator_total: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    CSV_FIELDS = ("step", "aesop", "pix", "percep", "adv_g", "adv_d", "artif", "total")

    def csv_row(self) -> list:
        return [getattr(self, name) for name in self.CSV_FIELDS]


def _as_tensor(img) -> torch.Tensor:
    return img.data if isinstance(img, ImageTensor) else img


def _p_distance(a: torch.Tensor, b: torch.Tensor, p: int) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    diff = a - b
    return diff.abs().mean() if p == 1 else (diff ** 2).mean()


def loss_pix(sr, hr, p: int = 1) -> torch.Tensor:
    """Elementwise reconstruction loss: mean |sr - hr| (p=1) or mean squared
    difference (p=2)."""
    return _p_distance(_as_tensor(sr), _as_tensor(hr), p)


def loss_aesop(sr, hr, ae: AEState, p: int = 1) -> torch.Tensor:
    """Reconstruction loss in the auto-encoded space.

    Both images pass through the full frozen AE (decoder output space);
    gradients flow through the AE to ``sr`` only.  An unfrozen AE is refused:
    if the AE could adapt during SR training it would collapse to a constant
    output and zero the loss."""
    if not ae.frozen:
        raise FrozenModelError("loss_aesop requires a frozen autoencoder")
    sr_t, hr_t = _as_tensor(sr), _as_tensor(hr)
    if sr_t.shape != hr_t.shape:
        raise ValueError(f"shape mismatch {tuple(sr_t.shape)} vs {tuple(hr_t.shape)}")
    encoded_sr = ae.reconstruct(sr_t)
    with torch.no_grad():
        encoded_hr = ae.reconstruct(hr_t)
    return _p_distance(encoded_sr, encoded_hr, p)


@dataclass(frozen=True)
class FeatureExtractorConfig:
    """Fixed-seed random conv stack used as the desk-scale perceptual feature
    extractor (random features avoid a pretrained-weights dependency); a
    checkpoint of the same shape can be supplied for externally trained
    weights."""

    channels: tuple[int, ...] = (16, 32, 32, 64, 64)
    seed: int = 0


class RandomConvFeatures(nn.Module):
    def __init__(self, cfg: FeatureExtractorConfig):
        super().__init__()
        self.cfg = cfg
        layers = []
        in_ch = 3
        for i, out_ch in enumerate(cfg.channels):
            stride = 2 if i % 2 == 1 else 1
            layers.append(nn.Conv2d(in_ch, out_ch, 3, stride, 1))
            in_ch = out_ch
        self.convs = nn.ModuleList(layers)
        self.act = nn.LeakyReLU(0.2, inplace=False)

    def forward(self, x) -> list[torch.Tensor]:
        feats = []
        out = x
        for conv in self.convs:
            out = self.act(conv(out))
            feats.append(out)
        return feats


def build_extractor(cfg: FeatureExtractorConfig = FeatureExtractorConfig(),
                    checkpoint: str | None = None) -> ModelState:
    module = RandomConvFeatures(cfg)
    init_weights(module, cfg.seed, conv_scale=1.0)
    if checkpoint is not None:
        from .checkpoints import read_container

        _, arrays = read_container(checkpoint)
        state = {k: torch.from_numpy(v.copy()) for k, v in arrays.items()}
        module.load_state_dict(state, strict=True)
    state = ModelState(module, kind="extractor", config=cfg)
    state.freeze()
    return state


def _extract(extractor, x) -> list[torch.Tensor]:
    module = extractor.module if isinstance(extractor, ModelState) else extractor
    return module(x)


def loss_perceptual(sr, hr, extractor) -> torch.Tensor:
    """Mean L1 distance between deep feature maps, averaged over taps."""
    if extractor is None:
        raise ValueError("perceptual loss requires a feature extractor")
    if isinstance(extractor, ModelState) and not extractor.frozen:
        raise FrozenModelError("perceptual extractor must be frozen")
    sr_feats = _extract(extractor, _as_tensor(sr))
    with torch.no_grad():
        hr_feats = _extract(extractor, _as_tensor(hr))
    losses = [(a - b).abs().mean() for a, b in zip(sr_feats, hr_feats)]
    return torch.stack(losses).mean()


def loss_adversarial(sr, hr, disc) -> tuple[torch.Tensor, torch.Tensor]:
    """Relativistic average adversarial pair.

    The generator loss pushes the critic's score of ``sr`` above the mean
    score of ``hr`` (and vice versa); the discriminator loss is the mirror
    image with ``sr`` detached.  Under matched sr/hr distributions both
    losses sit at 2*log(2) in expectation."""
    module = disc.module if isinstance(disc, ModelState) else disc
    sr_t, hr_t = _as_tensor(sr), _as_tensor(hr)

    pred_fake = module(sr_t)
    with torch.no_grad():  # hr carries no gradient and D is not updated here
        pred_real = module(hr_t)
    ones = torch.ones_like(pred_fake)
    zeros = torch.zeros_like(pred_fake)
    g_loss = F.binary_cross_entropy_with_logits(
        pred_fake - pred_real.mean(), ones
    ) + F.binary_cross_entropy_with_logits(pred_real - pred_fake.mean(), zeros)

    pred_fake_d = module(sr_t.detach())
    pred_real_d = module(hr_t)
    d_loss = F.binary_cross_entropy_with_logits(
        pred_real_d - pred_fake_d.mean(), ones
    ) + F.binary_cross_entropy_with_logits(pred_fake_d - pred_real_d.mean(), zeros)
    return g_loss, d_loss


def artifact_weight_map(sr: torch.Tensor, hr: torch.Tensor, window: int = 7,
                        eps: float = 1e-12) -> torch.Tensor:
    """Artifact weighting used by :func:`loss_artifact`.

    weight = (var_batchwise(residual) + eps)^(1/5)
           * (local_var_window(residual) + eps)^(1/5)

    where residual is the channel-summed absolute difference and the local
    variance is taken over ``window`` x ``window`` neighborhoods.  Spiky
    residuals (GAN artifacts) get large weights; smooth residuals do not."""
    residual = (sr - hr).abs().sum(dim=1, keepdim=True)
    pad = window // 2
    mean = F.avg_pool2d(residual, window, stride=1, padding=pad, count_include_pad=False)
    mean_sq = F.avg_pool2d(residual ** 2, window, stride=1, padding=pad, count_include_pad=False)
    local_var = (mean_sq - mean ** 2).clamp_min(0.0)
    patch_var = residual.var(dim=(1, 2, 3), keepdim=True, unbiased=False)
    return (patch_var + eps) ** 0.2 * (local_var + eps) ** 0.2


def loss_artifact(sr, hr, ref_residual: torch.Tensor | None = None,
                  window: int = 7) -> torch.Tensor:
    """Residual penalty weighted by the local-variance artifact map.

    When ``ref_residual`` (a residual map from a reference prediction) is
    given, pixels already closer than the reference are exempted."""
    sr_t, hr_t = _as_tensor(sr), _as_tensor(hr)
    if sr_t.shape != hr_t.shape:
        raise ValueError(f"shape mismatch {tuple(sr_t.shape)} vs {tuple(hr_t.shape)}")
    weight = artifact_weight_map(sr_t, hr_t, window)
    if ref_residual is not None:
        residual = (sr_t - hr_t).abs().sum(dim=1, keepdim=True)
        weight = torch.where(residual < ref_residual, torch.zeros_like(weight), weight)
    return (weight * (sr_t - hr_t).abs()).mean()


def total_loss(
    cfg: LossConfig,
    sr,
    hr,
    ae: AEState | None = None,
    extractor=None,
    discriminator=None,
    step: int = 0,
) -> LossBreakdown:
    """Assemble the full objective for one step.

    In aesop mode there is no pixel-space term anywhere in the objective;
    the auto-encoded term replaces it."""
    breakdown = LossBreakdown(step=step)
    zero = torch.zeros((), dtype=_as_tensor(sr).dtype)
    terms: list[torch.Tensor] = []

    if cfg.mode == MODE_AESOP:
        if cfg.lambda_aesop != 0.0:
            if ae is None:
                raise ValueError("aesop mode requires an autoencoder")
            term = cfg.lambda_aesop * loss_aesop(sr, hr, ae, cfg.p)
            breakdown.aesop = float(term.detach())
            terms.append(term)
    else:
        if cfg.lambda_pix != 0.0:
            term = cfg.lambda_pix * loss_pix(sr, hr, cfg.p)
            breakdown.pix = float(term.detach())
            terms.append(term)

    if cfg.lambda_percep != 0.0:
        term = cfg.lambda_percep * loss_perceptual(sr, hr, extractor)
        breakdown.percep = float(term.detach())
        terms.append(term)

    if cfg.lambda_artif != 0.0:
        term = cfg.lambda_artif * loss_artifact(sr, hr)
        breakdown.artif = float(term.detach())
        terms.append(term)

    if cfg.lambda_adv != 0.0:
        if discriminator is None:
            raise ValueError("adversarial term requires a discriminator")
        g_loss, d_loss = loss_adversarial(sr, hr, discriminator)
        term = cfg.lambda_adv * g_loss
        breakdown.adv_g = float(term.detach())
        breakdown.adv_d = float(d_loss.detach())
        terms.append(term)
        breakdown.discriminator_total = d_loss

    breakdown.generator_total = torch.stack(terms).sum() if terms else zero
    breakdown.total = breakdown.aesop + breakdown.pix + breakdown.percep + breakdown.adv_g + breakdown.artif
    return breakdown
