"""Autoencoder pretraining and the frozen-AE contract.

The encoder maps an HR image to its LR-sized counterpart; the decoder (an
RRDB generator) maps it back.  Pretraining jointly minimizes, with unit
weights and p = 1,

    ||encoder(hr) - lr||_1  +  ||decoder(encoder(hr)) - hr||_1

so the bottleneck tracks the true LR image while the encoder still receives
gradients from the reconstruction term (the guard against a collapsed
bottleneck that would zero the supervision signal for any output that merely
downsamples correctly).  After pretraining the AE is frozen; the supervision
loss refuses unfrozen AEs, since an AE that can still move admits the trivial
constant-output solution."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import PairedDataset, sample_patch_batch
from .exceptions import TrainingDivergedError
from .images import ImageTensor, ResampleSpec, bicubic_downsample
from .networks import (
    EncoderConfig,
    GeneratorConfig,
    ModelState,
    build_encoder,
    build_generator,
)


@dataclass
class AEState:
    """Encoder/decoder pair with the freeze flag the loss contract checks."""

    encoder: ModelState
    decoder: ModelState
    pretrain_step: int = 0
    frozen: bool = False

    def __post_init__(self):
        if self.encoder.config.scale != self.decoder.config.scale:
            raise ValueError(
                f"encoder scale {self.encoder.config.scale} != decoder scale {self.decoder.config.scale}"
            )

    @property
    def scale(self) -> int:
        return self.encoder.config.scale

    def bottleneck(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder.module(x)

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder.module(self.encoder.module(x))

    def __call__(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        bottleneck = self.encoder.module(x)
        return bottleneck, self.decoder.module(bottleneck)

    def checksum(self) -> str:
        return self.encoder.checksum() + self.decoder.checksum()

    def parameters(self):
        yield from self.encoder.module.parameters()
        yield from self.decoder.module.parameters()


def ae_forward(ae: AEState, img):
    """Run the full AE; returns (bottleneck, reconstruction).

    Bottleneck spatial dims equal the LR dims (input dims / scale); the
    reconstruction matches the input dims.  Differentiable end to end."""
    if isinstance(img, ImageTensor):
        bottleneck, recon = ae(img.batched())
        if not img.is_batched:
            bottleneck, recon = bottleneck.squeeze(0), recon.squeeze(0)
        return img.with_data(bottleneck), img.with_data(recon)
    return ae(img)


def freeze_ae(ae: AEState) -> AEState:
    """Flag the AE frozen and disable its gradients; idempotent.  Freezing an
    AE that never completed pretraining is permitted (with a warning) so
    ablations can use raw AEs."""
    if ae.pretrain_step == 0 and not ae.frozen:
        warnings.warn("freezing an autoencoder that has not been pretrained", stacklevel=2)
    ae.encoder.freeze()
    ae.decoder.freeze()
    ae.frozen = True
    return ae


@dataclass
class AEPretrainConfig:
    scale: int = 2
    steps: int = 2000
    batch_size: int = 4
    hr_patch: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    encoder_channels: int = 32
    decoder: GeneratorConfig | None = None
    decoder_init_checkpoint: str | None = None
    augment: bool = True
    log_interval: int = 50

    def __post_init__(self):
        if self.decoder is None:
            self.decoder = GeneratorConfig(scale=self.scale)
        if self.decoder.scale != self.scale:
            raise ValueError("decoder scale must match pretrain scale")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(scale=self.scale, rrdb_channels=self.encoder_channels)


@dataclass
class AEPretrainResult:
    ae: AEState
    initial_hr_loss: float
    final_hr_loss: float
    log_rows: list[tuple[int, float, float, float]] = field(default_factory=list)


def pretrain_ae(
    dataset: PairedDataset,
    cfg: AEPretrainConfig,
    log_path: str | None = None,
    train_indices: list[int] | None = None,
) -> AEPretrainResult:
    """Pretrain encoder and decoder jointly and return the frozen AE.

    Batches are drawn statelessly per step from (seed, step), so a rerun with
    the same seed reproduces the loss log bit for bit."""
    if dataset.scale != cfg.scale:
        raise ValueError(f"dataset scale {dataset.scale} != config scale {cfg.scale}")
    encoder = build_encoder(cfg.encoder_config(), seed=cfg.seed)
    if cfg.decoder_init_checkpoint:
        decoder = build_generator(
            cfg.decoder, init="pretrained_checkpoint", checkpoint=cfg.decoder_init_checkpoint
        )
        decoder.frozen = False
        for param in decoder.module.parameters():
            param.requires_grad_(True)
        decoder.module.train()
    else:
        decoder = build_generator(cfg.decoder, seed=cfg.seed + 1)
    optimizer = torch.optim.Adam(
        list(encoder.module.parameters()) + list(decoder.module.parameters()),
        lr=cfg.learning_rate,
    )

    rows: list[tuple[int, float, float, float]] = []
    initial_hr = float("nan")
    final_hr = float("nan")
    for step in range(1, cfg.steps + 1):
        rng = np.random.default_rng((cfg.seed, step))
        hr, lr = sample_patch_batch(
            dataset, cfg.hr_patch, cfg.batch_size, rng,
            augment=cfg.augment, indices=train_indices,
        )
        bottleneck = encoder.module(hr)
        recon = decoder.module(bottleneck)
        lr_rec = (bottleneck - lr).abs().mean()
        hr_rec = (recon - hr).abs().mean()
        loss = lr_rec + hr_rec
        if not torch.isfinite(loss):
            raise TrainingDivergedError(
                f"autoencoder pretraining diverged at step {step} "
                f"(lr_rec={float(lr_rec.detach())!r}, hr_rec={float(hr_rec.detach())!r})",
                step,
            )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if step == 1:
            initial_hr = float(hr_rec.detach())
        final_hr = float(hr_rec.detach())
        rows.append((step, float(lr_rec.detach()), float(hr_rec.detach()), float(loss.detach())))

    if log_path is not None:
        _write_log(log_path, rows)
    ae = AEState(encoder=encoder, decoder=decoder, pretrain_step=cfg.steps)
    freeze_ae(ae)
    return AEPretrainResult(ae=ae, initial_hr_loss=initial_hr, final_hr_loss=final_hr, log_rows=rows)


def encoder_lr_error(ae: AEState, dataset: PairedDataset, indices=None) -> float:
    """Mean |encoder(hr) - lr| over full images.  On datasets prepared by
    this package the bicubic reference (:func:`bicubic_lr_error`) differs
    from the stored LR only through 8-bit quantization."""
    errors = []
    with torch.no_grad():
        for i in indices if indices is not None else range(len(dataset)):
            hr, lr = dataset.load_pair(i)
            est = ae.bottleneck(hr.batched())
            errors.append(float((est - lr.batched()).abs().mean()))
    return float(np.mean(errors))


def bicubic_lr_error(dataset: PairedDataset, indices=None) -> float:
    spec = ResampleSpec(scale=dataset.scale)
    errors = []
    for i in indices if indices is not None else range(len(dataset)):
        hr, lr = dataset.load_pair(i)
        est = bicubic_downsample(hr.batched(), spec)
        errors.append(float((est - lr.batched()).abs().mean()))
    return float(np.mean(errors))


def _write_log(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["step", "lr_reconstruction", "hr_reconstruction", "total"])
        for row in rows:
            writer.writerow([row[0], f"{row[1]:.10e}", f"{row[2]:.10e}", f"{row[3]:.10e}"])
