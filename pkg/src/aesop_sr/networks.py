"""Parametric architectures: RRDB generator (also used as the autoencoder
decoder), the lightweight bottleneck encoder, and a patch discriminator,
plus seeded initialization and the ModelState wrapper used by checkpoints
and freeze contracts.

The decoder family is an extension point: anything with the generator's
LR -> HR forward interface can stand in (AEState only assumes that)."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Any

import torch
import torch.nn.functional as F
from torch import nn

from .images import ResampleSpec, bicubic_upsample


@dataclass(frozen=True)
class GeneratorConfig:
    """RRDB super-resolution generator.  Desk defaults (4 blocks, 32/16
    channels) keep runs in the minutes range; the full-scale preset uses
    23 blocks with 64/32 channels."""

    scale: int = 2
    num_rrdb_blocks: int = 4
    base_channels: int = 32
    growth_channels: int = 16
    # Adds the bicubic upsample of the input to the output so a freshly
    # initialized model already sits near the bicubic baseline; required for
    # desk-scale fidelity pretraining to beat bicubic within budget.
    bicubic_skip: bool = True

    def __post_init__(self):
        if min(self.scale, self.num_rrdb_blocks, self.base_channels, self.growth_channels) < 1:
            raise ValueError("generator config values must be positive")
        if self.scale < 2:
            raise ValueError("scale must be >= 2")


@dataclass(frozen=True)
class EncoderConfig:
    """Bottleneck encoder: two from-RGB convs, pixel-unshuffle, two RRDB
    blocks, two to-RGB convs; all kernels 3x3.  The second from-RGB conv
    emits rrdb_channels / scale^2 channels so the post-unshuffle channel
    count equals rrdb_channels."""

    scale: int = 2
    rrdb_channels: int = 32
    num_rrdb_blocks: int = 2
    kernel_size: int = 3

    def __post_init__(self):
        if self.scale < 2:
            raise ValueError("scale must be >= 2")
        if self.rrdb_channels % (self.scale ** 2) != 0:
            raise ValueError(
                f"rrdb_channels ({self.rrdb_channels}) must be divisible by scale^2 ({self.scale ** 2})"
            )
        if self.num_rrdb_blocks != 2 or self.kernel_size != 3:
            raise ValueError("encoder uses exactly two RRDB blocks and 3x3 kernels")


@dataclass(frozen=True)
class DiscriminatorConfig:
    """VGG-style patch discriminator; depth adapts to the patch size."""

    patch_size: int = 64
    base_channels: int = 32

    MIN_PATCH = 8

    def __post_init__(self):
        if self.patch_size < self.MIN_PATCH:
            raise ValueError(
                f"patch {self.patch_size} smaller than receptive-field minimum {self.MIN_PATCH}"
            )

    @property
    def num_stages(self) -> int:
        return min(3, max(1, int(math.log2(self.patch_size)) - 2))


class ResidualDenseBlock(nn.Module):
    def __init__(self, channels: int, growth: int):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(channels + growth * i, growth, 3, 1, 1) for i in range(4)
        )
        self.conv_last = nn.Conv2d(channels + growth * 4, channels, 3, 1, 1)
        self.act = nn.LeakyReLU(0.2, inplace=True)

    def forward(self, x):
        feats = [x]
        for conv in self.convs:
            feats.append(self.act(conv(torch.cat(feats, dim=1))))
        return self.conv_last(torch.cat(feats, dim=1)) * 0.2 + x


class RRDB(nn.Module):
    """Residual-in-residual dense block: three dense blocks plus a scaled skip."""

    def __init__(self, channels: int, growth: int):
        super().__init__()
        self.blocks = nn.Sequential(
            ResidualDenseBlock(channels, growth),
            ResidualDenseBlock(channels, growth),
            ResidualDenseBlock(channels, growth),
        )

    def forward(self, x):
        return self.blocks(x) * 0.2 + x


def _upsample_factors(scale: int) -> list[int]:
    factors = []
    while scale % 2 == 0:
        factors.append(2)
        scale //= 2
    if scale > 1:
        factors.append(scale)
    return factors


class RRDBGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        nf, gc = cfg.base_channels, cfg.growth_channels
        self.conv_first = nn.Conv2d(3, nf, 3, 1, 1)
        self.body = nn.Sequential(*(RRDB(nf, gc) for _ in range(cfg.num_rrdb_blocks)))
        self.trunk_conv = nn.Conv2d(nf, nf, 3, 1, 1)
        self.upsample_convs = nn.ModuleList(nn.Conv2d(nf, nf, 3, 1, 1) for _ in _upsample_factors(cfg.scale))
        self.conv_hr = nn.Conv2d(nf, nf, 3, 1, 1)
        self.conv_last = nn.Conv2d(nf, 3, 3, 1, 1)
        self.act = nn.LeakyReLU(0.2, inplace=True)
        self._resample = ResampleSpec(scale=cfg.scale)

    def head(self, features: torch.Tensor) -> torch.Tensor:
        """Upsampling head applied to trunk features (the path that remains
        when every RRDB block is zeroed)."""
        out = features
        for factor, conv in zip(_upsample_factors(self.cfg.scale), self.upsample_convs):
            out = self.act(conv(F.interpolate(out, scale_factor=factor, mode="nearest")))
        return self.conv_last(self.act(self.conv_hr(out)))

    def forward(self, x):
        features = self.conv_first(x)
        features = features + self.trunk_conv(self.body(features))
        out = self.head(features)
        if self.cfg.bicubic_skip:
            out = out + bicubic_upsample(x, self._resample)
        return out


class BottleneckEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.rrdb_channels
        pre_unshuffle = ch // cfg.scale ** 2
        self.from_rgb1 = nn.Conv2d(3, ch, 3, 1, 1)
        self.from_rgb2 = nn.Conv2d(ch, pre_unshuffle, 3, 1, 1)
        self.body = nn.Sequential(*(RRDB(ch, ch // 2) for _ in range(cfg.num_rrdb_blocks)))
        self.to_rgb1 = nn.Conv2d(ch, ch, 3, 1, 1)
        self.to_rgb2 = nn.Conv2d(ch, 3, 3, 1, 1)
        self.act = nn.LeakyReLU(0.2, inplace=True)

    def forward(self, x):
        if x.shape[-2] % self.cfg.scale or x.shape[-1] % self.cfg.scale:
            raise ValueError(
                f"encoder input dims {tuple(x.shape[-2:])} not divisible by scale {self.cfg.scale}"
            )
        out = self.act(self.from_rgb1(x))
        out = self.from_rgb2(out)
        out = F.pixel_unshuffle(out, self.cfg.scale)
        out = self.body(out)
        return self.to_rgb2(self.act(self.to_rgb1(out)))


def _group_norm(channels: int) -> nn.GroupNorm:
    groups = 8
    while channels % groups:
        groups //= 2
    return nn.GroupNorm(max(groups, 1), channels)


class PatchDiscriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.base_channels
        layers: list[nn.Module] = [nn.Conv2d(3, ch, 3, 1, 1), nn.LeakyReLU(0.2, inplace=True)]
        for _ in range(cfg.num_stages):
            next_ch = min(ch * 2, 256)
            layers += [
                nn.Conv2d(ch, next_ch, 3, 2, 1),
                _group_norm(next_ch),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            ch = next_ch
        layers.append(nn.Conv2d(ch, 1, 3, 1, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        if min(x.shape[-2:]) < self.cfg.MIN_PATCH:
            raise ValueError(
                f"input {tuple(x.shape[-2:])} below receptive-field minimum {self.cfg.MIN_PATCH}"
            )
        return self.net(x)


def init_weights(module: nn.Module, seed: int, conv_scale: float = 0.1) -> None:
    """Seeded Kaiming init; residual-block convs are scaled down so a fresh
    trunk starts close to the identity."""
    gen = torch.Generator().manual_seed(seed)
    for submodule in module.modules():
        if isinstance(submodule, nn.Conv2d):
            fan_in = submodule.in_channels * submodule.kernel_size[0] * submodule.kernel_size[1]
            std = math.sqrt(2.0 / fan_in)
            with torch.no_grad():
                submodule.weight.copy_(
                    torch.randn(submodule.weight.shape, generator=gen) * std * conv_scale
                )
                if submodule.bias is not None:
                    submodule.bias.zero_()


@dataclass
class ModelState:
    """A network plus the metadata the freeze and checkpoint contracts need."""

    module: nn.Module
    kind: str
    config: Any
    frozen: bool = False
    training_step: int = 0

    def fingerprint(self) -> str:
        return config_fingerprint(self.kind, self.config)

    def checksum(self) -> str:
        """Digest over all parameters and buffers; byte-identical state gives
        an identical checksum."""
        digest = hashlib.sha256()
        for name, tensor in sorted(self.module.state_dict().items()):
            digest.update(name.encode())
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()

    def freeze(self) -> "ModelState":
        """Disable gradients and training-mode behavior; idempotent."""
        for param in self.module.parameters():
            param.requires_grad_(False)
        self.module.eval()
        self.frozen = True
        return self


def config_fingerprint(kind: str, config: Any) -> str:
    payload = json.dumps({"kind": kind, "config": asdict(config)}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def build_generator(
    cfg: GeneratorConfig,
    init: str = "random",
    seed: int = 0,
    checkpoint: str | None = None,
) -> ModelState:
    """Construct a generator; ``init="pretrained_checkpoint"`` loads weights
    from a checkpoint whose config fingerprint must match ``cfg``."""
    module = RRDBGenerator(cfg)
    if init == "random":
        init_weights(module, seed)
        return ModelState(module, kind="generator", config=cfg)
    if init == "pretrained_checkpoint":
        if checkpoint is None:
            raise ValueError("pretrained init requires a checkpoint path")
        from .checkpoints import load_model  # late import; checkpoints depends on this module

        loaded = load_model(checkpoint, expected_fingerprint=config_fingerprint("generator", cfg))
        return loaded
    raise ValueError(f"unknown init {init!r}")


def build_encoder(cfg: EncoderConfig, init: str = "random", seed: int = 0) -> ModelState:
    if init != "random":
        raise ValueError(f"unknown init {init!r}")
    module = BottleneckEncoder(cfg)
    init_weights(module, seed)
    return ModelState(module, kind="encoder", config=cfg)


def build_discriminator(patch_size: int, base_channels: int = 32, seed: int = 0) -> ModelState:
    cfg = DiscriminatorConfig(patch_size=patch_size, base_channels=base_channels)
    module = PatchDiscriminator(cfg)
    init_weights(module, seed, conv_scale=1.0)
    return ModelState(module, kind="discriminator", config=cfg)
