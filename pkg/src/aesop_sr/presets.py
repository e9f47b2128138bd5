"""Named configuration presets.

``desk`` keeps every run in the minutes range on a single CPU core while
preserving all architectural mechanisms; ``full`` carries the full-scale
constants (300K SR steps, 100K AE steps, patch 128, 23-block generator at
64/32 channels, learning rate 1e-4) for hardware that can afford them.
"""

from __future__ import annotations

from .autoencoder import AEPretrainConfig
from .losses import LossConfig
from .networks import GeneratorConfig
from .training import FidelityPretrainConfig, TrainRunConfig

PRESET_NAMES = ("desk", "full")


def generator_preset(name: str, scale: int) -> GeneratorConfig:
    if name == "desk":
        return GeneratorConfig(scale=scale, num_rrdb_blocks=4, base_channels=32, growth_channels=16)
    if name == "full":
        return GeneratorConfig(
            scale=scale, num_rrdb_blocks=23, base_channels=64, growth_channels=32, bicubic_skip=False
        )
    raise ValueError(f"unknown preset {name!r}")


def ae_pretrain_preset(name: str, scale: int, seed: int = 0) -> AEPretrainConfig:
    if name == "desk":
        return AEPretrainConfig(
            scale=scale, steps=2000, batch_size=4, hr_patch=32, learning_rate=1e-3, seed=seed,
            decoder=generator_preset("desk", scale),
        )
    if name == "full":
        return AEPretrainConfig(
            scale=scale, steps=100_000, batch_size=16, hr_patch=128, learning_rate=1e-4, seed=seed,
            decoder=generator_preset("full", scale),
        )
    raise ValueError(f"unknown preset {name!r}")


def fidelity_preset(name: str, scale: int, seed: int = 0) -> FidelityPretrainConfig:
    if name == "desk":
        return FidelityPretrainConfig(
            scale=scale, steps=800, batch_size=4, hr_patch=32, learning_rate=1e-3, seed=seed,
            generator=generator_preset("desk", scale),
        )
    if name == "full":
        return FidelityPretrainConfig(
            scale=scale, steps=300_000, batch_size=16, hr_patch=128, learning_rate=1e-4, seed=seed,
            generator=generator_preset("full", scale),
        )
    raise ValueError(f"unknown preset {name!r}")


def train_preset(name: str, mode: str, scale: int, seed: int = 0) -> TrainRunConfig:
    if name == "desk":
        return TrainRunConfig(
            mode=mode, scale=scale, steps=2000, batch_size=4, hr_patch=32,
            learning_rate=1e-4, seed=seed,
            generator=generator_preset("desk", scale), loss=LossConfig(mode=mode),
        )
    if name == "full":
        return TrainRunConfig(
            mode=mode, scale=scale, steps=300_000, batch_size=16, hr_patch=128,
            learning_rate=1e-4, seed=seed,
            generator=generator_preset("full", scale), loss=LossConfig(mode=mode),
        )
    raise ValueError(f"unknown preset {name!r}")
