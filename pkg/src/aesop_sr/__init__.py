"""Desk-scale trainer and diagnostics lab for GAN super-resolution with an
auto-encoded supervision (AESOP) reconstruction loss."""

__version__ = "0.1.0"

from .autoencoder import AEPretrainConfig, AEState, ae_forward, freeze_ae, pretrain_ae
from .data import PairedDataset, prepare_dataset, sample_patch_batch
from .images import (
    COLOR_RGB,
    COLOR_Y,
    ImageTensor,
    ResampleSpec,
    bicubic_downsample,
    bicubic_upsample,
    lowpass_filter,
    pixel_shuffle,
    pixel_unshuffle,
    quantize,
    read_image,
    rgb_to_y,
    spectral_magnitude,
    write_image,
)
from .losses import (
    LossBreakdown,
    LossConfig,
    build_extractor,
    loss_adversarial,
    loss_aesop,
    loss_artifact,
    loss_perceptual,
    loss_pix,
    total_loss,
)
from .metrics import MetricRecord, ae_psnr, lr_psnr, psnr, spectral_report, ssim
from .networks import (
    EncoderConfig,
    GeneratorConfig,
    ModelState,
    build_discriminator,
    build_encoder,
    build_generator,
)
from .seve import (
    BiasOperatorResult,
    DiscreteJointDistribution,
    ToyInverseProblem,
    bias_point,
    decompose_se_ve,
    run_toy_experiment,
)
from .training import FidelityPretrainConfig, TrainRunConfig, pretrain_fidelity_generator, train_sr
