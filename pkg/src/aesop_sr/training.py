"""Two-mode SR training loop and the fidelity-only generator pretrainer.

Each step samples an HR patch batch (the LR batch is its exact bicubic
downsample), updates the generator on the selected objective, then updates
the discriminator.  The frozen autoencoder's checksum is recorded up front
and re-verified at every checkpoint; any drift is a hard abort.

Reproducibility: parameter init is seeded, and the batch for step k is
drawn from a generator seeded with (seed, k), never from loop state.  A rerun
with the same seed reproduces the loss log bit for bit, and resuming from a
checkpoint at step k continues exactly as the uninterrupted run would."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .autoencoder import AEState
from .checkpoints import load_autoencoder, read_container, save_model, write_container
from .data import PairedDataset, sample_patch_batch, split_indices
from .exceptions import CheckpointError, ConfigError, FrozenModelError, TrainingDivergedError
from .images import write_image
from .losses import (
    FeatureExtractorConfig,
    LossBreakdown,
    LossConfig,
    MODE_AESOP,
    build_extractor,
    loss_pix,
    total_loss,
)
from .metrics import evaluate_pairs, mean_metric, write_metric_csv
from .networks import GeneratorConfig, ModelState, build_discriminator, build_generator


@dataclass
class FidelityPretrainConfig:
    """Elementwise-loss-only generator pretraining; its checkpoint seeds both
    the SR generator and the autoencoder decoder."""

    scale: int = 2
    steps: int = 600
    batch_size: int = 4
    hr_patch: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    generator: GeneratorConfig | None = None
    augment: bool = True

    def __post_init__(self):
        if self.generator is None:
            self.generator = GeneratorConfig(scale=self.scale)
        if self.generator.scale != self.scale:
            raise ConfigError("generator scale must match run scale")


@dataclass
class TrainRunConfig:
    """One SR training run.  ``mode`` selects the objective; aesop mode
    requires a frozen autoencoder checkpoint of matching scale."""

    mode: str = MODE_AESOP
    scale: int = 2
    steps: int = 2000
    batch_size: int = 4
    hr_patch: int = 32
    learning_rate: float = 1e-4
    seed: int = 0
    dataset: str = ""
    ae_checkpoint: str | None = None
    generator_init: str | None = None
    out_dir: str = "runs/sr"
    log_interval: int = 100
    checkpoint_interval: int = 500
    val_count: int = 4
    augment: bool = True
    workers: int = 1
    generator: GeneratorConfig | None = None
    loss: LossConfig | None = None
    extractor: FeatureExtractorConfig | None = None
    discriminator_channels: int = 32

    def __post_init__(self):
        if self.generator is None:
            self.generator = GeneratorConfig(scale=self.scale)
        if self.loss is None:
            self.loss = LossConfig(mode=self.mode)
        if self.extractor is None:
            self.extractor = FeatureExtractorConfig()
        if self.generator.scale != self.scale:
            raise ConfigError("generator scale must match run scale")
        if self.loss.mode != self.mode:
            raise ConfigError(f"loss mode {self.loss.mode!r} does not match run mode {self.mode!r}")
        if self.hr_patch % self.scale:
            raise ConfigError("hr_patch must be divisible by scale")


@dataclass
class TrainResult:
    run_dir: str
    final_checkpoint: str
    log_path: str
    steps_completed: int
    final_breakdown: LossBreakdown | None = None
    val_metrics: dict = field(default_factory=dict)


def _config_to_json(cfg) -> dict:
    return json.loads(json.dumps(asdict(cfg), default=str))


def write_run_metadata(run_dir: Path, cfg, seed: int) -> None:
    from . import __version__

    run_dir.mkdir(parents=True, exist_ok=True)
    payload = {"version": __version__, "seed": seed, "config": _config_to_json(cfg)}
    (run_dir / "run.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


class _LossLog:
    def __init__(self, path: Path, resume: bool):
        self.path = path
        mode = "a" if resume and path.exists() else "w"
        self._handle = open(path, mode, newline="")
        self._writer = csv.writer(self._handle)
        if mode == "w":
            self._writer.writerow(LossBreakdown.CSV_FIELDS)

    def write(self, breakdown: LossBreakdown) -> None:
        row = breakdown.csv_row()
        self._writer.writerow([row[0]] + [f"{v:.10e}" for v in row[1:]])
        self._handle.flush()

    def close(self) -> None:
        self._handle.close()


def _optimizer_arrays(optimizer: torch.optim.Optimizer, prefix: str) -> dict[str, np.ndarray]:
    arrays = {}
    for idx, state in optimizer.state_dict()["state"].items():
        for key, value in state.items():
            if isinstance(value, torch.Tensor):
                arrays[f"{prefix}/{idx}/{key}"] = value.detach().cpu().numpy()
    return arrays


def _load_optimizer_arrays(optimizer: torch.optim.Optimizer, arrays: dict, meta: dict, prefix: str) -> None:
    groups = json.loads(meta[f"{prefix}_param_groups"])
    state: dict[int, dict] = {}
    for name, arr in arrays.items():
        if not name.startswith(prefix + "/"):
            continue
        _, idx, key = name.split("/", 2)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(arr.copy())
    optimizer.load_state_dict({"state": state, "param_groups": groups})


def pretrain_fidelity_generator(
    dataset: PairedDataset, cfg: FidelityPretrainConfig, out_dir
) -> tuple[ModelState, str]:
    """Train the generator with the elementwise loss only and checkpoint it."""
    run_dir = Path(out_dir)
    write_run_metadata(run_dir, cfg, cfg.seed)
    train_idx, val_idx = split_indices(dataset, max(1, min(2, len(dataset) - 1)))
    generator = build_generator(cfg.generator, seed=cfg.seed)
    optimizer = torch.optim.Adam(generator.module.parameters(), lr=cfg.learning_rate)
    log = _LossLog(run_dir / "loss_log.csv", resume=False)
    try:
        for step in range(1, cfg.steps + 1):
            rng = np.random.default_rng((cfg.seed, step))
            hr, lr = sample_patch_batch(
                dataset, cfg.hr_patch, cfg.batch_size, rng, augment=cfg.augment, indices=train_idx
            )
            sr = generator.module(lr)
            loss = loss_pix(sr, hr, p=1)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"fidelity pretraining diverged at step {step}", step)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            value = float(loss.detach())
            log.write(LossBreakdown(step=step, pix=value, total=value))
    finally:
        log.close()
    generator.training_step = cfg.steps
    checkpoint = run_dir / "fidelity_generator.ckpt"
    save_model(generator, checkpoint)
    return generator, str(checkpoint)


def _save_train_checkpoint(
    path: Path,
    step: int,
    generator: ModelState,
    discriminator: ModelState,
    g_opt: torch.optim.Optimizer,
    d_opt: torch.optim.Optimizer,
    ae_checksum: str | None,
) -> None:
    from .checkpoints import _model_meta, _state_arrays  # container internals

    arrays = _state_arrays(generator.module, "generator/")
    arrays.update(_state_arrays(discriminator.module, "discriminator/"))
    arrays.update(_optimizer_arrays(g_opt, "opt_g"))
    arrays.update(_optimizer_arrays(d_opt, "opt_d"))
    meta = {
        "format": "train_state",
        "step": step,
        "generator": _model_meta(generator),
        "discriminator": _model_meta(discriminator),
        "opt_g_param_groups": json.dumps(g_opt.state_dict()["param_groups"]),
        "opt_d_param_groups": json.dumps(d_opt.state_dict()["param_groups"]),
        "ae_checksum": ae_checksum,
    }
    write_container(path, meta, arrays)


def train_sr(cfg: TrainRunConfig, resume_from: str | None = None) -> TrainResult:
    """Run (or resume) one SR training run; see the module docstring for the
    step layout and determinism contract."""
    if cfg.mode == MODE_AESOP and not cfg.ae_checkpoint:
        raise ConfigError("aesop mode requires an autoencoder checkpoint")
    run_dir = Path(cfg.out_dir)
    write_run_metadata(run_dir, cfg, cfg.seed)
    dataset = PairedDataset.load(cfg.dataset)
    if dataset.scale != cfg.scale:
        raise ConfigError(f"dataset scale {dataset.scale} != run scale {cfg.scale}")
    train_idx, val_idx = split_indices(dataset, cfg.val_count)

    ae: AEState | None = None
    ae_checksum: str | None = None
    if cfg.mode == MODE_AESOP:
        ae = load_autoencoder(cfg.ae_checkpoint, expected_scale=cfg.scale)
        if not ae.frozen:
            raise FrozenModelError("the supervision autoencoder must be frozen before SR training")
        ae_checksum = ae.checksum()

    torch.manual_seed(cfg.seed)
    if cfg.generator_init:
        generator = build_generator(
            cfg.generator, init="pretrained_checkpoint", checkpoint=cfg.generator_init
        )
        generator.frozen = False
        for param in generator.module.parameters():
            param.requires_grad_(True)
        generator.module.train()
    else:
        generator = build_generator(cfg.generator, seed=cfg.seed)
    discriminator = build_discriminator(
        cfg.hr_patch, base_channels=cfg.discriminator_channels, seed=cfg.seed + 7
    )
    extractor = build_extractor(cfg.extractor)
    extractor_checksum = extractor.checksum()

    g_opt = torch.optim.Adam(generator.module.parameters(), lr=cfg.learning_rate)
    d_opt = torch.optim.Adam(discriminator.module.parameters(), lr=cfg.learning_rate)

    start_step = 0
    if resume_from:
        meta, arrays = read_container(resume_from)
        if meta.get("format") != "train_state":
            raise CheckpointError(f"{resume_from} is not a training checkpoint")
        from .checkpoints import _load_state_arrays

        _load_state_arrays(generator.module, arrays, "generator/")
        _load_state_arrays(discriminator.module, arrays, "discriminator/")
        _load_optimizer_arrays(g_opt, arrays, meta, "opt_g")
        _load_optimizer_arrays(d_opt, arrays, meta, "opt_d")
        if ae_checksum is not None and meta.get("ae_checksum") not in (None, ae_checksum):
            raise FrozenModelError("autoencoder checksum differs from the resumed run's record")
        start_step = int(meta["step"])

    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    samples_dir = run_dir / "samples"
    log = _LossLog(run_dir / "loss_log.csv", resume=start_step > 0)
    last_good: str | None = resume_from
    need_d_update = cfg.loss.lambda_adv != 0.0

    def verify_ae() -> None:
        if ae is not None and ae.checksum() != ae_checksum:
            raise FrozenModelError(
                "frozen autoencoder checksum drifted during SR training (freeze contract violated)"
            )

    breakdown: LossBreakdown | None = None
    try:
        for step in range(start_step + 1, cfg.steps + 1):
            rng = np.random.default_rng((cfg.seed, step))
            hr, lr = sample_patch_batch(
                dataset, cfg.hr_patch, cfg.batch_size, rng, augment=cfg.augment, indices=train_idx
            )
            sr = generator.module(lr)
            breakdown = total_loss(
                cfg.loss, sr, hr, ae=ae, extractor=extractor, discriminator=discriminator, step=step
            )
            if not torch.isfinite(breakdown.generator_total):
                raise TrainingDivergedError(
                    f"generator loss non-finite at step {step}", step, last_checkpoint=last_good
                )
            g_opt.zero_grad()
            d_opt.zero_grad()
            breakdown.generator_total.backward()
            g_opt.step()

            if need_d_update:
                if not torch.isfinite(breakdown.discriminator_total):
                    raise TrainingDivergedError(
                        f"discriminator loss non-finite at step {step}", step, last_checkpoint=last_good
                    )
                d_opt.zero_grad()
                breakdown.discriminator_total.backward()
                d_opt.step()

            log.write(breakdown)

            if step % cfg.log_interval == 0:
                samples_dir.mkdir(exist_ok=True)
                _write_sample_grid(generator, dataset, val_idx, samples_dir / f"step_{step:06d}.png")
            if step % cfg.checkpoint_interval == 0 or step == cfg.steps:
                verify_ae()
                path = ckpt_dir / f"step_{step:06d}.ckpt"
                generator.training_step = step
                discriminator.training_step = step
                _save_train_checkpoint(path, step, generator, discriminator, g_opt, d_opt, ae_checksum)
                last_good = str(path)
    finally:
        log.close()

    verify_ae()
    if extractor.checksum() != extractor_checksum:
        raise FrozenModelError("perceptual extractor checksum drifted during SR training")

    generator.training_step = cfg.steps
    final_path = run_dir / "generator_final.ckpt"
    save_model(generator, final_path)

    records = evaluate_pairs(
        generator, dataset, val_idx, ae=ae,
        dataset_id=Path(cfg.dataset).stem, checkpoint_id=f"step_{cfg.steps}",
    )
    write_metric_csv(records, run_dir / "val_metrics.csv")
    val_metrics = {
        name: mean_metric(records, name)
        for name in ("psnr", "ssim", "lr_psnr", *(("ae_psnr",) if ae is not None else ()))
    }
    return TrainResult(
        run_dir=str(run_dir),
        final_checkpoint=str(final_path),
        log_path=str(run_dir / "loss_log.csv"),
        steps_completed=cfg.steps,
        final_breakdown=breakdown,
        val_metrics=val_metrics,
    )


def _write_sample_grid(generator: ModelState, dataset: PairedDataset, val_idx, path) -> None:
    """Side-by-side SR|HR strips for the first few validation images."""
    tiles = []
    with torch.no_grad():
        for index in val_idx[:2]:
            hr, lr = dataset.load_pair(index)
            sr = generator.module(lr.batched())[0]
            height = min(sr.shape[-2], 96)
            width = min(sr.shape[-1], 96)
            tiles.append(torch.cat([sr[..., :height, :width], hr.data[..., :height, :width]], dim=-1))
    grid = torch.cat(tiles, dim=-2)
    write_image(grid, path)
