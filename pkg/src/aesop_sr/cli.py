"""Single entry point exposing every workflow as a subcommand.

Exit codes: 0 success, 1 usage error, 2 config validation error, 3 runtime
abort (diagnostics on stderr).  A JSON config file can seed any subcommand's
options (section per subcommand, unknown keys rejected); command-line flags
override file values.  ``AESOP_SR_NUM_THREADS`` caps torch's thread count.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import torch

from . import __version__
from .autoencoder import pretrain_ae
from .checkpoints import load_autoencoder, load_model, load_train_generator, save_autoencoder
from .data import PairedDataset, prepare_dataset, split_indices
from .exceptions import CheckpointError, ConfigError, FrozenModelError, TrainingDivergedError
from .images import ImageTensor, ResampleSpec, read_image
from .losses import MODE_AESOP, MODE_BASELINE, FeatureExtractorConfig, LossConfig, build_extractor
from .metrics import (
    evaluate_pairs,
    export_loss_maps,
    mean_metric,
    pd_curve_emit,
    spectral_report,
    write_metric_csv,
)
from .networks import GeneratorConfig
from .presets import PRESET_NAMES, ae_pretrain_preset, fidelity_preset, train_preset
from .seve import (
    AESOP_ANALYTIC_MODE,
    PIXEL_MODE,
    DiscreteJointDistribution,
    ToyInverseProblem,
    decompose_se_ve,
    run_toy_experiment,
)
from .training import pretrain_fidelity_generator, train_sr, write_run_metadata


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with 2; the contract here is 1
        raise _UsageError(message)


_NESTED_CONFIG_FIELDS = {
    "generator": GeneratorConfig,
    "decoder": GeneratorConfig,
    "loss": LossConfig,
    "extractor": FeatureExtractorConfig,
}


def _apply_config_section(cfg, section: dict, section_name: str):
    """Overlay a config-file section onto a dataclass; unknown keys are fatal."""
    field_names = {f.name for f in dataclasses.fields(cfg)}
    for key, value in section.items():
        if key not in field_names:
            raise ConfigError(f"unknown config key {section_name}.{key}")
        if key in _NESTED_CONFIG_FIELDS and isinstance(value, dict):
            nested_cls = _NESTED_CONFIG_FIELDS[key]
            nested_fields = {f.name for f in dataclasses.fields(nested_cls)}
            for nested_key in value:
                if nested_key not in nested_fields:
                    raise ConfigError(f"unknown config key {section_name}.{key}.{nested_key}")
            current = getattr(cfg, key)
            base = dataclasses.asdict(current) if current is not None else {}
            base.update(value)
            value = nested_cls(**base)
        setattr(cfg, key, value)
    return cfg


_KNOWN_SECTIONS = ("global", "data", "fidelity", "ae", "train", "eval", "seve")


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object of sections")
    for key in data:
        if key not in _KNOWN_SECTIONS:
            raise ConfigError(f"unknown config section {key!r}")
    return data


def _section(config: dict, name: str) -> dict:
    section = config.get(name, {})
    if not isinstance(section, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return section


def _apply_global(config: dict) -> None:
    section = _section(config, "global")
    for key in section:
        if key not in ("seed", "out_dir", "device", "determinism"):
            raise ConfigError(f"unknown config key global.{key}")
    device = section.get("device", "cpu")
    if device != "cpu":
        raise ConfigError(f"unsupported device {device!r}: this build is single-device CPU")
    if section.get("determinism"):
        torch.set_num_threads(1)


def _global_seed(config: dict, args) -> int | None:
    section = _section(config, "global")
    if getattr(args, "seed", None) is not None:
        return args.seed
    return section.get("seed")


def cmd_prepare_data(args, config) -> int:
    section = _section(config, "data")
    for key in section:
        if key not in ("src", "out", "scale", "antialias"):
            raise ConfigError(f"unknown config key data.{key}")
    src = args.src or section.get("src")
    out = args.out or section.get("out")
    if not src or not out:
        raise ConfigError("prepare-data needs --src and --out (flags or the data config section)")
    scale = args.scale if args.scale is not None else section.get("scale", 2)
    antialias = section.get("antialias", True) and not args.no_antialias
    spec = ResampleSpec(scale=scale, antialias=antialias)
    dataset = prepare_dataset(src, out, spec)
    print(f"prepared {len(dataset)} pairs at scale x{dataset.scale} -> {out}")
    return 0


def cmd_pretrain_fidelity(args, config) -> int:
    cfg = fidelity_preset(args.preset, args.scale, seed=args.seed or 0)
    _apply_config_section(cfg, _section(config, "fidelity"), "fidelity")
    if args.steps is not None:
        cfg.steps = args.steps
    seed = _global_seed(config, args)
    if seed is not None:
        cfg.seed = seed
    cfg.__post_init__()  # re-validate after overrides
    dataset = PairedDataset.load(args.data)
    _, checkpoint = pretrain_fidelity_generator(dataset, cfg, args.out)
    print(f"fidelity generator checkpoint: {checkpoint}")
    return 0


def cmd_pretrain_ae(args, config) -> int:
    cfg = ae_pretrain_preset(args.preset, args.scale, seed=args.seed or 0)
    _apply_config_section(cfg, _section(config, "ae"), "ae")
    if args.steps is not None:
        cfg.steps = args.steps
    if args.decoder_init:
        cfg.decoder_init_checkpoint = args.decoder_init
    seed = _global_seed(config, args)
    if seed is not None:
        cfg.seed = seed
    cfg.__post_init__()  # re-validate after overrides
    run_dir = Path(args.out)
    write_run_metadata(run_dir, cfg, cfg.seed)
    dataset = PairedDataset.load(args.data)
    result = pretrain_ae(dataset, cfg, log_path=run_dir / "ae_pretrain_log.csv")
    ckpt = run_dir / "autoencoder.ckpt"
    save_autoencoder(result.ae, ckpt)
    print(
        f"autoencoder checkpoint: {ckpt} "
        f"(hr reconstruction {result.initial_hr_loss:.4f} -> {result.final_hr_loss:.4f})"
    )
    return 0


def cmd_train_sr(args, config) -> int:
    cfg = train_preset(args.preset, args.mode, args.scale, seed=args.seed or 0)
    _apply_config_section(cfg, _section(config, "train"), "train")
    cfg.dataset = args.data
    cfg.out_dir = args.out
    if args.steps is not None:
        cfg.steps = args.steps
    if args.ae:
        cfg.ae_checkpoint = args.ae
    if args.generator_init:
        cfg.generator_init = args.generator_init
    seed = _global_seed(config, args)
    if seed is not None:
        cfg.seed = seed
    cfg.__post_init__()  # re-validate after overrides
    result = train_sr(cfg, resume_from=args.resume)
    summary = ", ".join(f"{k}={v:.3f}" for k, v in result.val_metrics.items())
    print(f"run complete: {result.final_checkpoint} ({summary})")
    return 0


def cmd_eval(args, config) -> int:
    dataset = PairedDataset.load(args.data)
    generator = load_model(args.checkpoint)
    ae = load_autoencoder(args.ae) if args.ae else None
    if args.split == "val":
        _, indices = split_indices(dataset, args.val_count)
    else:
        indices = list(range(len(dataset)))
    records = evaluate_pairs(
        generator, dataset, indices, ae=ae,
        dataset_id=Path(args.data).stem, checkpoint_id=Path(args.checkpoint).stem,
    )
    write_metric_csv(records, args.out)
    for name in ("psnr", "ssim", "lr_psnr", *(("ae_psnr",) if ae else ())):
        print(f"mean {name}: {mean_metric(records, name):.4f}")
    print(f"metrics written to {args.out}")
    return 0


def cmd_diagnose(args, config) -> int:
    ae = load_autoencoder(args.ae)
    out = Path(args.out)
    if args.image:
        hr = read_image(args.image)
        height = hr.height - hr.height % ae.scale
        width = hr.width - hr.width % ae.scale
        hr = hr.with_data(hr.data[..., :height, :width])
        sr = None
    else:
        dataset = PairedDataset.load(args.data)
        hr, lr = dataset.load_pair(args.index)
        sr = None
        if args.checkpoint:
            generator = load_model(args.checkpoint)
            with torch.no_grad():
                sr = ImageTensor(generator.module(lr.batched())[0])
    report = spectral_report(hr, ae, cutoff=args.cutoff, out_dir=out / "spectra")
    print(
        f"spectral retention above cutoff {args.cutoff}: "
        f"ae={report.ae_retention:.4f} lowpass={report.lowpass_retention:.2e}"
    )
    if sr is not None:
        paths = export_loss_maps(sr, hr, ae, out / "loss_maps")
        print(f"loss maps: {', '.join(sorted(paths))}")
    return 0


def cmd_seve_lab(args, config) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    problem = ToyInverseProblem(
        component_means=tuple(args.modes), component_std=args.mode_std
    )
    modes = [PIXEL_MODE, AESOP_ANALYTIC_MODE] if args.loss_mode == "both" else [args.loss_mode]
    for mode in modes:
        report = run_toy_experiment(problem, mode, steps=args.steps, seed=args.seed or 0)
        path = out / f"trajectory_{mode}.csv"
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            for row in report.csv_rows():
                writer.writerow(row)
        print(
            f"{mode}: mean_error {report.final_mean_error:.4f}, "
            f"std {report.initial_std:.4f} -> {report.final_std:.4f} ({path})"
        )
    # Closed-form sanity line over a tiny two-point joint, as a quick self-check.
    joint = DiscreteJointDistribution.independent([[0.0], [1.0]], [0.5, 0.5], [[0.0], [1.0]], [0.5, 0.5])
    result = decompose_se_ve(joint)
    print(f"decomposition self-check: se={result.se:.3f} ve={result.ve:.3f}")
    return 0


def cmd_repro(args, config) -> int:
    """End-to-end desk recipe: data prep, both pretrainings, paired SR runs,
    metric comparison, diagnostics, and the toy lab, summarized in one CSV."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed or 0
    scale = args.scale
    summary: list[tuple[str, str, str, str]] = []

    spec = ResampleSpec(scale=scale)
    data_dir = out / "dataset"
    dataset = prepare_dataset(args.src, data_dir, spec)
    summary.append(("prepare-data", str(data_dir), "pairs", str(len(dataset))))

    _, fidelity_ckpt = pretrain_fidelity_generator(
        dataset, fidelity_preset(args.preset, scale, seed=seed), out / "fidelity"
    )
    summary.append(("pretrain-fidelity", fidelity_ckpt, "", ""))

    ae_cfg = ae_pretrain_preset(args.preset, scale, seed=seed)
    ae_cfg.decoder_init_checkpoint = fidelity_ckpt
    ae_dir = out / "ae"
    write_run_metadata(ae_dir, ae_cfg, seed)
    ae_result = pretrain_ae(dataset, ae_cfg, log_path=ae_dir / "ae_pretrain_log.csv")
    ae_ckpt = ae_dir / "autoencoder.ckpt"
    save_autoencoder(ae_result.ae, ae_ckpt)
    summary.append(
        ("pretrain-ae", str(ae_ckpt), "hr_reconstruction",
         f"{ae_result.initial_hr_loss:.4f}->{ae_result.final_hr_loss:.4f}")
    )

    results = {}
    for mode in (MODE_BASELINE, MODE_AESOP):
        cfg = train_preset(args.preset, mode, scale, seed=seed)
        cfg.dataset = str(data_dir)
        cfg.out_dir = str(out / f"train_{mode}")
        cfg.generator_init = fidelity_ckpt
        cfg.ae_checkpoint = str(ae_ckpt) if mode == MODE_AESOP else None
        if args.steps is not None:
            cfg.steps = args.steps
        cfg.__post_init__()
        results[mode] = train_sr(cfg)
        for name, value in results[mode].val_metrics.items():
            summary.append((f"train-{mode}", results[mode].final_checkpoint, name, f"{value:.4f}"))

    # Both runs share the AE for the reconstruction-alignment comparison.
    ae = load_autoencoder(ae_ckpt)
    _, val_idx = split_indices(dataset, 4)
    comparison = {}
    for mode in (MODE_BASELINE, MODE_AESOP):
        generator = load_model(results[mode].final_checkpoint)
        records = evaluate_pairs(generator, dataset, val_idx, ae=ae,
                                 dataset_id="repro", checkpoint_id=mode)
        comparison[mode] = {name: mean_metric(records, name)
                            for name in ("psnr", "lr_psnr", "ae_psnr")}
    for name in ("psnr", "lr_psnr", "ae_psnr"):
        delta = comparison[MODE_AESOP][name] - comparison[MODE_BASELINE][name]
        summary.append(("reconstruction-alignment", "aesop-vs-baseline", name, f"{delta:+.4f}"))

    extractor = build_extractor(FeatureExtractorConfig())
    checkpoints = []
    for mode in (MODE_BASELINE, MODE_AESOP):
        ckpt_dir = Path(results[mode].run_dir) / "checkpoints"
        for path in sorted(ckpt_dir.glob("step_*.ckpt")):
            generator, step = load_train_generator(path)
            checkpoints.append((f"{mode}_{path.stem}", step, generator))
    pd_rows = pd_curve_emit(checkpoints, dataset, val_idx, extractor, out / "pd_curve.csv")
    summary.append(("pd-tradeoff", str(out / "pd_curve.csv"), "rows", str(len(pd_rows))))

    hr, _ = dataset.load_pair(val_idx[0])
    report = spectral_report(hr, ae, out_dir=out / "spectra")
    summary.append(("spectral-comparison", str(out / "spectra"),
                    "ae_retention", f"{report.ae_retention:.4f}"))
    summary.append(("spectral-comparison", str(out / "spectra"),
                    "lowpass_retention", f"{report.lowpass_retention:.2e}"))

    for mode in (PIXEL_MODE, AESOP_ANALYTIC_MODE):
        toy = run_toy_experiment(ToyInverseProblem(), mode, steps=2000, seed=seed)
        summary.append(("toy-collapse", mode, "final_std", f"{toy.final_std:.4f}"))
        summary.append(("toy-collapse", mode, "final_mean_error", f"{toy.final_mean_error:.4f}"))

    summary_path = out / "summary.csv"
    with open(summary_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["stage", "artifact", "metric", "value"])
        writer.writerows(summary)
    print(f"summary written to {summary_path}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="aesop-sr", description=__doc__)
    parser.add_argument("--version", action="version", version=f"aesop-sr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, seed=True, cfg=True):
        if seed:
            p.add_argument("--seed", type=int, default=None)
        if cfg:
            p.add_argument("--config", default=None, help="JSON config file")

    p = sub.add_parser("prepare-data", help="build or audit an HR/LR dataset")
    p.add_argument("--src", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--scale", type=int, default=None)
    p.add_argument("--no-antialias", action="store_true")
    add_common(p, seed=False)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("pretrain-fidelity", help="elementwise-loss generator pretraining")
    p.add_argument("--data", required=True, help="prepared dataset dir or manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int, default=2)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--preset", choices=PRESET_NAMES, default="desk")
    add_common(p)
    p.set_defaults(func=cmd_pretrain_fidelity)

    p = sub.add_parser("pretrain-ae", help="autoencoder pretraining")
    p.add_argument("--data", dest="data", required=True)
    p.add_argument("--data-dir", dest="data", help=argparse.SUPPRESS)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int, default=2)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--decoder-init", default=None)
    p.add_argument("--preset", choices=PRESET_NAMES, default="desk")
    add_common(p)
    p.set_defaults(func=cmd_pretrain_ae)

    p = sub.add_parser("train-sr", help="SR training (baseline or aesop objective)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=(MODE_BASELINE, MODE_AESOP), default=MODE_AESOP)
    p.add_argument("--scale", type=int, default=2)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--ae", default=None, help="frozen autoencoder checkpoint")
    p.add_argument("--generator-init", default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--preset", choices=PRESET_NAMES, default="desk")
    add_common(p)
    p.set_defaults(func=cmd_train_sr)

    p = sub.add_parser("eval", help="compute metrics for a generator checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ae", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("val", "all"), default="val")
    p.add_argument("--val-count", type=int, default=4)
    add_common(p, seed=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="loss maps and spectral comparison")
    p.add_argument("--ae", required=True)
    p.add_argument("--image", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--cutoff", type=float, default=0.125)
    p.add_argument("--out", required=True)
    add_common(p, seed=False)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("seve-lab", help="decomposition lab and toy collapse runs")
    p.add_argument("--loss-mode", choices=(PIXEL_MODE, AESOP_ANALYTIC_MODE, "both"), default="both")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--modes", type=float, nargs="+", default=[-1.0, 1.0])
    p.add_argument("--mode-std", type=float, default=0.0)
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(func=cmd_seve_lab)

    p = sub.add_parser("repro", help="full desk-scale reproduction recipe")
    p.add_argument("--src", required=True, help="folder of source images (>= 10 recommended)")
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int, default=2)
    p.add_argument("--steps", type=int, default=None, help="override SR training steps")
    p.add_argument("--preset", choices=PRESET_NAMES, default="desk")
    add_common(p)
    p.set_defaults(func=cmd_repro)

    return parser


def main(argv=None) -> int:
    threads = os.environ.get("AESOP_SR_NUM_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = _load_config_file(getattr(args, "config", None))
        _apply_global(config)
        if getattr(args, "data", None) is None and args.command == "diagnose" and not args.image:
            raise ConfigError("diagnose requires either --image or --data")
        return args.func(args, config)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, FrozenModelError, TrainingDivergedError, ValueError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        if isinstance(exc, TrainingDivergedError) and exc.last_checkpoint:
            print(f"last good checkpoint: {exc.last_checkpoint}", file=sys.stderr)
        return 3


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
