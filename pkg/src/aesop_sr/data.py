"""Dataset preparation and patch serving.

``prepare_dataset`` scans a folder of images, center-crops each to dims
divisible by the scale, writes the HR copy and its bicubic LR counterpart,
and records both with checksums in a JSON-lines manifest.  Re-running is an
audit: nothing is rewritten, and any file that no longer matches its
checksum (or an LR that is not the exact downsample of its HR) fails by
name.

Patch batches crop HR at offsets that are multiples of the scale and
synthesize the LR patch from the cropped (and augmented) HR directly, so
the LR patch is the exact downsample of the HR patch by construction --
the pairing the encoder target relies on."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .exceptions import ConfigError
from .images import ImageTensor, ResampleSpec, bicubic_downsample, quantize, read_image, write_image

_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
MANIFEST_NAME = "manifest.jsonl"


@dataclass(frozen=True)
class PairRecord:
    hr_path: str
    lr_path: str
    height: int
    width: int
    hr_sha256: str
    lr_sha256: str


@dataclass
class PairedDataset:
    """Manifest-backed HR/LR pairs; read-only after preparation (decoded
    images are memoized, which is safe because nothing mutates them)."""

    root: Path
    scale: int
    spec: ResampleSpec
    records: list[PairRecord] = field(default_factory=list)
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.records)

    def _load(self, rel_path: str) -> ImageTensor:
        if rel_path not in self._cache:
            self._cache[rel_path] = read_image(self.root / rel_path)
        return self._cache[rel_path]

    def load_pair(self, index: int) -> tuple[ImageTensor, ImageTensor]:
        record = self.records[index]
        return self._load(record.hr_path), self._load(record.lr_path)

    def image_id(self, index: int) -> str:
        return Path(self.records[index].hr_path).stem

    @classmethod
    def load(cls, manifest_path) -> "PairedDataset":
        manifest_path = Path(manifest_path)
        if manifest_path.is_dir():
            manifest_path = manifest_path / MANIFEST_NAME
        if not manifest_path.exists():
            raise ConfigError(f"manifest not found: {manifest_path}")
        with open(manifest_path) as handle:
            lines = [json.loads(line) for line in handle if line.strip()]
        header = lines[0]
        if header.get("kind") != "header":
            raise ConfigError(f"manifest {manifest_path} is missing its header record")
        spec = ResampleSpec(
            scale=header["scale"], kernel_a=header["kernel_a"], antialias=header["antialias"]
        )
        records = [
            PairRecord(
                hr_path=entry["hr"],
                lr_path=entry["lr"],
                height=entry["height"],
                width=entry["width"],
                hr_sha256=entry["hr_sha256"],
                lr_sha256=entry["lr_sha256"],
            )
            for entry in lines[1:]
        ]
        return cls(root=manifest_path.parent, scale=header["scale"], spec=spec, records=records)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _list_images(src: Path) -> list[Path]:
    return sorted(p for p in src.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)


def prepare_dataset(src_dir, out_dir, spec: ResampleSpec, log=print) -> PairedDataset:
    """Build (or audit) an HR/LR folder pair under ``out_dir``.

    Idempotent: when the manifest already exists, every file is re-checked
    against its recorded checksum instead of being rewritten."""
    src = Path(src_dir)
    out = Path(out_dir)
    manifest_path = out / MANIFEST_NAME
    if manifest_path.exists():
        dataset = PairedDataset.load(manifest_path)
        audit_dataset(dataset)
        return dataset

    images = _list_images(src)
    if not images:
        raise ConfigError(f"no images found in {src}")
    hr_dir = out / "hr"
    lr_dir = out / f"lr_x{spec.scale}"
    hr_dir.mkdir(parents=True, exist_ok=True)
    lr_dir.mkdir(parents=True, exist_ok=True)

    records = []
    for path in images:
        try:
            img = read_image(path)
        except Exception as exc:
            raise ConfigError(f"cannot read image {path}: {exc}") from exc
        h = img.height - img.height % spec.scale
        w = img.width - img.width % spec.scale
        if h < spec.scale or w < spec.scale:
            raise ConfigError(f"{path.name} is too small for scale {spec.scale}")
        if (h, w) != (img.height, img.width):
            top = (img.height - h) // 2
            left = (img.width - w) // 2
            img = img.with_data(img.data[..., top : top + h, left : left + w])
            log(f"center-cropped {path.name} to {h}x{w} (divisible by {spec.scale})")
        hr_path = hr_dir / f"{path.stem}.png"
        lr_path = lr_dir / f"{path.stem}.png"
        write_image(img, hr_path)
        # Recompute from the written file so the stored pair round-trips exactly.
        hr_stored = read_image(hr_path)
        write_image(bicubic_downsample(hr_stored, spec), lr_path)
        records.append(
            PairRecord(
                hr_path=str(hr_path.relative_to(out)),
                lr_path=str(lr_path.relative_to(out)),
                height=h,
                width=w,
                hr_sha256=_sha256(hr_path),
                lr_sha256=_sha256(lr_path),
            )
        )

    with open(manifest_path, "w") as handle:
        header = {
            "kind": "header",
            "scale": spec.scale,
            "kernel": spec.kernel,
            "kernel_a": spec.kernel_a,
            "antialias": spec.antialias,
            "count": len(records),
        }
        handle.write(json.dumps(header) + "\n")
        for record in records:
            handle.write(
                json.dumps(
                    {
                        "hr": record.hr_path,
                        "lr": record.lr_path,
                        "height": record.height,
                        "width": record.width,
                        "hr_sha256": record.hr_sha256,
                        "lr_sha256": record.lr_sha256,
                    }
                )
                + "\n"
            )
    return PairedDataset(root=out, scale=spec.scale, spec=spec, records=records)


def audit_dataset(dataset: PairedDataset) -> None:
    """Verify checksums and the LR = downsample(HR) pairing for every record."""
    for record in dataset.records:
        hr_path = dataset.root / record.hr_path
        lr_path = dataset.root / record.lr_path
        for path, expected in ((hr_path, record.hr_sha256), (lr_path, record.lr_sha256)):
            if not path.exists():
                raise ConfigError(f"dataset audit failed: {path} is missing")
            if _sha256(path) != expected:
                raise ConfigError(f"dataset audit failed: checksum mismatch for {path}")
        hr = read_image(hr_path)
        lr = read_image(lr_path)
        expected_lr = quantize(bicubic_downsample(hr, dataset.spec))
        if not torch.equal(expected_lr.data, lr.data):
            raise ConfigError(f"dataset audit failed: {lr_path} is not the downsample of {hr_path}")


def apply_dihedral(data: torch.Tensor, index: int) -> torch.Tensor:
    """One of the 8 axis-aligned flips/rotations; index 0 is the identity,
    indices 0-3 rotate by 90 degrees, 4-7 additionally flip horizontally."""
    if not 0 <= index < 8:
        raise ValueError("dihedral index must be in [0, 8)")
    out = torch.rot90(data, index % 4, dims=(-2, -1))
    if index >= 4:
        out = torch.flip(out, dims=(-1,))
    return out


def sample_patch_batch(
    dataset: PairedDataset,
    hr_patch: int,
    batch: int,
    rng: np.random.Generator,
    augment: bool = True,
    indices: list[int] | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Draw an aligned (hr, lr) patch batch.

    HR crop offsets are restricted to multiples of the scale and the LR patch
    is synthesized from the augmented HR crop, so ``downsample(hr) == lr``
    holds exactly for every pair.  Images smaller than the patch are skipped;
    it is an error only when no image is large enough."""
    scale = dataset.scale
    if hr_patch % scale:
        raise ValueError(f"hr_patch {hr_patch} not divisible by scale {scale}")
    pool = list(indices) if indices is not None else list(range(len(dataset)))
    eligible = [
        i for i in pool
        if dataset.records[i].height >= hr_patch and dataset.records[i].width >= hr_patch
    ]
    if not eligible:
        raise ValueError(f"no dataset image is at least {hr_patch}x{hr_patch}")

    hr_patches = []
    for _ in range(batch):
        idx = eligible[int(rng.integers(len(eligible)))]
        record = dataset.records[idx]
        hr, _ = dataset.load_pair(idx)
        max_top = (record.height - hr_patch) // scale
        max_left = (record.width - hr_patch) // scale
        top = int(rng.integers(max_top + 1)) * scale
        left = int(rng.integers(max_left + 1)) * scale
        patch = hr.data[..., top : top + hr_patch, left : left + hr_patch]
        if augment:
            patch = apply_dihedral(patch, int(rng.integers(8)))
        hr_patches.append(patch)
    hr_batch = torch.stack(hr_patches)
    lr_batch = bicubic_downsample(hr_batch, dataset.spec)
    return hr_batch, lr_batch


def split_indices(dataset: PairedDataset, val_count: int) -> tuple[list[int], list[int]]:
    """Deterministic train/validation split: the last ``val_count`` records
    (manifest order) are held out."""
    if val_count >= len(dataset):
        raise ValueError(f"val_count {val_count} >= dataset size {len(dataset)}")
    n = len(dataset)
    return list(range(n - val_count)), list(range(n - val_count, n))
