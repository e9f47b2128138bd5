"""Checkpoint container: a single file holding named arrays behind a JSON
header.  Layout:

    8-byte magic | 8-byte little-endian header length | canonical JSON header
    | raw array bytes, little endian, concatenated in header order

The header records names, shapes, dtypes, and a config fingerprint, so the
format is language neutral and the save -> load -> save round trip is
byte-identical."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .exceptions import CheckpointError
from .networks import (
    BottleneckEncoder,
    DiscriminatorConfig,
    EncoderConfig,
    GeneratorConfig,
    ModelState,
    PatchDiscriminator,
    RRDBGenerator,
    config_fingerprint,
)

_MAGIC = b"AESRCKP1"

_MODEL_KINDS = {
    "generator": (GeneratorConfig, RRDBGenerator),
    "encoder": (EncoderConfig, BottleneckEncoder),
    "discriminator": (DiscriminatorConfig, PatchDiscriminator),
}

_DTYPES = {
    "float32": np.float32,
    "float64": np.float64,
    "int64": np.int64,
    "int32": np.int32,
    "uint8": np.uint8,
}


def write_container(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    names = sorted(arrays)
    entries = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.name not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {arr.dtype.name} for array {name!r}")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name})
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True, separators=(",", ":"))
    blob = header.encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(_MAGIC)
        handle.write(struct.pack("<Q", len(blob)))
        handle.write(blob)
        for name in names:
            arr = np.ascontiguousarray(arrays[name])
            if arr.dtype.byteorder == ">":
                arr = arr.astype(arr.dtype.newbyteorder("<"))
            handle.write(arr.tobytes())


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(_MAGIC) + 8 or raw[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint container (bad magic)")
    (header_len,) = struct.unpack("<Q", raw[len(_MAGIC) : len(_MAGIC) + 8])
    start = len(_MAGIC) + 8
    try:
        header = json.loads(raw[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} has a corrupt header: {exc}") from exc
    offset = start + header_len
    arrays: dict[str, np.ndarray] = {}
    for entry in header.get("arrays", []):
        if entry.get("dtype") not in _DTYPES:
            raise CheckpointError(f"{path} declares unsupported dtype {entry.get('dtype')!r}")
        dtype = _DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * np.dtype(dtype).itemsize
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path} is truncated at array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(
            raw, dtype=dtype, count=count, offset=offset
        ).reshape(entry["shape"]).copy()
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path} has {len(raw) - offset} trailing bytes")
    return header["meta"], arrays


def _state_arrays(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {
        prefix + name: tensor.detach().cpu().numpy()
        for name, tensor in module.state_dict().items()
    }


def _load_state_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    state = {}
    for name, tensor in module.state_dict().items():
        key = prefix + name
        if key not in arrays:
            raise CheckpointError(f"checkpoint missing array {key!r}")
        state[name] = torch.from_numpy(arrays[key].copy()).to(tensor.dtype)
    module.load_state_dict(state, strict=True)


def _model_meta(state: ModelState) -> dict:
    return {
        "kind": state.kind,
        "config": asdict(state.config),
        "fingerprint": state.fingerprint(),
        "frozen": state.frozen,
        "training_step": state.training_step,
    }


def _rebuild_model(meta: dict, arrays: dict[str, np.ndarray], prefix: str = "") -> ModelState:
    kind = meta["kind"]
    if kind not in _MODEL_KINDS:
        raise CheckpointError(f"unknown model kind {kind!r}")
    config_cls, module_cls = _MODEL_KINDS[kind]
    try:
        config = config_cls(**meta["config"])
    except TypeError as exc:
        raise CheckpointError(f"config for {kind} does not match {config_cls.__name__}: {exc}") from exc
    module = module_cls(config)
    _load_state_arrays(module, arrays, prefix)
    state = ModelState(
        module,
        kind=kind,
        config=config,
        frozen=bool(meta.get("frozen", False)),
        training_step=int(meta.get("training_step", 0)),
    )
    if state.frozen:
        state.freeze()
    if state.fingerprint() != meta["fingerprint"]:
        raise CheckpointError("stored fingerprint does not match the stored config")
    return state


def save_model(state: ModelState, path) -> None:
    write_container(path, {"format": "model", **_model_meta(state)}, _state_arrays(state.module))


def load_model(path, expected_fingerprint: str | None = None) -> ModelState:
    meta, arrays = read_container(path)
    if meta.get("format") != "model":
        raise CheckpointError(f"{path} is not a model checkpoint")
    if expected_fingerprint is not None and meta["fingerprint"] != expected_fingerprint:
        raise CheckpointError(
            f"fingerprint mismatch: checkpoint {meta['fingerprint']} vs expected {expected_fingerprint}"
        )
    return _rebuild_model(meta, arrays)


def save_autoencoder(ae, path) -> None:
    """Persist encoder and decoder of an AEState in one container."""
    arrays = _state_arrays(ae.encoder.module, "encoder/")
    arrays.update(_state_arrays(ae.decoder.module, "decoder/"))
    meta = {
        "format": "autoencoder",
        "pretrain_step": ae.pretrain_step,
        "frozen": ae.frozen,
        "encoder": _model_meta(ae.encoder),
        "decoder": _model_meta(ae.decoder),
    }
    write_container(path, meta, arrays)


def load_autoencoder(path, expected_scale: int | None = None):
    from .autoencoder import AEState  # circular-by-layering; runtime import

    meta, arrays = read_container(path)
    if meta.get("format") != "autoencoder":
        raise CheckpointError(f"{path} is not an autoencoder checkpoint")
    encoder = _rebuild_model(meta["encoder"], arrays, "encoder/")
    decoder = _rebuild_model(meta["decoder"], arrays, "decoder/")
    ae = AEState(
        encoder=encoder,
        decoder=decoder,
        pretrain_step=int(meta.get("pretrain_step", 0)),
        frozen=bool(meta.get("frozen", False)),
    )
    if expected_scale is not None and ae.scale != expected_scale:
        raise CheckpointError(f"autoencoder scale {ae.scale} does not match expected {expected_scale}")
    if ae.frozen:
        ae.encoder.freeze()
        ae.decoder.freeze()
    return ae


def load_train_generator(path) -> tuple[ModelState, int]:
    """Extract the generator (and its step) from a training-state container."""
    meta, arrays = read_container(path)
    if meta.get("format") != "train_state":
        raise CheckpointError(f"{path} is not a training checkpoint")
    generator = _rebuild_model(meta["generator"], arrays, "generator/")
    return generator, int(meta["step"])


def fingerprint_of(kind: str, config: Any) -> str:
    return config_fingerprint(kind, config)
