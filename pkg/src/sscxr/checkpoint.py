"""The ``.sscxr`` checkpoint archive.

A checkpoint is an uncompressed zip holding ``manifest.json`` (format
version, encoder config and its hash, provenance, task metadata and an
index of arrays) plus one ``arrays/<name>.bin`` member per weight array,
stored as raw little-endian float32 in C order. Member timestamps are
fixed so identical contents give identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .vit import EncoderConfig

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def config_hash(config: EncoderConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class Checkpoint:
    encoder_config: EncoderConfig
    arrays: dict[str, np.ndarray]
    provenance: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def task(self) -> str:
        return self.meta.get("task", "pretrain")

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        """Arrays under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p) :]: v for k, v in self.arrays.items() if k.startswith(p)}

    def encoder_state(self) -> dict[str, torch.Tensor]:
        return {k: torch.from_numpy(v.copy()) for k, v in self.subset("encoder").items()}


def module_arrays(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.{k}": v.detach().cpu().numpy().astype("<f4", copy=True)
        for k, v in module.state_dict().items()
    }


def load_module_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray], strict: bool = True):
    state = {k: torch.from_numpy(np.array(v, dtype=np.float32)) for k, v in arrays.items()}
    module.load_state_dict(state, strict=strict)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    index = []
    members = []
    for name in sorted(ckpt.arrays):
        arr = np.ascontiguousarray(ckpt.arrays[name], dtype="<f4")
        raw = arr.tobytes()
        index.append(
            {"name": name, "shape": list(arr.shape), "dtype": "<f4", "sha256": hashlib.sha256(raw).hexdigest()}
        )
        members.append((f"arrays/{name}.bin", raw))
    manifest = {
        "format_version": ckpt.format_version,
        "encoder_config": ckpt.encoder_config.to_dict(),
        "config_hash": config_hash(ckpt.encoder_config),
        "provenance": ckpt.provenance,
        "meta": ckpt.meta,
        "arrays": index,
    }
    doc = json.dumps(manifest, indent=1, sort_keys=True).encode("utf-8")
    try:
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
            for member, data in [("manifest.json", doc), *members]:
                info = zipfile.ZipInfo(member, date_time=_EPOCH)
                info.external_attr = 0o644 << 16
                zf.writestr(info, data)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(
    path,
    encoder_only: bool = False,
    expected_config: Optional[EncoderConfig] = None,
) -> Checkpoint:
    """Read a checkpoint, verifying every array against its recorded hash.

    ``encoder_only`` drops decoder, head and optimizer arrays.
    ``expected_config`` turns on strict loading: the stored encoder config
    hash must match it.
    """
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint archive ({exc})") from exc
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json").decode("utf-8"))
        except (KeyError, ValueError, zipfile.BadZipFile) as exc:
            raise CheckpointError(f"{path}: missing or corrupt manifest.json ({exc})") from exc
        version = manifest.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: format version {version} unsupported (expected {FORMAT_VERSION})")
        enc_cfg = EncoderConfig.from_dict(manifest["encoder_config"])
        if config_hash(enc_cfg) != manifest.get("config_hash"):
            raise CheckpointError(f"{path}: encoder config does not match its stored hash")
        if expected_config is not None and config_hash(expected_config) != manifest["config_hash"]:
            raise CheckpointError(
                f"{path}: encoder config hash {manifest['config_hash'][:12]} does not match "
                f"expected {config_hash(expected_config)[:12]}"
            )

        arrays = {}
        for entry in manifest["arrays"]:
            name = entry["name"]
            if encoder_only and not name.startswith("encoder."):
                continue
            try:
                raw = zf.read(f"arrays/{name}.bin")
            except (KeyError, zipfile.BadZipFile, OSError) as exc:
                raise CheckpointError(f"{path}: array {name!r} unreadable ({exc})") from exc
            if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
                raise CheckpointError(f"{path}: array {name!r} failed its checksum")
            shape = tuple(entry["shape"])
            expected = int(np.prod(shape, dtype=np.int64)) * 4
            if len(raw) != expected:
                raise CheckpointError(f"{path}: array {name!r} has {len(raw)} bytes, expected {expected}")
            arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()

    return Checkpoint(
        encoder_config=enc_cfg,
        arrays=arrays,
        provenance=manifest.get("provenance", {}),
        meta=manifest.get("meta", {}),
        format_version=version,
    )
