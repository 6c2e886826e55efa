"""Versioned checkpoint bundles.

A bundle is an uncompressed zip archive holding ``manifest.json`` plus one
safetensors blob per component (``encoder``, ``decoder``, ``denoiser``...).
The manifest records the run config snapshot, latent scale, schedule, step
counter and a SHA-256 digest per blob. Archives are written with fixed
timestamps so identical content gives identical bytes, and always via a
temporary file plus rename so an interrupted write never clobbers the
previous checkpoint.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import torch
from safetensors.torch import load as st_load
from safetensors.torch import save as st_save

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(RuntimeError):
    pass


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def state_to_blob(state: dict) -> bytes:
    return st_save({k: v.detach().cpu().contiguous().clone() for k, v in state.items()})


@dataclass
class Bundle:
    config: dict
    blobs: dict[str, bytes] = field(default_factory=dict)
    latent_scale: float | None = None
    schedule: dict | None = None
    step: int = 0
    extra: dict = field(default_factory=dict)

    def set_state(self, name: str, state: dict) -> None:
        self.blobs[name] = state_to_blob(state)

    def state(self, name: str) -> dict:
        if name not in self.blobs:
            raise CheckpointError(f"bundle has no component {name!r}; has {sorted(self.blobs)}")
        return st_load(self.blobs[name])

    def digests(self) -> dict[str, str]:
        return {k: sha256(v) for k, v in sorted(self.blobs.items())}

    def manifest(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "config": self.config,
            "latent_scale": self.latent_scale,
            "schedule": self.schedule,
            "step": self.step,
            "extra": self.extra,
            "digests": self.digests(),
        }

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
            entries = [("manifest.json", json.dumps(self.manifest(), sort_keys=True, indent=1).encode())]
            entries += [(f"{k}.safetensors", v) for k, v in sorted(self.blobs.items())]
            for name, data in entries:
                info = zipfile.ZipInfo(name, date_time=_EPOCH)
                info.external_attr = 0o644 << 16
                zf.writestr(info, data)
        return buf.getvalue()

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        data = self.to_bytes()
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(data)
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return path


def load_bundle(path) -> Bundle:
    """Read a bundle, refusing it if any blob's digest does not match."""
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            blobs = {
                n[: -len(".safetensors")]: zf.read(n) for n in zf.namelist() if n.endswith(".safetensors")
            }
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format_version')}")
    expected = manifest.get("digests", {})
    if set(expected) != set(blobs):
        raise CheckpointError(f"component set {sorted(blobs)} does not match manifest {sorted(expected)}")
    for name, data in blobs.items():
        if sha256(data) != expected[name]:
            raise CheckpointError(f"digest mismatch for component {name!r}; refusing to load {path}")
    return Bundle(
        config=manifest["config"],
        blobs=blobs,
        latent_scale=manifest.get("latent_scale"),
        schedule=manifest.get("schedule"),
        step=manifest.get("step", 0),
        extra=manifest.get("extra", {}),
    )


def load_module(module: torch.nn.Module, bundle: Bundle, name: str) -> torch.nn.Module:
    module.load_state_dict(bundle.state(name))
    return module
