"""Checkpoints: JSON manifest plus a flat little-endian float32 blob."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import MissingArtifactError, ValidationError


def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    return path.with_suffix(".json"), path.with_suffix(".bin")


def save_checkpoint(path, sections: dict[str, nn.Module], seed: int | None = None, config=None) -> Path:
    """Write every tensor of every section in manifest order; returns the manifest path."""
    manifest_path, blob_path = _paths(path)
    names, shapes, chunks = [], [], []
    for section, module in sections.items():
        for key, tensor in module.state_dict().items():
            if not torch.is_floating_point(tensor):
                continue
            names.append(f"{section}.{key}")
            shapes.append(list(tensor.shape))
            chunks.append(tensor.detach().cpu().numpy().astype("<f4").ravel())
    blob = np.concatenate(chunks).tobytes() if chunks else b""
    blob_path.write_bytes(blob)
    manifest = {
        "names": names,
        "shapes": shapes,
        "dtype": "float32",
        "byteorder": "little",
        "seed": seed,
        "config": config,
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    manifest_path, blob_path = _paths(path)
    if not manifest_path.exists() or not blob_path.exists():
        raise MissingArtifactError(f"checkpoint not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    blob = blob_path.read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest.get("sha256"):
        raise ValidationError(f"{blob_path}: checksum mismatch")
    flat = np.frombuffer(blob, dtype="<f4")
    tensors, pos = {}, 0
    for name, shape in zip(manifest["names"], manifest["shapes"]):
        n = int(np.prod(shape)) if shape else 1
        if pos + n > flat.size:
            raise ValidationError(f"{blob_path}: blob too short for {name}")
        tensors[name] = flat[pos : pos + n].reshape(shape).copy()
        pos += n
    if pos != flat.size:
        raise ValidationError(f"{blob_path}: {flat.size - pos} trailing values")
    return manifest, tensors


def load_checkpoint(path, sections: dict[str, nn.Module]) -> dict:
    """Load tensors into the given modules in place; returns the manifest."""
    manifest, tensors = read_checkpoint(path)
    for section, module in sections.items():
        state = module.state_dict()
        prefix = section + "."
        for key, ref in state.items():
            if not torch.is_floating_point(ref):
                continue
            name = prefix + key
            if name not in tensors:
                raise ValidationError(f"checkpoint {path} lacks {name}")
            arr = tensors[name]
            if list(arr.shape) != list(ref.shape):
                raise ValidationError(f"{name}: shape {arr.shape} != {tuple(ref.shape)}")
            state[key] = torch.as_tensor(arr, dtype=ref.dtype)
        module.load_state_dict(state)
    return manifest


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
