"""Flat little-endian float32 tensor blobs with a JSON manifest.

Layout of a checkpoint directory::

    manifest.json   {"format": "attndistill-ckpt/1", "index": {name: {"offset": bytes,
                     "shape": [...]}}, "blob_bytes": N, ...caller metadata}
    params.bin      concatenated '<f4' arrays in index order

Every tensor is stored as float32 regardless of its in-memory dtype.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

FORMAT = "attndistill-ckpt/1"
MANIFEST = "manifest.json"
BLOB = "params.bin"


class CheckpointError(RuntimeError):
    pass


def save_tensors(path, tensors: dict, meta: dict | None = None) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    index, chunks, offset = {}, [], 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        index[name] = {"offset": offset, "shape": list(arr.shape)}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {"format": FORMAT, **(meta or {}), "index": index, "blob_bytes": offset}
    tmp = out / (BLOB + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(out / BLOB)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def read_manifest(path) -> dict:
    p = Path(path) / MANIFEST
    if not p.exists():
        raise CheckpointError(f"no manifest at {p}")
    manifest = json.loads(p.read_text())
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{p}: unsupported format {manifest.get('format')!r}")
    return manifest


def load_tensors(path) -> tuple[dict, dict]:
    """Return ``(tensors, manifest)``; refuses to load if blob and manifest disagree."""
    manifest = read_manifest(path)
    blob_path = Path(path) / BLOB
    if not blob_path.exists():
        raise CheckpointError(f"missing blob {blob_path}")
    raw = blob_path.read_bytes()
    if len(raw) != manifest["blob_bytes"]:
        raise CheckpointError(
            f"{blob_path}: blob has {len(raw)} bytes, manifest declares {manifest['blob_bytes']}"
        )
    tensors = {}
    for name, entry in manifest["index"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = entry["offset"] + 4 * count
        if end > len(raw):
            raise CheckpointError(f"{blob_path}: entry {name} runs past the end of the blob")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=entry["offset"]).reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    return tensors, manifest


def module_tensors(prefix: str, module: torch.nn.Module) -> dict:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_module(module: torch.nn.Module, prefix: str, tensors: dict) -> torch.nn.Module:
    own = module.state_dict()
    state = {}
    for k in own:
        key = f"{prefix}.{k}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint lacks tensor {key}")
        if tuple(tensors[key].shape) != tuple(own[k].shape):
            raise CheckpointError(f"{key}: shape {tuple(tensors[key].shape)} != {tuple(own[k].shape)}")
        state[k] = tensors[key].to(own[k].dtype)
    module.load_state_dict(state)
    return module
