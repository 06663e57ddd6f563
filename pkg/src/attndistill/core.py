"""Shared value types, map normalization and seeding."""
from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import torch

EPS = 1e-8
NORMALIZE_MODES = ("minmax", "l2", "none")


@dataclass(frozen=True)
class FeatureMaps:
    data: torch.Tensor  # (B, n, h, w)
    layer_name: str


@dataclass(frozen=True)
class AttentionMap:
    data: torch.Tensor  # (B, h, w), non-negative
    domain_index: int
    layer_name: str
    network_id: str = "teacher"

    @property
    def spatial(self) -> tuple[int, int]:
        return tuple(self.data.shape[-2:])

    def with_data(self, data: torch.Tensor) -> "AttentionMap":
        return AttentionMap(data, self.domain_index, self.layer_name, self.network_id)


def check_image_batch(x: torch.Tensor) -> None:
    if x.dim() != 4 or x.shape[1] != 3:
        raise ValueError(f"expected image batch of shape (B, 3, H, W), got {tuple(x.shape)}")
    if x.shape[-1] != x.shape[-2]:
        raise ValueError(f"images must be square, got {tuple(x.shape[-2:])}")
    if not torch.isfinite(x).all():
        raise ValueError("image batch contains non-finite values")
    if x.min() < -1 or x.max() > 1:
        raise ValueError("image values must lie in [-1, 1]")


def check_domain_vector(c: torch.Tensor, n_domains: int | None = None) -> None:
    if c.dim() != 2 or c.shape[1] < 2:
        raise ValueError(f"expected domain vector of shape (B, n_domains>=2), got {tuple(c.shape)}")
    if n_domains is not None and c.shape[1] != n_domains:
        raise ValueError(f"domain vector has {c.shape[1]} entries, model expects {n_domains}")
    if not ((c == 0) | (c == 1)).all():
        raise ValueError("domain vector entries must be exactly 0 or 1")


def normalize_tensor(a: torch.Tensor, mode: str = "minmax") -> torch.Tensor:
    """Per-sample normalization of a (B, h, w) map stack."""
    if mode == "none":
        return a
    flat = a.reshape(a.shape[0], -1)
    if mode == "minmax":
        lo = flat.min(dim=1, keepdim=True).values
        hi = flat.max(dim=1, keepdim=True).values
        flat = (flat - lo) / (hi - lo + EPS)
    elif mode == "l2":
        flat = flat / (flat.norm(dim=1, keepdim=True) + EPS)
    else:
        raise ValueError(f"unknown normalize mode {mode!r}; expected one of {NORMALIZE_MODES}")
    return flat.reshape(a.shape)


def normalize_map(amap: AttentionMap, mode: str = "minmax") -> AttentionMap:
    return amap.with_data(normalize_tensor(amap.data, mode))


def seed_all(seed: int) -> None:
    """Seed every global RNG the package touches and pin deterministic kernels."""
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) & 0xFFFFFFFFFFFFFFFF)
    return g


def tensor_hash(tensors: Iterable[tuple[str, torch.Tensor]]) -> str:
    h = hashlib.sha256()
    for name, t in tensors:
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def param_hash(module: torch.nn.Module) -> str:
    return tensor_hash(module.state_dict().items())
