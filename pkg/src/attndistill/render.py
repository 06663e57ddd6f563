"""Heatmap overlays, raw 16-bit map dumps and comparison grids.

Constants are fixed so that outputs are byte-stable for identical inputs:
bilinear upsampling (align_corners=False), a piecewise-linear blue->red
("jet") colormap with 256 entries, and 0.5 alpha blending.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

ALPHA = 0.5
LUT_SIZE = 256


def _jet_lut() -> np.ndarray:
    t = np.linspace(0.0, 1.0, LUT_SIZE)
    r = np.clip(1.5 - np.abs(4 * t - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * t - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * t - 1), 0, 1)
    return np.rint(np.stack([r, g, b], 1) * 255).astype(np.uint8)


JET = _jet_lut()


def minmax(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    return (a - lo) / (hi - lo + 1e-8)


def upsample(amap, size: int) -> np.ndarray:
    t = torch.as_tensor(np.asarray(amap, dtype=np.float32))[None, None]
    return F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)[0, 0].numpy()


def colorize(values01: np.ndarray) -> np.ndarray:
    idx = np.clip(np.rint(values01 * (LUT_SIZE - 1)), 0, LUT_SIZE - 1).astype(np.int64)
    return JET[idx]


def overlay(image: np.ndarray, amap) -> np.ndarray:
    """Blend a colorized, upsampled, min-max scaled map over a uint8 HxWx3 image."""
    heat = colorize(minmax(upsample(amap, image.shape[0])))
    out = (1 - ALPHA) * image.astype(np.float64) + ALPHA * heat.astype(np.float64)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def save_raw_map(amap, path) -> None:
    """Min-max scaled map at native resolution as a 16-bit grayscale PNG."""
    arr = np.rint(minmax(amap) * 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def read_raw_map(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im).astype(np.uint16)


def save_overlay(image: np.ndarray, amap, path) -> None:
    Image.fromarray(overlay(image, amap)).save(path)


def grid(rows: list[list[np.ndarray]]) -> np.ndarray:
    """Tile equally sized HxWx3 images; rows[i][j] lands at row i, column j."""
    return np.concatenate([np.concatenate(r, axis=1) for r in rows], axis=0)


def save_grid(rows, path) -> Path:
    Image.fromarray(grid(rows)).save(path)
    return Path(path)
