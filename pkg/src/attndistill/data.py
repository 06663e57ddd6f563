"""Procedural attribute faces with exact region masks, CelebA-style folder loading, batching."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

# attribute -> (region, RGB paint colour)
ATTRIBUTES = {
    "blond_hair": ("hair", (232, 200, 86)),
    "gray_hair": ("hair", (168, 168, 172)),
    "glasses": ("eyes", (24, 24, 30)),
    "goggles": ("eyes", (60, 120, 225)),
    "rosy_cheeks": ("cheeks", (222, 70, 90)),
    "green_cheeks": ("cheeks", (70, 185, 90)),
    "pale_skin": ("skin", (246, 228, 218)),
    "tan_skin": ("skin", (132, 88, 56)),
}
BASE_COLOURS = {"hair": (72, 46, 30), "skin": (205, 152, 118), "cheeks": None, "eyes": None}

DEFAULT_SET = ("blond_hair", "glasses", "rosy_cheeks", "pale_skin")
ALT_SET = ("gray_hair", "goggles", "green_cheeks", "tan_skin")
# alternate-set attribute -> default-set attribute painting the same region
ALT_TO_DEFAULT = {"gray_hair": "blond_hair", "goggles": "glasses", "green_cheeks": "rosy_cheeks", "tan_skin": "pale_skin"}


@dataclass(frozen=True)
class SyntheticSpec:
    n_images: int = 512
    image_size: int = 32
    attributes: tuple = DEFAULT_SET
    probabilities: tuple | None = None  # per-attribute marginals; default 0.5 each
    seed: int = 0
    noise: float = 3.0  # pixel noise std in 0..255 units

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        for a in self.attributes:
            if a not in ATTRIBUTES:
                raise ValueError(f"unknown attribute {a!r}; known: {sorted(ATTRIBUTES)}")
        regions = [ATTRIBUTES[a][0] for a in self.attributes]
        if len(set(regions)) != len(regions):
            raise ValueError("attributes in one set must paint distinct regions")
        if len(self.attributes) < 2:
            raise ValueError("need at least two attributes")
        if self.probabilities is not None:
            object.__setattr__(self, "probabilities", tuple(float(p) for p in self.probabilities))
            if len(self.probabilities) != len(self.attributes):
                raise ValueError("one probability per attribute required")

    @property
    def marginals(self) -> tuple:
        return self.probabilities or (0.5,) * len(self.attributes)


@dataclass
class ImageDataset:
    images: torch.Tensor  # (N, 3, H, W) in [-1, 1]
    labels: torch.Tensor  # (N, K) in {0, 1}
    attributes: tuple
    names: list = field(default_factory=list)
    masks: torch.Tensor | None = None  # (N, K, H, W) bool region masks

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx) -> "ImageDataset":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return ImageDataset(
            self.images[idx],
            self.labels[idx],
            self.attributes,
            [self.names[i] for i in idx.tolist()] if self.names else [],
            None if self.masks is None else self.masks[idx],
        )

    def split(self, n_test: int) -> tuple["ImageDataset", "ImageDataset"]:
        n = len(self)
        return self.subset(range(n - n_test)), self.subset(range(n - n_test, n))


def _face_layout(size: int, rng: np.random.Generator) -> dict:
    """Boolean region masks for one face with jittered geometry."""
    yy, xx = np.mgrid[0:size, 0:size]
    u = (xx + 0.5) / size
    v = (yy + 0.5) / size
    cx = 0.5 + rng.uniform(-0.04, 0.04)
    cy = 0.54 + rng.uniform(-0.03, 0.03)
    rx, ry = 0.28 + rng.uniform(-0.02, 0.02), 0.34 + rng.uniform(-0.02, 0.02)
    head = ((u - cx) / rx) ** 2 + ((v - cy) / ry) ** 2 <= 1
    outer = ((u - cx) / (rx + 0.07)) ** 2 + ((v - cy + 0.03) / (ry + 0.07)) ** 2 <= 1
    hair = outer & (v < cy - 0.14)
    eye_y = cy - 0.06
    lens_w, lens_h = 0.15, 0.11
    lenses = np.zeros_like(head)
    for sx in (-1, 1):
        ex = cx + sx * 0.12
        lenses |= (np.abs(u - ex) <= lens_w / 2) & (np.abs(v - eye_y) <= lens_h / 2)
    bridge = (np.abs(u - cx) <= 0.05) & (np.abs(v - eye_y + 0.02) <= 0.015)
    eyes = lenses | bridge
    cheeks = np.zeros_like(head)
    for sx in (-1, 1):
        cheeks |= ((u - (cx + sx * 0.16)) ** 2 + (v - (cy + 0.1)) ** 2) <= 0.065**2
    cheeks &= head & ~hair
    eyes &= ~hair
    skin = head & ~hair & ~eyes & ~cheeks
    pupils = np.zeros_like(head)
    for sx in (-1, 1):
        pupils |= (np.abs(u - (cx + sx * 0.12)) <= 0.025) & (np.abs(v - eye_y) <= 0.02)
    mouth = (np.abs(u - cx) <= 0.08) & (np.abs(v - (cy + 0.2)) <= 0.015)
    return {
        "hair": hair,
        "skin": skin,
        "eyes": eyes,
        "cheeks": cheeks,
        "face": head & ~hair,
        "pupils": pupils & ~hair,
        "mouth": mouth & head,
    }


def render_face(size: int, labels: dict, rng: np.random.Generator, noise: float = 0.0):
    """Render one face; returns (uint8 image HxWx3, {region: mask})."""
    regions = _face_layout(size, rng)
    bg = rng.uniform(40, 120) + rng.uniform(-15, 15, size=3)
    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = bg
    skin_jitter = rng.uniform(-8, 8, size=3)
    skin = np.array(BASE_COLOURS["skin"], float) + skin_jitter
    painted = {ATTRIBUTES[a][0]: np.array(ATTRIBUTES[a][1], float) for a, on in labels.items() if on}
    img[regions["face"]] = painted.get("skin", skin)
    img[regions["cheeks"]] = painted.get("cheeks", painted.get("skin", skin))
    img[regions["pupils"]] = (30, 24, 20)
    img[regions["mouth"]] = (150, 60, 60)
    if "eyes" in painted:
        img[regions["eyes"]] = painted["eyes"]
    hair = np.array(BASE_COLOURS["hair"], float) + rng.uniform(-6, 6, 3)
    img[regions["hair"]] = painted.get("hair", hair)
    if noise > 0:
        img += rng.normal(0, noise, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), regions


def attribute_mask(regions: dict, attribute: str) -> np.ndarray:
    return regions[ATTRIBUTES[attribute][0]]


def render_synthetic(spec: SyntheticSpec) -> ImageDataset:
    """In-memory dataset; deterministic per seed (each image has its own spawned stream)."""
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_images)
    k = len(spec.attributes)
    imgs = np.empty((spec.n_images, spec.image_size, spec.image_size, 3), np.uint8)
    labels = np.zeros((spec.n_images, k), np.float32)
    masks = np.zeros((spec.n_images, k, spec.image_size, spec.image_size), bool)
    probs = np.array(spec.marginals)
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        on = rng.random(k) < probs
        img, regions = render_face(spec.image_size, dict(zip(spec.attributes, on)), rng, spec.noise)
        imgs[i] = img
        labels[i] = on
        for j, a in enumerate(spec.attributes):
            masks[i, j] = attribute_mask(regions, a)
    return ImageDataset(
        to_tensor_images(imgs),
        torch.from_numpy(labels),
        spec.attributes,
        [f"{i:06d}.png" for i in range(spec.n_images)],
        torch.from_numpy(masks),
    )


def to_tensor_images(imgs: np.ndarray) -> torch.Tensor:
    """uint8 (N, H, W, 3) -> float (N, 3, H, W) in [-1, 1]."""
    return torch.from_numpy(imgs).permute(0, 3, 1, 2).float() / 127.5 - 1.0


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """float (N, 3, H, W) in [-1, 1] -> uint8 (N, H, W, 3)."""
    arr = ((images.detach().clamp(-1, 1) + 1) * 127.5).round()
    return arr.permute(0, 2, 3, 1).to(torch.uint8).numpy()


def write_dataset(ds: ImageDataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arr = to_uint8(ds.images)
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["filename", *ds.attributes])
        for i, name in enumerate(ds.names):
            Image.fromarray(arr[i]).save(out / name)
            w.writerow([name, *(int(v) for v in ds.labels[i].tolist())])
            if ds.masks is not None:
                for j, a in enumerate(ds.attributes):
                    Image.fromarray(ds.masks[i, j].numpy()).convert("1").save(out / f"{name}.{a}.mask.png")
    return out


def generate_synthetic(spec: SyntheticSpec, out_dir) -> ImageDataset:
    ds = render_synthetic(spec)
    write_dataset(ds, out_dir)
    return ds


def derive_labels(ds: ImageDataset, tol: float = 40.0) -> torch.Tensor:
    """Re-derive labels by testing the mean colour inside each attribute's region mask."""
    if ds.masks is None:
        raise ValueError("dataset has no region masks")
    arr = to_uint8(ds.images).astype(np.float64)
    out = torch.zeros_like(ds.labels)
    for i in range(len(ds)):
        for j, a in enumerate(ds.attributes):
            m = ds.masks[i, j].numpy()
            mean = arr[i][m].mean(axis=0)
            out[i, j] = float(np.abs(mean - np.array(ATTRIBUTES[a][1])).max() < tol)
    return out


def _center_crop_resize(img: Image.Image, size: int) -> Image.Image:
    w, h = img.size
    s = min(w, h)
    left, top = (w - s) // 2, (h - s) // 2
    img = img.crop((left, top, left + s, top + s))
    if s != size:
        img = img.resize((size, size), Image.BILINEAR)
    return img


def load_folder(path, labels_csv=None, image_size: int = 32) -> ImageDataset:
    """Load a folder of images described by ``filename,attr1,...`` rows.

    Labels may be in {-1, 1} (CelebA) or {0, 1}; -1 maps to 0. Region masks are
    picked up when ``<filename>.<attr>.mask.png`` files are present for every row.
    """
    root = Path(path)
    labels_csv = Path(labels_csv) if labels_csv else root / "labels.csv"
    if not labels_csv.exists():
        raise FileNotFoundError(f"labels file {labels_csv} not found")
    with open(labels_csv, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows[0]) < 3:
        raise ValueError(f"{labels_csv}: header must be filename followed by >= 2 attribute names")
    attributes = tuple(rows[0][1:])
    names, labels, imgs = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(attributes) + 1:
            raise ValueError(f"{labels_csv} row {lineno}: expected {len(attributes) + 1} fields, got {len(row)}")
        try:
            vals = [int(v) for v in row[1:]]
        except ValueError:
            raise ValueError(f"{labels_csv} row {lineno}: non-integer label in {row[1:]}") from None
        if any(v not in (-1, 0, 1) for v in vals):
            raise ValueError(f"{labels_csv} row {lineno}: labels must be in {{-1, 1}} or {{0, 1}}")
        f = root / row[0]
        if not f.exists():
            raise FileNotFoundError(f"{labels_csv} row {lineno}: image {row[0]} not found")
        with Image.open(f) as im:
            imgs.append(np.asarray(_center_crop_resize(im.convert("RGB"), image_size)))
        names.append(row[0])
        labels.append([1.0 if v == 1 else 0.0 for v in vals])
    if not names:
        raise ValueError(f"{labels_csv} has no data rows")
    masks = None
    mask_files = [[root / f"{n}.{a}.mask.png" for a in attributes] for n in names]
    if all(p.exists() for row in mask_files for p in row):
        masks = torch.zeros(len(names), len(attributes), image_size, image_size, dtype=torch.bool)
        for i, row in enumerate(mask_files):
            for j, p in enumerate(row):
                with Image.open(p) as im:
                    m = _center_crop_resize(im.convert("L"), image_size)
                masks[i, j] = torch.from_numpy(np.asarray(m) > 127)
    return ImageDataset(to_tensor_images(np.stack(imgs)), torch.tensor(labels), attributes, names, masks)


class Batcher:
    """Seed-deterministic epoch shuffling; the k-th batch is a pure function of (seed, k)."""

    def __init__(self, dataset: ImageDataset, batch_size: int, seed: int = 0, flip: bool = False):
        if batch_size > len(dataset):
            raise ValueError(f"batch_size {batch_size} exceeds dataset size {len(dataset)}")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.flip = flip
        self.per_epoch = len(dataset) // batch_size
        self._epoch, self._perm = None, None

    def order(self, epoch: int) -> np.ndarray:
        if epoch != self._epoch:
            rng = np.random.default_rng([self.seed, epoch])
            self._epoch, self._perm = epoch, rng.permutation(len(self.dataset))
        return self._perm

    def batch(self, k: int):
        epoch, pos = divmod(k, self.per_epoch)
        idx = torch.from_numpy(self.order(epoch)[pos * self.batch_size : (pos + 1) * self.batch_size].copy())
        x = self.dataset.images[idx]
        if self.flip:
            rng = np.random.default_rng([self.seed, epoch, pos, 1])
            flips = torch.from_numpy(rng.random(len(idx)) < 0.5)
            x = torch.where(flips[:, None, None, None], x.flip(-1), x)
        return x, self.dataset.labels[idx]

    def epoch(self, epoch: int = 0):
        for pos in range(self.per_epoch):
            yield self.batch(epoch * self.per_epoch + pos)

    def __iter__(self):
        k = 0
        while True:
            yield self.batch(k)
            k += 1


def batcher(dataset: ImageDataset, batch_size: int, seed: int = 0, flip: bool = False) -> Batcher:
    return Batcher(dataset, batch_size, seed, flip)


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
