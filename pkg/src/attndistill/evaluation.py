"""Translation accuracy, Fréchet distance over a pluggable embedder, attention localization."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .core import EPS, torch_generator
from .data import Batcher, ImageDataset

log = logging.getLogger(__name__)


class DomainClassifier(nn.Module):
    """Small multi-label conv classifier; ``features`` is the penultimate embedding."""

    def __init__(self, n_domains: int, image_size: int = 32, width: int = 16, embed_dim: int = 64):
        super().__init__()
        self.n_domains, self.image_size, self.width, self.embed_dim = n_domains, image_size, width, embed_dim
        layers, ch = [], 3
        for i in range(3):
            layers += [nn.Conv2d(ch, width * 2**i, 3, 2, 1), nn.LeakyReLU(0.1)]
            ch = width * 2**i
        self.conv = nn.Sequential(*layers)
        self.embed = nn.Linear(ch * (image_size // 8) ** 2, embed_dim)
        self.head = nn.Linear(embed_dim, n_domains)

    def features(self, x):
        return F.relu(self.embed(self.conv(x).flatten(1)))

    def forward(self, x):
        return self.head(self.features(x))

    def arch(self) -> dict:
        return {"n_domains": self.n_domains, "image_size": self.image_size, "width": self.width,
                "embed_dim": self.embed_dim}


@dataclass
class FrozenClassifier:
    model: DomainClassifier
    attributes: tuple
    active: tuple  # attributes the classifier was trained on (degenerate ones excluded)
    heldout_accuracy: dict = field(default_factory=dict)

    @torch.no_grad()
    def predict(self, images, batch_size: int = 256) -> torch.Tensor:
        self.model.eval()
        out = [torch.sigmoid(self.model(images[i : i + batch_size])) >= 0.5 for i in range(0, len(images), batch_size)]
        return torch.cat(out).float()

    def save(self, path):
        meta = {"kind": "classifier", "arch": self.model.arch(), "attributes": list(self.attributes),
                "active": list(self.active), "heldout_accuracy": self.heldout_accuracy}
        return ckpt.save_tensors(path, ckpt.module_tensors("C", self.model), meta)

    @classmethod
    def load(cls, path) -> "FrozenClassifier":
        tensors, meta = ckpt.load_tensors(path)
        if meta.get("kind") != "classifier":
            raise ckpt.CheckpointError(f"{path} is not a classifier checkpoint")
        model = DomainClassifier(**meta["arch"])
        ckpt.load_module(model, "C", tensors)
        for p in model.parameters():
            p.requires_grad_(False)
        return cls(model.eval(), tuple(meta["attributes"]), tuple(meta["active"]), meta["heldout_accuracy"])


def label_accuracy(clf: FrozenClassifier, data: ImageDataset) -> dict:
    pred = clf.predict(data.images)
    acc = (pred == data.labels).float().mean(dim=0)
    return {a: float(acc[j]) for j, a in enumerate(data.attributes) if a in clf.active}


def train_domain_classifier(train: ImageDataset, test: ImageDataset | None = None, steps: int = 1500,
                            batch_size: int = 64, lr: float = 1e-3, seed: int = 0, width: int = 16) -> FrozenClassifier:
    labels = train.labels
    active = tuple(a for j, a in enumerate(train.attributes) if 0 < labels[:, j].sum() < len(labels))
    for a in train.attributes:
        if a not in active:
            warnings.warn(f"attribute {a!r} has a single class in the training data; excluded")
    if not active:
        raise ValueError("every attribute is degenerate (constant labels); refusing to train")
    keep = torch.tensor([a in active for a in train.attributes])
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = DomainClassifier(len(train.attributes), train.images.shape[-1], width)
    opt = torch.optim.Adam(model.parameters(), lr)
    batches = Batcher(train, min(batch_size, len(train)), seed, flip=True)
    model.train()
    for k in range(steps):
        x, y = batches.batch(k)
        loss = F.binary_cross_entropy_with_logits(model(x), y, reduction="none")[:, keep].mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    for p in model.parameters():
        p.requires_grad_(False)
    clf = FrozenClassifier(model.eval(), tuple(train.attributes), active)
    if test is not None:
        clf.heldout_accuracy = label_accuracy(clf, test)
    return clf


@torch.no_grad()
def translate(generator, images, labels, batch_size: int = 128) -> torch.Tensor:
    generator.eval()
    outs = [generator(images[i : i + batch_size], labels[i : i + batch_size])[0]
            for i in range(0, len(images), batch_size)]
    return torch.cat(outs)


def target_labels(labels: torch.Tensor, k: int) -> torch.Tensor:
    c = labels.clone()
    c[:, k] = 1.0
    return c


def translation_accuracy(generator, clf: FrozenClassifier, data: ImageDataset, targets=None) -> dict:
    """Fraction of images whose translation towards attribute k is classified as having k."""
    targets = targets or [a for a in data.attributes if a in clf.active]
    acc = {}
    for a in targets:
        k = data.attributes.index(a)
        fake = translate(generator, data.images, target_labels(data.labels, k))
        acc[a] = float(clf.predict(fake)[:, k].mean())
    return acc


class Embedder:
    """Frozen feature map ImageBatch -> (B, d)."""

    name = "embedder"

    def __call__(self, images) -> np.ndarray:
        raise NotImplementedError


class ClassifierEmbedder(Embedder):
    def __init__(self, clf: FrozenClassifier):
        self.clf = clf
        self.name = f"classifier-penultimate-{clf.model.embed_dim}"

    @torch.no_grad()
    def __call__(self, images, batch_size: int = 256) -> np.ndarray:
        m = self.clf.model.eval()
        return torch.cat([m.features(images[i : i + batch_size]) for i in range(0, len(images), batch_size)]).double().numpy()


class RandomProjectionEmbedder(Embedder):
    """Fixed random linear projection of pixels; useful without a trained classifier."""

    def __init__(self, image_size: int, dim: int = 32, seed: int = 0):
        g = torch_generator(seed)
        self.w = torch.randn(3 * image_size * image_size, dim, generator=g, dtype=torch.float64) / np.sqrt(dim)
        self.name = f"random-projection-{dim}"

    def __call__(self, images) -> np.ndarray:
        return (images.double().flatten(1) @ self.w).numpy()


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(feats_a, feats_b) -> float:
    """Squared Fréchet distance between Gaussian fits of two feature sets.

    The trace of (Sa Sb)^(1/2) is taken from the symmetric product
    Sa^(1/2) Sb Sa^(1/2), whose eigenvalues are clamped at zero.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least two samples per feature set")
    if a.shape[1] != b.shape[1]:
        raise ValueError("feature dimensions differ")
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False, ddof=1))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False, ddof=1))
    root_a = _psd_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = np.sqrt(np.clip(vals, 0, None)).sum()
    d2 = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_sqrt)
    return max(d2, 0.0)


def translation_frechet(generator, embedder: Embedder, data: ImageDataset, targets=None) -> float:
    targets = targets or list(data.attributes)
    fakes = torch.cat([translate(generator, data.images, target_labels(data.labels, data.attributes.index(a)))
                       for a in targets])
    return frechet_distance(embedder(data.images), embedder(fakes))


def attention_mass_fraction(amap, mask) -> torch.Tensor:
    """Share of (non-negative) attention mass that falls inside a binary region mask.

    ``amap`` is (h, w) or (B, h, w); ``mask`` is (H, W) or (B, H, W). When the
    mask is finer than the map, the map is bilinearly upsampled to the mask grid
    (as in rendered overlays); otherwise the mask is nearest-resampled to the map.
    """
    a = getattr(amap, "data", amap).detach().double()
    m = torch.as_tensor(mask).bool()
    single = a.dim() == 2
    if single:
        a = a[None]
    if m.dim() == 2:
        m = m[None].expand(a.shape[0], -1, -1)
    if (a < 0).any():
        raise ValueError("attention map must be non-negative")
    if not m.flatten(1).any(dim=1).all():
        raise ValueError("mask is empty")
    if m.shape[-2:] != a.shape[-2:]:
        if m.shape[-1] > a.shape[-1]:
            a = F.interpolate(a[:, None], size=m.shape[-2:], mode="bilinear", align_corners=False)[:, 0].clamp_min(0)
        else:
            m = F.interpolate(m[:, None].double(), size=a.shape[-2:], mode="nearest")[:, 0] > 0.5
    frac = (a * m).flatten(1).sum(1) / (a.flatten(1).sum(1) + EPS)
    return frac[0] if single else frac


def mask_area_fraction(mask) -> torch.Tensor:
    m = torch.as_tensor(mask).double()
    return m.flatten(-2).mean(-1)


@dataclass
class EvalReport:
    accuracy: dict
    frechet: float | None = None
    attention_mass: dict = field(default_factory=dict)
    embedder: str = ""

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(list(self.accuracy.values()))) if self.accuracy else float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_accuracy"] = self.mean_accuracy
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self, label: str = "model") -> str:
        cols = [f"{a} ↑" for a in self.accuracy] + ["Mean ↑", "FID ↓"]
        vals = [f"{100 * v:.2f}%" for v in self.accuracy.values()] + [
            f"{100 * self.mean_accuracy:.2f}%",
            "-" if self.frechet is None else f"{self.frechet:.4f}",
        ]
        widths = [max(len(c), len(v)) for c, v in zip(cols, vals)]
        lw = max(len(label), 5)
        head = " | ".join([" " * lw] + [c.ljust(w) for c, w in zip(cols, widths)])
        row = " | ".join([label.ljust(lw)] + [v.ljust(w) for v, w in zip(vals, widths)])
        return f"{head}\n{'-' * len(head)}\n{row}\n"


def evaluate(generator, clf: FrozenClassifier, data: ImageDataset, embedder: Embedder | None = None,
             teacher_d=None) -> EvalReport:
    embedder = embedder or ClassifierEmbedder(clf)
    acc = translation_accuracy(generator, clf, data)
    report = EvalReport(acc, translation_frechet(generator, embedder, data, list(acc)), embedder=embedder.name)
    if teacher_d is not None and data.masks is not None:
        report.attention_mass = localization(generator, teacher_d, data)
    return report


def localization(generator, d, data: ImageDataset, layer_name: str = "last_resblock_conv",
                 batch_size: int = 64) -> dict:
    """Mean attention-mass fraction inside each attribute's mask, with the uniform baseline.

    Only images lacking the attribute are used, translated towards it.
    Returns ``{attr: {"mass": m, "baseline": area_fraction}}``.
    """
    from .attention import generator_attention

    out = {}
    for k, a in enumerate(data.attributes):
        sel = torch.nonzero(data.labels[:, k] == 0).flatten()
        if len(sel) == 0:
            continue
        fracs, areas = [], []
        for i in range(0, len(sel), batch_size):
            idx = sel[i : i + batch_size]
            x, c = data.images[idx], target_labels(data.labels[idx], k)
            _, amap = generator_attention(generator, d, x, c, k, layer_name)
            m = data.masks[idx, k]
            fracs.append(attention_mass_fraction(amap.detach(), m))
            areas.append(mask_area_fraction(m))
        out[a] = {"mass": float(torch.cat(fracs).mean()), "baseline": float(torch.cat(areas).mean())}
    return out
