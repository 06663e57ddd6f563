"""Conditional generators (teacher / student / s_lite) and the two-headed discriminator.

The topology follows the StarGAN family: a 7x7 stem conv on the image with the
target label tiled over the spatial grid, two stride-2 downsampling convs, a
stack of residual blocks, two stride-2 transposed convs and a 7x7 RGB head.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction

import torch
import torch.nn as nn

from .core import FeatureMaps, check_domain_vector

LAST_RESBLOCK = "last_resblock_conv"

PRESETS = {
    "teacher": (Fraction(1), 6),
    "student": (Fraction(1, 2), 3),
    "s_lite": (Fraction(1, 4), 1),
}


def _fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        return Fraction(value).limit_denominator(64)
    return Fraction(value)


@dataclass(frozen=True)
class GeneratorSpec:
    base_channels: int = 64
    n_resblocks: int = 6
    n_domains: int = 7
    image_size: int = 128
    scale: Fraction = field(default=Fraction(1))

    def __post_init__(self):
        object.__setattr__(self, "scale", _fraction(self.scale))
        width = self.base_channels * self.scale
        if width.denominator != 1:
            raise ValueError(
                f"base_channels*scale = {self.base_channels}*{self.scale} is not an integer"
            )
        if width < 4:
            raise ValueError(f"scaled width {width} is below the minimum of 4 channels")
        if self.n_resblocks < 1:
            raise ValueError("n_resblocks must be >= 1")
        if self.n_domains < 2:
            raise ValueError("n_domains must be >= 2")
        if self.image_size % 4:
            raise ValueError("image_size must be divisible by 4")

    @property
    def width(self) -> int:
        return int(self.base_channels * self.scale)

    @classmethod
    def preset(cls, kind: str, n_domains: int, image_size: int, base_channels: int = 64):
        try:
            scale, n_res = PRESETS[kind]
        except KeyError:
            raise ValueError(f"unknown generator kind {kind!r}; expected one of {sorted(PRESETS)}")
        return cls(base_channels, n_res, n_domains, image_size, scale)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale"] = str(self.scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        d = dict(d)
        d["scale"] = Fraction(d.get("scale", "1"))
        return cls(**d)


@dataclass(frozen=True)
class DiscriminatorSpec:
    base_channels: int = 64
    n_layers: int = 6
    n_domains: int = 7
    image_size: int = 128

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.image_size % (2**self.n_layers):
            raise ValueError(
                f"image_size {self.image_size} is not divisible by 2**n_layers = {2**self.n_layers}"
            )

    @property
    def final_size(self) -> int:
        return self.image_size // 2**self.n_layers

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiscriminatorSpec":
        return cls(**d)


def _norm(ch: int) -> nn.InstanceNorm2d:
    return nn.InstanceNorm2d(ch, affine=True, track_running_stats=False)


class ResidualBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, 1, 1, bias=False),
            _norm(ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(ch, ch, 3, 1, 1, bias=False),
            _norm(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Label-conditioned encoder/residual/decoder generator with named-layer capture.

    ``forward(x, c, capture)`` returns the translated batch and a dict of
    :class:`FeatureMaps` for every requested layer. Captured tensors stay on the
    autograd graph so callers can differentiate through them.
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        w = spec.width
        self.stem = nn.Sequential(
            nn.Conv2d(3 + spec.n_domains, w, 7, 1, 3, bias=False), _norm(w), nn.ReLU(inplace=True)
        )
        self.down = nn.ModuleList()
        ch = w
        for _ in range(2):
            self.down.append(
                nn.Sequential(nn.Conv2d(ch, ch * 2, 4, 2, 1, bias=False), _norm(ch * 2), nn.ReLU(inplace=True))
            )
            ch *= 2
        self.res = nn.ModuleList(ResidualBlock(ch) for _ in range(spec.n_resblocks))
        self.up = nn.ModuleList()
        for _ in range(2):
            self.up.append(
                nn.Sequential(
                    nn.ConvTranspose2d(ch, ch // 2, 4, 2, 1, bias=False), _norm(ch // 2), nn.ReLU(inplace=True)
                )
            )
            ch //= 2
        self.to_rgb = nn.Conv2d(ch, 3, 7, 1, 3, bias=False)

        names = ["stem", "down1", "down2"]
        for i in range(1, spec.n_resblocks + 1):
            names += [f"res{i}_conv", f"res{i}"]
        names += ["up1", "up2", "to_rgb"]
        self.layer_names: tuple[str, ...] = tuple(names)
        self.aliases = {LAST_RESBLOCK: f"res{spec.n_resblocks}_conv"}

    @property
    def registry(self) -> tuple[str, ...]:
        return self.layer_names + tuple(self.aliases)

    def resolve(self, name: str) -> str:
        name = self.aliases.get(name, name)
        if name not in self.layer_names:
            raise KeyError(f"unknown layer {name!r}; registry: {', '.join(self.registry)}")
        return name

    def layer_stride(self, name: str) -> int:
        """Downsampling factor of ``name`` relative to the input resolution."""
        name = self.resolve(name)
        if name == "stem" or name == "to_rgb" or name == "up2":
            return 1
        if name in ("down1", "up1"):
            return 2
        return 4

    def forward(self, x, c, capture=()):
        check_domain_vector(c, self.spec.n_domains)
        wanted = {}
        for name in capture:
            wanted.setdefault(self.resolve(name), []).append(name)
        feats = {}

        def keep(name, h):
            for alias in wanted.get(name, ()):
                feats[alias] = FeatureMaps(h, alias)

        c_map = c.to(x.dtype)[:, :, None, None].expand(-1, -1, x.shape[2], x.shape[3])
        h = self.stem(torch.cat([x, c_map], dim=1))
        keep("stem", h)
        for i, block in enumerate(self.down, 1):
            h = block(h)
            keep(f"down{i}", h)
        for i, block in enumerate(self.res, 1):
            branch = block.body(h)
            keep(f"res{i}_conv", branch)
            h = h + branch
            keep(f"res{i}", h)
        for i, block in enumerate(self.up, 1):
            h = block(h)
            keep(f"up{i}", h)
        h = self.to_rgb(h)
        keep("to_rgb", h)
        return torch.tanh(h), feats


class Discriminator(nn.Module):
    """PatchGAN critic with an auxiliary domain-classification head.

    Returns ``(adv, cls)``: adversarial patch scores of shape
    ``(B, 1, s, s)`` with ``s = image_size / 2**n_layers`` and pre-sigmoid
    domain logits of shape ``(B, n_domains)``.
    """

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        layers = []
        in_ch, ch = 3, spec.base_channels
        for _ in range(spec.n_layers):
            layers += [nn.Conv2d(in_ch, ch, 4, 2, 1), nn.LeakyReLU(0.01)]
            in_ch, ch = ch, ch * 2
        self.main = nn.Sequential(*layers)
        self.adv_head = nn.Conv2d(in_ch, 1, 3, 1, 1, bias=False)
        self.cls_head = nn.Conv2d(in_ch, spec.n_domains, spec.final_size, bias=False)

    def forward(self, x):
        h = self.main(x)
        return self.adv_head(h), self.cls_head(h).flatten(1)


def _seeded_init(build, seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed) & 0xFFFFFFFFFFFFFFFF)
        return build()


def build_generator(spec: GeneratorSpec, seed: int = 0) -> Generator:
    return _seeded_init(lambda: Generator(spec), seed)


def build_discriminator(spec: DiscriminatorSpec, seed: int = 0) -> Discriminator:
    return _seeded_init(lambda: Discriminator(spec), seed)


def forward_generator(g: Generator, x, c, capture=()):
    return g(x, c, capture)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module
