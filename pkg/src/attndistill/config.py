"""Strict JSON run configuration."""
from __future__ import annotations

import json
from fractions import Fraction
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .data import DEFAULT_SET, SyntheticSpec
from .losses import LossWeights
from .models import LAST_RESBLOCK, PRESETS, DiscriminatorSpec, GeneratorSpec
from .training import TrainConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Strict):
    source: Literal["synthetic", "folder"] = Field("synthetic", description="synthetic faces or an image folder")
    image_size: int = Field(32, description="square training resolution, power of two >= 32")
    attributes: list[str] = Field(list(DEFAULT_SET), description="synthetic attribute set (ignored for folders)")
    probabilities: Optional[list[float]] = Field(None, description="per-attribute marginals, default 0.5")
    n_images: int = Field(2048, description="synthetic images to render")
    n_test: int = Field(256, description="images held out at the end of the set")
    seed: int = Field(100, description="synthetic data seed")
    path: Optional[str] = Field(None, description="image folder (source=folder)")
    labels_csv: Optional[str] = Field(None, description="labels file, default <path>/labels.csv")

    @field_validator("image_size")
    @classmethod
    def _pow2(cls, v):
        if v < 32 or v & (v - 1):
            raise ValueError("image_size must be a power of two >= 32")
        return v


class ModelSection(_Strict):
    generator: Literal["teacher", "student", "s_lite"] = Field("teacher", description="generator preset")
    base_channels: int = Field(16, description="teacher-width channel count; presets scale it")
    n_resblocks: Optional[int] = Field(None, description="override the preset residual block count")
    scale: Optional[str] = Field(None, description="override the preset channel multiplier, e.g. '1/2'")
    disc_base_channels: int = Field(16, description="discriminator first-layer channels")
    disc_layers: int = Field(5, description="stride-2 conv layers in the discriminator")


class TrainSection(_Strict):
    seed: int = 0
    batch_size: int = 16
    total_steps: int = 3000
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    n_critic: int = 5
    lambda_cls: float = 1.0
    lambda_rec: float = 10.0
    lambda_att: float = 10.0
    lambda_gp: float = 10.0
    cls_kind: Literal["multilabel", "exclusive"] = "multilabel"
    checkpoint_every: int = 0
    flip: bool = False


class DistillSection(_Strict):
    mode: Literal["none", "attention", "pseudo"] = "none"
    layer: str = LAST_RESBLOCK
    norm_kind: Literal["l1", "l2"] = "l1"
    normalize: Literal["minmax", "l2", "none"] = "minmax"
    alpha_detached: bool = True
    mapping: Optional[dict[str, str]] = Field(None, description="student attribute -> teacher attribute")


class EvalSection(_Strict):
    classifier_steps: int = 1500
    classifier_seed: int = 0


class RunConfig(_Strict):
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    distill: DistillSection = DistillSection()
    eval: EvalSection = EvalSection()
    output_dir: str = "runs/default"

    def synthetic_spec(self) -> SyntheticSpec:
        d = self.data
        return SyntheticSpec(d.n_images, d.image_size, tuple(d.attributes), d.probabilities, d.seed)

    def generator_spec(self, n_domains: int) -> GeneratorSpec:
        m = self.model
        scale, n_res = PRESETS[m.generator]
        return GeneratorSpec(
            m.base_channels,
            m.n_resblocks if m.n_resblocks is not None else n_res,
            n_domains,
            self.data.image_size,
            Fraction(m.scale) if m.scale is not None else scale,
        )

    def discriminator_spec(self, n_domains: int) -> DiscriminatorSpec:
        return DiscriminatorSpec(self.model.disc_base_channels, self.model.disc_layers, n_domains,
                                 self.data.image_size)

    def train_config(self, mode: str | None = None) -> TrainConfig:
        t, dz = self.train, self.distill
        return TrainConfig(
            seed=t.seed,
            image_size=self.data.image_size,
            batch_size=t.batch_size,
            total_steps=t.total_steps,
            lr_g=t.lr_g,
            lr_d=t.lr_d,
            beta1=t.beta1,
            beta2=t.beta2,
            n_critic=t.n_critic,
            weights=LossWeights(t.lambda_cls, t.lambda_rec, t.lambda_att, t.lambda_gp),
            distillation=mode or dz.mode,
            layer_name=dz.layer,
            norm_kind=dz.norm_kind,
            normalize=dz.normalize,
            alpha_detached=dz.alpha_detached,
            cls_kind=t.cls_kind,
            checkpoint_every=t.checkpoint_every,
            flip=t.flip,
        )


class ConfigError(ValueError):
    pass


def format_validation_error(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{path}: {e['msg']}")
    return "; ".join(lines)


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(format_validation_error(e)) from None


def reference_markdown() -> str:
    """Every config key with its default, generated from the schema."""
    out = ["# Run configuration reference", "",
           "Generated by `attndistill config-reference`. Unknown keys are rejected.", ""]
    defaults = RunConfig().model_dump()
    for section, model in RunConfig.model_fields.items():
        ann = model.annotation
        if isinstance(ann, type) and issubclass(ann, BaseModel):
            out += [f"## `{section}`", "", "| key | default | description |", "|---|---|---|"]
            for key, f in ann.model_fields.items():
                out.append(f"| `{key}` | `{json.dumps(defaults[section][key])}` | {f.description or ''} |")
            out.append("")
        else:
            out += [f"## `{section}`", "", f"default `{json.dumps(defaults[section])}`", ""]
    return "\n".join(out)
