"""Teacher pre-training, attention-distilled and pseudo-attention student training, checkpoints."""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import torch

from . import checkpoint as ckpt
from .attention import attention_from_features, class_score, generator_attention
from .core import torch_generator
from .data import Batcher, ImageDataset
from .losses import (
    LossReport,
    LossWeights,
    adversarial_losses,
    classification_loss,
    gradient_penalty,
    map_distance,
    map_labels,
    read_loss_csv,
    reconstruction_loss,
    student_objectives,
    write_loss_csv,
)
from .models import (
    LAST_RESBLOCK,
    Discriminator,
    DiscriminatorSpec,
    Generator,
    GeneratorSpec,
    build_discriminator,
    build_generator,
    freeze,
)

log = logging.getLogger(__name__)

DISTILLATION_MODES = ("none", "attention", "pseudo")


class TrainingAbort(RuntimeError):
    """Raised when training cannot continue (non-finite loss, incompatible maps)."""


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    image_size: int = 32
    batch_size: int = 16
    total_steps: int = 3000
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    n_critic: int = 5
    weights: LossWeights = field(default_factory=LossWeights)
    distillation: str = "none"
    layer_name: str = LAST_RESBLOCK
    norm_kind: str = "l1"
    normalize: str = "minmax"
    alpha_detached: bool = True
    cls_kind: str = "multilabel"
    checkpoint_every: int = 0
    flip: bool = False

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.n_critic < 1:
            raise ValueError("n_critic must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.distillation not in DISTILLATION_MODES:
            raise ValueError(f"distillation must be one of {DISTILLATION_MODES}")
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        return cls(**d)


@dataclass(frozen=True)
class DomainMapping:
    """Student-set domain j -> teacher-set (pseudo) domain ``pairs[j][1]``."""

    pairs: tuple

    def __post_init__(self):
        pairs = tuple(sorted((int(s), int(t)) for s, t in self.pairs))
        object.__setattr__(self, "pairs", pairs)
        students = [s for s, _ in pairs]
        if students != list(range(len(pairs))):
            raise ValueError(f"mapping must cover student domains 0..{len(pairs) - 1} exactly once")
        teachers = [t for _, t in pairs]
        if len(set(teachers)) != len(teachers):
            raise ValueError("mapping must be injective")

    @property
    def targets(self) -> list[int]:
        return [t for _, t in self.pairs]

    def check(self, n_student: int, n_teacher: int) -> None:
        if len(self.pairs) != n_student:
            raise TrainingAbort(f"mapping covers {len(self.pairs)} domains, student set has {n_student}")
        if max(self.targets) >= n_teacher:
            raise TrainingAbort(f"mapping refers to teacher domain {max(self.targets)} of {n_teacher}")

    @classmethod
    def from_names(cls, mapping: dict, student_attrs, teacher_attrs) -> "DomainMapping":
        pairs = []
        for j, a in enumerate(student_attrs):
            if a not in mapping:
                raise KeyError(f"student domain {a!r} has no pseudo domain in the mapping")
            if mapping[a] not in teacher_attrs:
                raise KeyError(f"pseudo domain {mapping[a]!r} is not in the teacher set {list(teacher_attrs)}")
            pairs.append((j, list(teacher_attrs).index(mapping[a])))
        return cls(tuple(pairs))

    @classmethod
    def identity(cls, n: int) -> "DomainMapping":
        return cls(tuple((i, i) for i in range(n)))


@dataclass
class TrainState:
    step: int
    config: TrainConfig
    g_spec: GeneratorSpec
    d_spec: DiscriminatorSpec
    generator: Generator
    discriminator: Discriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    rng: torch.Generator
    history: list = field(default_factory=list)
    attributes: tuple = ()
    role: str = "teacher"


def _adam(module, lr, cfg: TrainConfig):
    return torch.optim.Adam(module.parameters(), lr, betas=(cfg.beta1, cfg.beta2))


def init_state(cfg: TrainConfig, g_spec: GeneratorSpec, d_spec: DiscriminatorSpec, attributes=(), role="teacher"):
    g = build_generator(g_spec, cfg.seed)
    d = build_discriminator(d_spec, cfg.seed + 1)
    return TrainState(
        0,
        cfg,
        g_spec,
        d_spec,
        g,
        d,
        _adam(g, cfg.lr_g, cfg),
        _adam(d, cfg.lr_d, cfg),
        torch_generator(cfg.seed + 2),
        [],
        tuple(attributes),
        role,
    )


def lr_factor(step: int, total: int) -> float:
    """1 for the first half of training, then linear decay towards 0."""
    start = total // 2
    if step < start:
        return 1.0
    return max(0.0, (total - step) / max(1, total - start))


@dataclass
class Teacher:
    generator: Generator
    discriminator: Discriminator
    attributes: tuple = ()

    @classmethod
    def from_state(cls, state: TrainState) -> "Teacher":
        return cls(freeze(state.generator), freeze(state.discriminator), state.attributes)


class Trainer:
    """Runs alternating critic/generator updates on a :class:`TrainState`.

    The discriminator is updated every step; the generator on steps where
    ``step % n_critic == 0``. Generator-side entries of the loss report are
    carried forward on steps without a generator update.
    """

    def __init__(self, state: TrainState, data: ImageDataset, teacher: Teacher | None = None,
                 mapping: DomainMapping | None = None, hook=None):
        cfg = state.config
        self.state, self.cfg = state, cfg
        self.batches = Batcher(data, cfg.batch_size, cfg.seed, cfg.flip)
        self.n_domains = state.g_spec.n_domains
        if data.labels.shape[1] != self.n_domains:
            raise ValueError(f"data has {data.labels.shape[1]} domains, generator expects {self.n_domains}")
        self.teacher = teacher
        self.hook = hook
        if cfg.distillation != "none" and teacher is None:
            raise TrainingAbort(f"distillation mode {cfg.distillation!r} needs a teacher")
        if cfg.distillation == "pseudo":
            if mapping is None:
                raise TrainingAbort("pseudo distillation needs a domain mapping")
            mapping.check(self.n_domains, teacher.generator.spec.n_domains)
        if cfg.distillation == "attention":
            if teacher.generator.spec.n_domains != self.n_domains:
                raise TrainingAbort("attention distillation needs teacher and student on the same domain set")
            mapping = DomainMapping.identity(self.n_domains)
        self.mapping = mapping
        self._last_g = LossReport()

    def _abort_if_nonfinite(self, **values):
        for name, v in values.items():
            if not math.isfinite(float(v.detach())):
                raise TrainingAbort(f"non-finite {name} loss at step {self.state.step}")

    def _distill(self, x, c_trg, k, fake, feats):
        cfg, t = self.cfg, self.teacher
        targets = torch.tensor(self.mapping.targets, dtype=torch.long)
        idx = targets[k]
        c_t = map_labels(c_trg, self.mapping.targets, t.generator.spec.n_domains)
        _, a_t = generator_attention(t.generator, t.discriminator, x, c_t, idx, cfg.layer_name, True)
        a_s = attention_from_features(
            feats[cfg.layer_name].data,
            class_score(t.discriminator, fake, idx),
            alpha_detached=cfg.alpha_detached,
            layer_name=cfg.layer_name,
        )
        if self.hook is not None:
            self.hook("teacher", a_t)
            self.hook("student", a_s)
        if a_t.shape[-2:] != a_s.shape[-2:]:
            raise TrainingAbort(
                f"teacher map {tuple(a_t.shape[-2:])} and student map {tuple(a_s.shape[-2:])} differ at "
                f"{cfg.layer_name!r}"
            )
        return map_distance(a_t.detach(), a_s, cfg.norm_kind, cfg.normalize)

    def step(self) -> LossReport:
        try:
            return self._step()
        except FloatingPointError as e:
            raise TrainingAbort(f"non-finite value at step {self.state.step}: {e}") from None

    def _step(self) -> LossReport:
        s, cfg, w = self.state, self.cfg, self.cfg.weights
        g, d = s.generator, s.discriminator
        i = s.step
        f = lr_factor(i, cfg.total_steps)
        for group in s.opt_g.param_groups:
            group["lr"] = cfg.lr_g * f
        for group in s.opt_d.param_groups:
            group["lr"] = cfg.lr_d * f

        x, c_org = self.batches.batch(i)
        b = x.shape[0]
        k = torch.randint(self.n_domains, (b,), generator=s.rng)
        c_trg = c_org.clone()
        c_trg[torch.arange(b), k] = 1.0

        out_real, cls_real = d(x)
        with torch.no_grad():
            fake = g(x, c_trg)[0]
        out_fake, _ = d(fake)
        gp = gradient_penalty(d, x, fake, s.rng)
        loss_d, _ = adversarial_losses(out_real, out_fake, gp, w.lambda_gp)
        cls_d = classification_loss(cls_real, c_org, cfg.cls_kind)
        total_d = loss_d + w.lambda_cls * cls_d
        self._abort_if_nonfinite(discriminator=total_d)
        s.opt_d.zero_grad(set_to_none=True)
        total_d.backward()
        s.opt_d.step()

        rep = LossReport(
            step=i,
            adv_D=float((out_fake.mean() - out_real.mean()).detach()),
            cls_D=float(cls_d.detach()),
            gp=float(gp.detach()),
            adv_G=self._last_g.adv_G,
            cls_G=self._last_g.cls_G,
            rec=self._last_g.rec,
            att=self._last_g.att,
        )
        if i % cfg.n_critic == 0:
            capture = [cfg.layer_name] if cfg.distillation != "none" else []
            fake, feats = g(x, c_trg, capture)
            out_fake, cls_fake = d(fake)
            adv_g = -out_fake.mean()
            cls_g = classification_loss(cls_fake, c_trg, cfg.cls_kind)
            rec = reconstruction_loss(x, g(fake, c_org)[0])
            total_g = adv_g + w.lambda_cls * cls_g + w.lambda_rec * rec
            att = torch.zeros(())
            if cfg.distillation != "none":
                att = self._distill(x, c_trg, k, fake, feats)
                total_g = total_g + w.lambda_att * att
            self._abort_if_nonfinite(generator=total_g)
            s.opt_g.zero_grad(set_to_none=True)
            total_g.backward()
            s.opt_g.step()
            rep.adv_G, rep.cls_G, rep.rec, rep.att = (float(v.detach()) for v in (adv_g, cls_g, rec, att))
            rep.g_updated = True
            self._last_g = rep
        student_objectives(rep, w)
        s.history.append(rep)
        s.step += 1
        return rep

    def run(self, until: int | None = None, out_dir=None, log_every: int = 0) -> TrainState:
        until = self.cfg.total_steps if until is None else min(until, self.cfg.total_steps)
        while self.state.step < until:
            rep = self.step()
            if log_every and rep.step % log_every == 0:
                log.info("step %d  D %.4f  G %.4f  att %.4f", rep.step, rep.total_D, rep.total_G, rep.att)
            every = self.cfg.checkpoint_every
            if out_dir is not None and every and self.state.step % every == 0:
                save_state(self.state, Path(out_dir) / "checkpoints" / f"step_{self.state.step:06d}")
        return self.state


def _resume_last_g(trainer: Trainer):
    for rep in reversed(trainer.state.history):
        if rep.step % trainer.cfg.n_critic == 0:
            trainer._last_g = rep
            return


def train_teacher(cfg: TrainConfig, data: ImageDataset, g_spec: GeneratorSpec, d_spec: DiscriminatorSpec,
                  state: TrainState | None = None, until=None, out_dir=None, log_every=0) -> TrainState:
    if cfg.distillation != "none":
        raise ValueError("teacher training runs without distillation")
    state = state or init_state(cfg, g_spec, d_spec, data.attributes, "teacher")
    trainer = Trainer(state, data)
    _resume_last_g(trainer)
    return trainer.run(until, out_dir, log_every)


def _teacher(teacher) -> Teacher:
    return teacher if isinstance(teacher, Teacher) else Teacher.from_state(teacher)


def train_student(cfg: TrainConfig, data: ImageDataset, teacher, g_spec: GeneratorSpec, d_spec: DiscriminatorSpec,
                  state: TrainState | None = None, until=None, out_dir=None, hook=None, log_every=0) -> TrainState:
    if cfg.distillation not in ("none", "attention"):
        raise ValueError("train_student handles distillation modes 'none' and 'attention'")
    state = state or init_state(cfg, g_spec, d_spec, data.attributes, "student")
    trainer = Trainer(state, data, _teacher(teacher) if teacher is not None else None, hook=hook)
    _resume_last_g(trainer)
    return trainer.run(until, out_dir, log_every)


def train_student_pseudo(cfg: TrainConfig, data: ImageDataset, teacher, mapping: DomainMapping,
                         g_spec: GeneratorSpec, d_spec: DiscriminatorSpec, state: TrainState | None = None,
                         until=None, out_dir=None, hook=None, log_every=0) -> TrainState:
    if cfg.distillation != "pseudo":
        cfg = replace(cfg, distillation="pseudo")
    state = state or init_state(cfg, g_spec, d_spec, data.attributes, "student")
    trainer = Trainer(state, data, _teacher(teacher), mapping, hook=hook)
    _resume_last_g(trainer)
    return trainer.run(until, out_dir, log_every)


def _optimizer_tensors(prefix: str, opt: torch.optim.Optimizer) -> dict:
    out = {}
    for pid, st in opt.state_dict()["state"].items():
        for key, val in st.items():
            out[f"{prefix}.{pid}.{key}"] = torch.as_tensor(val, dtype=torch.float32)
    return out


def _load_optimizer(opt: torch.optim.Optimizer, prefix: str, tensors: dict) -> None:
    sd = opt.state_dict()
    state = {}
    for name, t in tensors.items():
        if not name.startswith(prefix + "."):
            continue
        _, pid, key = name.split(".", 2)
        state.setdefault(int(pid), {})[key] = t.clone()
    opt.load_state_dict({"state": state, "param_groups": sd["param_groups"]})


def save_state(state: TrainState, path) -> Path:
    tensors = {
        **ckpt.module_tensors("G", state.generator),
        **ckpt.module_tensors("D", state.discriminator),
        **_optimizer_tensors("optG", state.opt_g),
        **_optimizer_tensors("optD", state.opt_d),
    }
    meta = {
        "kind": "train_state",
        "role": state.role,
        "step": state.step,
        "seed": state.config.seed,
        "config": state.config.to_dict(),
        "generator": state.g_spec.to_dict(),
        "discriminator": state.d_spec.to_dict(),
        "attributes": list(state.attributes),
        "rng_state": base64.b64encode(state.rng.get_state().numpy().tobytes()).decode(),
    }
    out = ckpt.save_tensors(path, tensors, meta)
    write_loss_csv(out / "losses.csv", state.history)
    return out


def load_state(path) -> TrainState:
    tensors, meta = ckpt.load_tensors(path)
    if meta.get("kind") != "train_state":
        raise ckpt.CheckpointError(f"{path} is not a training-state checkpoint")
    cfg = TrainConfig.from_dict(meta["config"])
    state = init_state(cfg, GeneratorSpec.from_dict(meta["generator"]),
                       DiscriminatorSpec.from_dict(meta["discriminator"]), meta["attributes"], meta["role"])
    ckpt.load_module(state.generator, "G", tensors)
    ckpt.load_module(state.discriminator, "D", tensors)
    _load_optimizer(state.opt_g, "optG", tensors)
    _load_optimizer(state.opt_d, "optD", tensors)
    rng = torch.frombuffer(bytearray(base64.b64decode(meta["rng_state"])), dtype=torch.uint8)
    state.rng.set_state(rng.clone())
    state.step = meta["step"]
    losses = Path(path) / "losses.csv"
    state.history = read_loss_csv(losses) if losses.exists() else []
    if len(state.history) != state.step:
        raise ckpt.CheckpointError(f"{path}: loss history has {len(state.history)} rows for step {state.step}")
    return state


def load_generator(path) -> tuple[Generator, dict]:
    tensors, meta = ckpt.load_tensors(path)
    g = Generator(GeneratorSpec.from_dict(meta["generator"]))
    ckpt.load_module(g, "G", tensors)
    return g, meta


def load_discriminator(path) -> tuple[Discriminator, dict]:
    tensors, meta = ckpt.load_tensors(path)
    if "discriminator" not in meta:
        raise ckpt.CheckpointError(f"{path} holds no discriminator")
    d = Discriminator(DiscriminatorSpec.from_dict(meta["discriminator"]))
    ckpt.load_module(d, "D", tensors)
    return d, meta


def code_hash() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def write_run_manifest(out_dir, config: dict, **extra) -> Path:
    p = Path(out_dir) / "run_manifest.json"
    p.write_text(json.dumps({"config": config, "code_hash": code_hash(), **extra}, indent=2, sort_keys=True,
                            default=str))
    return p


def config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
