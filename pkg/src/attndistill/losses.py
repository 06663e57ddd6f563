"""Training objectives: WGAN-GP adversarial terms, domain classification,
cycle reconstruction, attention distillation and the composite student objectives."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields

import torch
import torch.nn.functional as F

from .attention import generator_attention
from .core import AttentionMap, normalize_tensor
from .models import LAST_RESBLOCK

CSV_COLUMNS = ("step", "adv_D", "adv_G", "cls_D", "cls_G", "rec", "att", "gp", "total_D", "total_G")


@dataclass(frozen=True)
class LossWeights:
    lambda_cls: float = 1.0
    lambda_rec: float = 10.0
    lambda_att: float = 10.0
    lambda_gp: float = 10.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")


@dataclass
class LossReport:
    step: int = 0
    adv_D: float = 0.0
    adv_G: float = 0.0
    cls_D: float = 0.0
    cls_G: float = 0.0
    rec: float = 0.0
    att: float = 0.0
    gp: float = 0.0
    total_D: float = 0.0
    total_G: float = 0.0
    g_updated: bool = field(default=False, compare=False)

    def check(self, weights: LossWeights, tol: float = 1e-6) -> None:
        """Raise if any entry is non-finite or the totals do not recompose from the parts."""
        for name in CSV_COLUMNS[1:]:
            if not math.isfinite(getattr(self, name)):
                raise FloatingPointError(f"loss {name} is not finite at step {self.step}")
        d, g = compose_totals(self, weights)
        if abs(d - self.total_D) > tol * max(1.0, abs(d)) or abs(g - self.total_G) > tol * max(1.0, abs(g)):
            raise AssertionError(f"loss totals do not recompose at step {self.step}")

    def row(self) -> list:
        d = asdict(self)
        return [d[c] for c in CSV_COLUMNS]


def compose_totals(r: LossReport, w: LossWeights) -> tuple[float, float]:
    total_d = r.adv_D + w.lambda_cls * r.cls_D + w.lambda_gp * r.gp
    total_g = r.adv_G + w.lambda_cls * r.cls_G + w.lambda_rec * r.rec + w.lambda_att * r.att
    return total_d, total_g


def write_loss_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in reports:
            writer.writerow([r.step] + [repr(float(v)) for v in r.row()[1:]])


def read_loss_csv(path) -> list[LossReport]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [LossReport(step=int(r["step"]), **{c: float(r[c]) for c in CSV_COLUMNS[1:]}) for r in rows]


def _finite(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise FloatingPointError("non-finite input to adversarial loss")


def adversarial_losses(d_real_patch, d_fake_patch, gp_term, lambda_gp: float = 10.0):
    """Wasserstein critic/generator losses. Returns (loss_D, loss_G)."""
    if d_real_patch.shape != d_fake_patch.shape:
        raise ValueError("real and fake patch scores must have the same shape")
    gp_term = torch.as_tensor(gp_term, dtype=d_fake_patch.dtype)
    _finite(d_real_patch, d_fake_patch, gp_term)
    loss_d = d_fake_patch.mean() - d_real_patch.mean() + lambda_gp * gp_term
    loss_g = -d_fake_patch.mean()
    return loss_d, loss_g


def gradient_penalty(d, real, fake, generator: torch.Generator | None = None) -> torch.Tensor:
    """Mean of (||grad_xhat D_adv(xhat)||_2 - 1)^2 over uniform real/fake interpolates."""
    if real.shape != fake.shape:
        raise ValueError("real and fake batches must have the same shape")
    t = torch.rand(real.shape[0], 1, 1, 1, generator=generator, dtype=real.dtype)
    xhat = (t * real.detach() + (1 - t) * fake.detach()).requires_grad_(True)
    out = d(xhat)
    adv = out[0] if isinstance(out, tuple) else out
    (grad,) = torch.autograd.grad(adv.sum(), xhat, create_graph=True)
    if not torch.isfinite(grad).all():
        raise FloatingPointError("non-finite gradient in gradient penalty")
    norm = grad.flatten(1).norm(dim=1)
    return ((norm - 1) ** 2).mean()


def classification_loss(scores, target, kind: str = "multilabel") -> torch.Tensor:
    """BCE on logits averaged over batch and domains, or softmax CE for exclusive domains."""
    if kind == "multilabel":
        if scores.shape != target.shape:
            raise ValueError("scores and target must have the same shape")
        return F.binary_cross_entropy_with_logits(scores, target.to(scores.dtype))
    if kind == "exclusive":
        return F.cross_entropy(scores, target.argmax(dim=1))
    raise ValueError(f"unknown classification kind {kind!r}")


def reconstruction_loss(x, x_cycled) -> torch.Tensor:
    if x.shape != x_cycled.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_cycled.shape)}")
    return (x - x_cycled).abs().mean()


def map_distance(a_teacher, a_student, norm_kind: str = "l1", mode: str = "minmax") -> torch.Tensor:
    """Mean over samples of the per-sample distance between normalized (B, h, w) maps.

    l1 is the mean absolute difference per map; l2 the root-mean-square
    difference. The teacher side is always detached.
    """
    if a_teacher.shape[-2:] != a_student.shape[-2:] or a_teacher.shape[0] != a_student.shape[0]:
        raise ValueError(
            f"teacher map {tuple(a_teacher.shape)} and student map {tuple(a_student.shape)} differ; "
            "capture both at layers with equal resolution instead of resizing"
        )
    t = normalize_tensor(a_teacher.detach(), mode).flatten(1)
    s = normalize_tensor(a_student, mode).flatten(1)
    if norm_kind == "l1":
        per = (t - s).abs().mean(dim=1)
    elif norm_kind == "l2":
        per = ((t - s) ** 2).mean(dim=1).sqrt()
    else:
        raise ValueError(f"unknown norm kind {norm_kind!r}")
    return per.mean()


def attention_distillation_loss(a_teacher, a_student, norm_kind: str = "l1", mode: str = "minmax"):
    """Distance between teacher and student attention maps (AttentionMap or raw tensors)."""
    # plain tensors also expose a (detached) .data, so test the type explicitly
    t = a_teacher.data if isinstance(a_teacher, AttentionMap) else a_teacher
    s = a_student.data if isinstance(a_student, AttentionMap) else a_student
    return map_distance(t, s, norm_kind, mode)


def map_labels(c_student, mapping, n_teacher: int):
    """Carry a student-set label vector into the teacher set through ``mapping`` (list: student j -> teacher)."""
    out = torch.zeros(c_student.shape[0], n_teacher, dtype=c_student.dtype)
    out[:, list(mapping)] = c_student
    return out


def pseudo_attention_loss(
    teacher,
    student,
    teacher_d,
    x,
    c_student,
    c_pse_index,
    *,
    layer_name: str = LAST_RESBLOCK,
    norm_kind: str = "l1",
    mode: str = "minmax",
    c_teacher=None,
):
    """Distillation loss with both maps scored on pseudo domain(s) by the teacher discriminator.

    ``c_pse_index`` is an int or a per-sample (B,) tensor of teacher-set domain
    indices. The student translates ``x`` with its own target ``c_student``;
    the teacher is conditioned on ``c_teacher`` (default: one-hot pseudo domain).
    """
    b = x.shape[0]
    n_t = teacher.spec.n_domains
    idx = torch.as_tensor(c_pse_index, dtype=torch.long)
    if idx.dim() == 0:
        idx = idx.expand(b)
    if (idx < 0).any() or (idx >= n_t).any():
        raise KeyError(f"pseudo domain index {c_pse_index} has no entry in the teacher set of size {n_t}")
    if c_teacher is None:
        c_teacher = F.one_hot(idx, n_t).to(x.dtype)
    _, a_t = generator_attention(teacher, teacher_d, x, c_teacher, idx, layer_name)
    _, a_s = generator_attention(student, teacher_d, x, c_student, idx, layer_name)
    return map_distance(a_t.detach(), a_s, norm_kind, mode)


def student_objectives(report: LossReport, weights: LossWeights) -> tuple[float, float]:
    """Weighted discriminator and generator totals; also written back into ``report``."""
    total_d, total_g = compose_totals(report, weights)
    report.total_D, report.total_G = total_d, total_g
    return total_d, total_g
