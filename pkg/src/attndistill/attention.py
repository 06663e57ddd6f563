"""Gradient-weighted attention maps for conditional generators.

A map is formed by scoring the generated image with a discriminator's domain
logit, differentiating that logit with respect to a captured generator layer,
spatially averaging the gradient per channel to get one weight per channel,
and rectifying the weighted channel sum.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .core import AttentionMap
from .models import LAST_RESBLOCK


@dataclass
class AttentionRequest:
    source_generator: torch.nn.Module
    scoring_discriminator: torch.nn.Module
    x: torch.Tensor
    domain_index: int
    layer_name: str = LAST_RESBLOCK
    alpha_detached: bool = True
    c: torch.Tensor | None = None  # conditioning label; defaults to one-hot of domain_index
    network_id: str = "teacher"


def class_score(d, image: torch.Tensor, domain_index) -> torch.Tensor:
    """Pre-sigmoid logit for each sample, shape (B,).

    ``domain_index`` is an int or a (B,) integer tensor of per-sample domains.
    """
    _, logits = d(image)
    n = logits.shape[1]
    idx = torch.as_tensor(domain_index, dtype=torch.long)
    if (idx < 0).any() or (idx >= n).any():
        raise IndexError(f"domain index {domain_index} out of range for {n} domains")
    if idx.dim() == 0:
        return logits[:, int(idx)]
    return logits[torch.arange(logits.shape[0]), idx]


def compute_alpha(grads: torch.Tensor) -> torch.Tensor:
    """Global average pool of a (B, n, h, w) gradient stack -> (B, n)."""
    return grads.mean(dim=(2, 3))


def weighted_map(alpha: torch.Tensor, feats: torch.Tensor) -> torch.Tensor:
    return F.relu((alpha[:, :, None, None] * feats).sum(dim=1))


def _one_hot(domain_index: int, batch: int, n_domains: int, like: torch.Tensor) -> torch.Tensor:
    c = torch.zeros(batch, n_domains, dtype=like.dtype, device=like.device)
    c[:, domain_index] = 1
    return c


def _labels(req: AttentionRequest, n_domains: int) -> torch.Tensor:
    if req.c is not None:
        return req.c
    return _one_hot(req.domain_index, req.x.shape[0], n_domains, req.x)


def feature_gradient(feats, score, create_graph: bool = False, layer_name: str = "") -> torch.Tensor:
    """d(score_b)/d(feats_b) for every sample b; samples do not interact, so one backward suffices."""
    if not feats.requires_grad:
        raise RuntimeError(f"features at layer {layer_name!r} are not on the autograd graph")
    (grads,) = torch.autograd.grad(score.sum(), feats, retain_graph=True, create_graph=create_graph)
    if not torch.isfinite(grads).all():
        raise FloatingPointError(f"non-finite gradients at layer {layer_name!r}")
    return grads


def attention_from_features(
    feats: torch.Tensor,
    score: torch.Tensor,
    *,
    alpha_detached: bool = True,
    layer_name: str = "",
) -> torch.Tensor:
    """Form the rectified map from captured features and the per-sample score they produced.

    The graph is retained so the returned map stays differentiable through
    ``feats``; with ``alpha_detached=False`` the channel weights are also kept
    on the graph (second-order).
    """
    grads = feature_gradient(feats, score, create_graph=not alpha_detached, layer_name=layer_name)
    alpha = compute_alpha(grads)
    if alpha_detached:
        alpha = alpha.detach()
    return weighted_map(alpha, feats)


def _grad_input(x: torch.Tensor) -> torch.Tensor:
    # frozen generators would otherwise leave their activations off the graph
    return x.detach().requires_grad_(True)


def generator_attention(g, d, x, c, domain_index, layer_name=LAST_RESBLOCK, alpha_detached=True):
    """Translate ``x`` with ``c`` and return ``(fake, map)`` for per-sample ``domain_index``."""
    with torch.enable_grad():
        fake, feats = g(_grad_input(x), c, capture=[layer_name])
        score = class_score(d, fake, domain_index)
        amap = attention_from_features(
            feats[layer_name].data, score, alpha_detached=alpha_detached, layer_name=layer_name
        )
    return fake, amap


def compute_attention(req: AttentionRequest) -> AttentionMap:
    return attention_for_layers(req, [req.layer_name])[0]


def attention_for_layers(req: AttentionRequest, layers) -> list[AttentionMap]:
    """One map per entry of ``layers`` (one backward pass per distinct layer)."""
    g, d = req.source_generator, req.scoring_discriminator
    n_domains = d.spec.n_domains if hasattr(d, "spec") else None
    if n_domains is not None and not 0 <= req.domain_index < n_domains:
        raise IndexError(f"domain index {req.domain_index} out of range for {n_domains} domains")
    layers = list(layers)
    c = _labels(req, g.spec.n_domains)
    with torch.enable_grad():
        fake, feats = g(_grad_input(req.x), c, capture=layers)
        score = class_score(d, fake, req.domain_index)
        distinct = list(dict.fromkeys(layers))
        maps = {}
        for name in distinct:
            maps[name] = attention_from_features(
                feats[name].data, score, alpha_detached=req.alpha_detached, layer_name=name
            )
    return [AttentionMap(maps[name], req.domain_index, name, req.network_id) for name in layers]
