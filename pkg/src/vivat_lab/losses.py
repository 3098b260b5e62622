"""Training objective: KL, reconstruction, adversarial and perceptual terms and their weighted sum.

Every loss reduces with a mean over elements so the weights do not depend on resolution or batch
size; the KL term sums over latent channels first, then averages over positions and batch.
"""
from __future__ import annotations

import math
from typing import Dict, Mapping

import torch
import torch.nn.functional as F

from .core.config import ADV_VARIANT_ALIASES, LossWeights
from .core.errors import DivergenceError, ShapeError, ValidationError
from .core.models import LOSS_COMPONENTS, LossBundle
from .nets.perceptual import PerceptualExtractor
from .nets.vae import LatentDistribution


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise ValidationError(f"{what} has non-finite entries")


def _check_same_shape(x: torch.Tensor, xhat: torch.Tensor) -> None:
    if x.shape != xhat.shape:
        raise ShapeError(f"shapes differ: {tuple(x.shape)} vs {tuple(xhat.shape)}")


def kl_loss(dist: LatentDistribution) -> torch.Tensor:
    """KL(q || N(0, I)), summed over channels and averaged over batch and spatial positions."""
    _check_finite(dist.mu, "mu")
    _check_finite(dist.logvar, "logvar")
    mu, logvar = dist.mu, dist.logvar
    per_site = -0.5 * torch.sum(1.0 + logvar - mu.pow(2) - logvar.exp(), dim=1)
    return per_site.mean()


def recon_loss(x: torch.Tensor, xhat: torch.Tensor) -> torch.Tensor:
    _check_same_shape(x, xhat)
    return (x - xhat).pow(2).mean()


def adv_generator_loss(d_logits: torch.Tensor, variant: str = "non_saturating") -> torch.Tensor:
    _check_finite(d_logits, "discriminator logits")
    variant = ADV_VARIANT_ALIASES.get(variant, variant)
    if variant == "paper":
        # log(1 - sigmoid(l)) == -softplus(l)
        return (-F.softplus(d_logits)).mean()
    if variant == "non_saturating":
        # -log(sigmoid(l)) == softplus(-l)
        return F.softplus(-d_logits).mean()
    if variant == "hinge":
        return (-d_logits).mean()
    raise ValidationError(f"unknown adversarial variant {variant!r}")


def discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor, variant: str = "vanilla") -> torch.Tensor:
    _check_finite(d_real, "real logits")
    _check_finite(d_fake, "fake logits")
    if variant == "vanilla":
        return F.softplus(-d_real).mean() + F.softplus(d_fake).mean()
    if variant == "hinge":
        return F.relu(1.0 - d_real).mean() + F.relu(1.0 + d_fake).mean()
    raise ValidationError(f"unknown discriminator variant {variant!r}")


def perceptual_loss(extractor: PerceptualExtractor, x: torch.Tensor, xhat: torch.Tensor) -> torch.Tensor:
    _check_same_shape(x, xhat)
    fx = extractor.features(x)
    fy = extractor.features(xhat)
    total = x.new_zeros(())
    for w, a, b in zip(extractor.level_weights, fx, fy):
        total = total + float(w) * (a - b).abs().mean()
    return total


def combine(components: Mapping[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    """Differentiable weighted objective over the four components."""
    return (weights.lambda_kl * components["kl"] + weights.lambda_recon * components["recon"]
            + weights.lambda_adv * components["adv"] + weights.lambda_perc * components["perc"])


def total_loss(components: Mapping[str, float | torch.Tensor], weights: LossWeights, step: int | None = None) -> LossBundle:
    """Unweighted components plus their weighted sum; raises DivergenceError naming a non-finite term."""
    values: Dict[str, float] = {}
    for name in LOSS_COMPONENTS:
        if name not in components:
            raise ValidationError(f"missing loss component {name!r}")
        v = components[name]
        v = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(v):
            raise DivergenceError(name, v, step)
        values[name] = v
    total = LossBundle.weighted_total(values["kl"], values["recon"], values["adv"], values["perc"], weights)
    if not math.isfinite(total):
        raise DivergenceError("total", total, step)
    return LossBundle(total=total, **values)
