"""Spatially Conditional Normalization for the decoder.

The activation is group-normalized without affine terms, then modulated by
per-pixel scale and shift maps computed from the latent, resized to the
activation's resolution with nearest-neighbour interpolation::

    out = group_norm(h) * (1 + gamma(up(z))) + beta(up(z))

gamma and beta heads start at zero, so a fresh layer is plain group normalization.
"""
from __future__ import annotations

from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from ..core.errors import ValidationError
from .layers import PaddedConv2d, zero_


def upsample_latent(z: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    zh, zw = z.shape[-2:]
    h, w = size
    if h % zh != 0 or w % zw != 0 or h // zh != w // zw:
        raise ValidationError(
            f"activation {h}x{w} is not an integer multiple of latent {zh}x{zw}"
        )
    if (h, w) == (zh, zw):
        return z
    return F.interpolate(z, size=(h, w), mode="nearest")


class SpatialConditionalNorm(nn.Module):
    def __init__(self, channels: int, latent_channels: int, groups: int = 32, hidden: int = 64,
                 policy: str = "reflect") -> None:
        super().__init__()
        self.groups = groups
        self.eps = 1e-6
        self.shared = PaddedConv2d(latent_channels, hidden, 3, policy=policy)
        self.gamma = PaddedConv2d(hidden, channels, 3, policy=policy)
        self.beta = PaddedConv2d(hidden, channels, 3, policy=policy)
        zero_(self.gamma.conv)
        zero_(self.beta.conv)

    def modulation(self, z: torch.Tensor, size: tuple[int, int]) -> tuple[torch.Tensor, torch.Tensor]:
        actv = F.relu(self.shared(upsample_latent(z, size)))
        return self.gamma(actv), self.beta(actv)

    def forward(self, h: torch.Tensor, zq: Optional[torch.Tensor] = None) -> torch.Tensor:
        if zq is None:
            raise ValidationError("spatially conditional normalization needs the latent map")
        normalized = F.group_norm(h, self.groups, eps=self.eps)
        gamma, beta = self.modulation(zq, tuple(h.shape[-2:]))
        return normalized * (1 + gamma) + beta


def scn_apply(h: torch.Tensor, z: torch.Tensor, params: SpatialConditionalNorm) -> torch.Tensor:
    return params(h, z)
