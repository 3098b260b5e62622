from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from ..core.errors import ValidationError


def pad2d(x: torch.Tensor, width: int, policy: str) -> torch.Tensor:
    """Pad both spatial dims of an N x C x H x W map by ``width`` on every side.

    ``reflect`` mirrors without repeating the edge sample, so each spatial dim must exceed ``width``.
    """
    if width < 0:
        raise ValidationError(f"padding width must be >= 0, got {width}")
    if width == 0:
        return x
    if policy == "zero":
        return F.pad(x, (width, width, width, width), mode="constant", value=0.0)
    if policy == "reflect":
        h, w = x.shape[-2:]
        if width >= h or width >= w:
            raise ValidationError(f"reflect padding width {width} needs spatial dims > width, got {h}x{w}")
        return F.pad(x, (width, width, width, width), mode="reflect")
    raise ValidationError(f"unknown padding policy {policy!r}")


def init_fan_in_(conv: nn.Conv2d) -> None:
    fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1] // conv.groups
    nn.init.normal_(conv.weight, mean=0.0, std=1.0 / math.sqrt(fan_in))
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)


def zero_(conv: nn.Conv2d) -> None:
    nn.init.zeros_(conv.weight)
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)


class PaddedConv2d(nn.Module):
    """Conv2d whose border handling follows the network's padding policy."""

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int = 3, stride: int = 1, policy: str = "reflect") -> None:
        super().__init__()
        self.pad = (kernel_size - 1) // 2
        self.policy = policy
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size, stride=stride, padding=0)
        init_fan_in_(self.conv)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(pad2d(x, self.pad, self.policy))


class GroupNormCond(nn.Module):
    """Affine group normalization; accepts and ignores the latent so blocks share one call shape."""

    def __init__(self, channels: int, groups: int) -> None:
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels, eps=1e-6, affine=True)

    def forward(self, h: torch.Tensor, zq: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.norm(h)


def make_norm(kind: str, channels: int, groups: int, latent_channels: int, hidden: int, policy: str) -> nn.Module:
    if kind == "group_norm":
        return GroupNormCond(channels, groups)
    if kind == "scn":
        from .scn import SpatialConditionalNorm

        return SpatialConditionalNorm(channels, latent_channels, groups=groups, hidden=hidden, policy=policy)
    raise ValidationError(f"unknown norm kind {kind!r}")


class ResnetBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, norm_kind: str, groups: int, latent_channels: int,
                 scn_hidden: int, policy: str) -> None:
        super().__init__()
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.norm1 = make_norm(norm_kind, in_ch, groups, latent_channels, scn_hidden, policy)
        self.conv1 = PaddedConv2d(in_ch, out_ch, 3, policy=policy)
        self.norm2 = make_norm(norm_kind, out_ch, groups, latent_channels, scn_hidden, policy)
        self.conv2 = PaddedConv2d(out_ch, out_ch, 3, policy=policy)
        # residual branch starts as a no-op
        zero_(self.conv2.conv)
        self.shortcut: Optional[nn.Conv2d] = None
        if in_ch != out_ch:
            self.shortcut = nn.Conv2d(in_ch, out_ch, kernel_size=1)
            init_fan_in_(self.shortcut)

    def forward(self, x: torch.Tensor, zq: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x, zq)))
        h = self.conv2(F.silu(self.norm2(h, zq)))
        residual = x if self.shortcut is None else self.shortcut(x)
        return residual + h


class AttnBlock(nn.Module):
    """Single-head spatial self-attention with 1x1 projections."""

    def __init__(self, channels: int, norm_kind: str, groups: int, latent_channels: int, scn_hidden: int,
                 policy: str) -> None:
        super().__init__()
        self.norm = make_norm(norm_kind, channels, groups, latent_channels, scn_hidden, policy)
        self.q = nn.Conv2d(channels, channels, 1)
        self.k = nn.Conv2d(channels, channels, 1)
        self.v = nn.Conv2d(channels, channels, 1)
        self.proj_out = nn.Conv2d(channels, channels, 1)
        for conv in (self.q, self.k, self.v):
            init_fan_in_(conv)
        zero_(self.proj_out)

    def forward(self, x: torch.Tensor, zq: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.norm(x, zq)
        n, c, hh, ww = h.shape
        q = self.q(h).reshape(n, c, hh * ww).permute(0, 2, 1)
        k = self.k(h).reshape(n, c, hh * ww)
        v = self.v(h).reshape(n, c, hh * ww)
        attn = torch.softmax(torch.bmm(q, k) * (c ** -0.5), dim=2)
        out = torch.bmm(v, attn.permute(0, 2, 1)).reshape(n, c, hh, ww)
        return x + self.proj_out(out)


class Downsample(nn.Module):
    """Stride-2 3x3 convolution."""

    def __init__(self, channels: int, policy: str) -> None:
        super().__init__()
        self.conv = PaddedConv2d(channels, channels, 3, stride=2, policy=policy)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    """Nearest-neighbour x2 followed by a 3x3 convolution."""

    def __init__(self, channels: int, policy: str) -> None:
        super().__init__()
        self.conv = PaddedConv2d(channels, channels, 3, policy=policy)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


def channel_norm_map(h: torch.Tensor) -> torch.Tensor:
    return torch.linalg.vector_norm(h.detach(), ord=2, dim=1)
