"""Patch discriminator.

Takes an N x C x H x W batch and returns an N x 1 x h x w map of logits, each judging one
receptive-field patch. With ``layers = L`` the stack is one stride-2 input conv, L feature convs
(stride 2 except the last, stride 1), and a stride-1 logit conv; every conv is 4x4 with padding 1.
"""
from __future__ import annotations

from typing import Tuple

import torch
from torch import nn

from ..core.config import DiscriminatorConfig
from ..core.errors import ShapeError


def _conv_out(n: int, stride: int) -> int:
    return (n + 2 - 4) // stride + 1


def _norm_groups(channels: int) -> int:
    for g in (32, 16, 8, 4, 2):
        if channels % g == 0:
            return g
    return 1


class Discriminator(nn.Module):
    def __init__(self, config: DiscriminatorConfig, image_channels: int = 3) -> None:
        super().__init__()
        self.config = config
        base = config.base_channels
        layers: list[nn.Module] = [nn.Conv2d(image_channels, base, 4, 2, 1), nn.LeakyReLU(0.2)]
        mult = 1
        for i in range(1, config.layers + 1):
            prev, mult = mult, min(2 ** i, 8)
            stride = 2 if i < config.layers else 1
            layers += [
                nn.Conv2d(base * prev, base * mult, 4, stride, 1, bias=False),
                nn.GroupNorm(_norm_groups(base * mult), base * mult),
                nn.LeakyReLU(0.2),
            ]
        layers.append(nn.Conv2d(base * mult, 1, 4, 1, 1))
        self.model = nn.Sequential(*layers)
        for m in self.model:
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, 0.0, 0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def strides(self) -> list[int]:
        return [2] + [2 if i < self.config.layers else 1 for i in range(1, self.config.layers + 1)] + [1]

    def output_shape(self, height: int, width: int) -> Tuple[int, int]:
        h, w = height, width
        for s in self.strides():
            h, w = _conv_out(h, s), _conv_out(w, s)
        return h, w

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        oh, ow = self.output_shape(*x.shape[-2:])
        if oh < 1 or ow < 1:
            raise ShapeError(f"input {tuple(x.shape[-2:])} is too small for a {self.config.layers}-layer discriminator")
        # logits judged on [-1, 1] images, like the autoencoder
        return self.model(x * 2.0 - 1.0)
