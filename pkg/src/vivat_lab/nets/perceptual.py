"""Frozen feature extractors for the perceptual loss.

Any module exposing ``features(x) -> list[Tensor]`` and ``level_weights`` can stand in for
the default random pyramid, e.g. one loaded with pretrained weights via ``weights_path``.
"""
from __future__ import annotations

import logging
from typing import List, Protocol, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from ..core.config import PerceptualConfig
from ..core.errors import ValidationError

log = logging.getLogger("vivat_lab")


class PerceptualExtractor(Protocol):
    level_weights: Sequence[float]

    def features(self, x: torch.Tensor) -> List[torch.Tensor]: ...


class RandomFeaturePyramid(nn.Module):
    """Deterministic stride-2 conv pyramid drawn from a seeded generator; never trained."""

    def __init__(self, levels: int = 3, base_channels: int = 32, in_channels: int = 3, seed: int = 0,
                 level_weights: Sequence[float] | None = None) -> None:
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.seed = seed
        self.level_weights = tuple(level_weights) if level_weights is not None else (1.0,) * levels
        if len(self.level_weights) != levels:
            raise ValidationError(f"{levels} levels need {levels} weights, got {len(self.level_weights)}")
        self.convs = nn.ModuleList()
        ch = in_channels
        for i in range(levels):
            out = base_channels * (2 ** i)
            conv = nn.Conv2d(ch, out, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) / (ch * 9) ** 0.5)
                conv.bias.zero_()
            self.convs.append(conv)
            ch = out
        self.requires_grad_(False)
        self.eval()

    def features(self, x: torch.Tensor) -> List[torch.Tensor]:
        feats = []
        h = x * 2.0 - 1.0
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
            feats.append(h)
        return feats

    def train(self, mode: bool = True) -> "RandomFeaturePyramid":
        # frozen: stays in eval mode
        return super().train(False)


class IdentityExtractor(nn.Module):
    """Single level, phi = id; the perceptual loss collapses to mean absolute error."""

    level_weights = (1.0,)

    def features(self, x: torch.Tensor) -> List[torch.Tensor]:
        return [x]


def build_extractor(cfg: PerceptualConfig, in_channels: int = 3) -> nn.Module:
    if cfg.backend == "identity":
        return IdentityExtractor()
    pyramid = RandomFeaturePyramid(cfg.levels, cfg.base_channels, in_channels, cfg.seed, cfg.resolved_level_weights())
    if cfg.weights_path:
        state = torch.load(cfg.weights_path, map_location="cpu", weights_only=True)
        pyramid.load_state_dict(state, strict=True)
        pyramid.requires_grad_(False)
        log.info("perceptual extractor weights loaded from %s", cfg.weights_path)
    return pyramid
