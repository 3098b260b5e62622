from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from ..core.checkpoint import read_checkpoint, write_checkpoint
from ..core.config import ModelConfig, model_config_from_dict, to_plain
from ..core.errors import CheckpointIntegrityError, ShapeError, ValidationError
from .layers import (
    AttnBlock,
    Downsample,
    GroupNormCond,
    PaddedConv2d,
    ResnetBlock,
    Upsample,
    channel_norm_map,
    make_norm,
)

LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0


@dataclass
class LatentDistribution:
    mu: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self) -> None:
        if self.mu.shape != self.logvar.shape:
            raise ShapeError(f"mu {tuple(self.mu.shape)} and logvar {tuple(self.logvar.shape)} differ")
        if not (torch.isfinite(self.mu).all() and torch.isfinite(self.logvar).all()):
            raise ValidationError("latent distribution has non-finite entries")

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.logvar.clamp(LOGVAR_MIN, LOGVAR_MAX))


@dataclass
class ActivationTrace:
    layers: List[str] = field(default_factory=list)
    norms: List[torch.Tensor] = field(default_factory=list)

    def add(self, name: str, h: torch.Tensor) -> None:
        self.layers.append(name)
        self.norms.append(channel_norm_map(h))

    def __len__(self) -> int:
        return len(self.layers)

    def items(self) -> Iterator[Tuple[str, torch.Tensor]]:
        return iter(zip(self.layers, self.norms))


def check_image(x: torch.Tensor, cfg: ModelConfig) -> None:
    if x.dim() != 4:
        raise ShapeError(f"expected an N x C x H x W batch, got shape {tuple(x.shape)}")
    if x.shape[1] != cfg.input_channels:
        raise ShapeError(f"expected {cfg.input_channels} channels, got {x.shape[1]}")
    h, w = x.shape[-2:]
    f = cfg.downscale_factor
    if h % f != 0 or w % f != 0:
        raise ShapeError(f"image {h}x{w} is not a multiple of the downscale factor {f}")
    if not torch.isfinite(x).all():
        raise ValidationError("input image has non-finite pixels")


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        pol, g = cfg.padding_policy, cfg.group_norm_groups
        widths = cfg.level_channels()
        attn = cfg.resolved_attention_levels()
        block = dict(norm_kind="group_norm", groups=g, latent_channels=cfg.latent_channels,
                     scn_hidden=cfg.scn_hidden_channels, policy=pol)

        self.conv_in = PaddedConv2d(cfg.input_channels, widths[0], 3, policy=pol)
        self.levels = nn.ModuleList()
        ch = widths[0]
        for i, width in enumerate(widths):
            level = nn.Module()
            level.res = nn.ModuleList()
            level.attn = nn.ModuleList()
            for _ in range(cfg.blocks_per_level):
                level.res.append(ResnetBlock(ch, width, **block))
                ch = width
                if i in attn:
                    level.attn.append(AttnBlock(ch, **block))
            level.down = Downsample(ch, pol) if i != len(widths) - 1 else None
            self.levels.append(level)

        self.mid_res1 = ResnetBlock(ch, ch, **block)
        self.mid_attn = AttnBlock(ch, **block) if (len(widths) - 1) in attn else None
        self.mid_res2 = ResnetBlock(ch, ch, **block)
        self.norm_out = GroupNormCond(ch, g)
        self.out_channels = ch

    def forward(self, x: torch.Tensor, trace: Optional[ActivationTrace] = None) -> torch.Tensor:
        h = self.conv_in(x)
        if trace is not None:
            trace.add("encoder.conv_in", h)
        for i, level in enumerate(self.levels):
            for j, res in enumerate(level.res):
                h = res(h)
                if trace is not None:
                    trace.add(f"encoder.level{i}.res{j}", h)
                if len(level.attn):
                    h = level.attn[j](h)
                    if trace is not None:
                        trace.add(f"encoder.level{i}.attn{j}", h)
            if level.down is not None:
                h = level.down(h)
                if trace is not None:
                    trace.add(f"encoder.level{i}.down", h)
        h = self.mid_res1(h)
        if self.mid_attn is not None:
            h = self.mid_attn(h)
        h = self.mid_res2(h)
        if trace is not None:
            trace.add("encoder.mid", h)
        return F.silu(self.norm_out(h))


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        pol, g = cfg.padding_policy, cfg.group_norm_groups
        widths = cfg.level_channels()
        attn = cfg.resolved_attention_levels()
        block = dict(norm_kind=cfg.decoder_norm, groups=g, latent_channels=cfg.latent_channels,
                     scn_hidden=cfg.scn_hidden_channels, policy=pol)

        ch = widths[-1]
        self.conv_in = PaddedConv2d(cfg.latent_channels, ch, 3, policy=pol)
        self.mid_res1 = ResnetBlock(ch, ch, **block)
        self.mid_attn = AttnBlock(ch, **block) if (len(widths) - 1) in attn else None
        self.mid_res2 = ResnetBlock(ch, ch, **block)

        # built from the lowest resolution upwards
        self.levels = nn.ModuleList()
        for i in reversed(range(len(widths))):
            width = widths[i]
            level = nn.Module()
            level.index = i
            level.res = nn.ModuleList()
            level.attn = nn.ModuleList()
            for _ in range(cfg.blocks_per_level + 1):
                level.res.append(ResnetBlock(ch, width, **block))
                ch = width
                if i in attn:
                    level.attn.append(AttnBlock(ch, **block))
            level.up = Upsample(ch, pol) if i != 0 else None
            self.levels.append(level)

        self.norm_out = make_norm(cfg.decoder_norm, ch, g, cfg.latent_channels, cfg.scn_hidden_channels, pol)
        self.conv_out = PaddedConv2d(ch, cfg.input_channels, 3, policy=pol)

    def forward(self, z: torch.Tensor, trace: Optional[ActivationTrace] = None) -> torch.Tensor:
        h = self.conv_in(z)
        if trace is not None:
            trace.add("decoder.conv_in", h)
        h = self.mid_res1(h, z)
        if trace is not None:
            trace.add("decoder.mid.res1", h)
        if self.mid_attn is not None:
            h = self.mid_attn(h, z)
            if trace is not None:
                trace.add("decoder.mid.attn", h)
        h = self.mid_res2(h, z)
        if trace is not None:
            trace.add("decoder.mid.res2", h)
        for level in self.levels:
            for j, res in enumerate(level.res):
                h = res(h, z)
                if trace is not None:
                    trace.add(f"decoder.level{level.index}.res{j}", h)
                if len(level.attn):
                    h = level.attn[j](h, z)
                    if trace is not None:
                        trace.add(f"decoder.level{level.index}.attn{j}", h)
            if level.up is not None:
                h = level.up(h)
                if trace is not None:
                    trace.add(f"decoder.level{level.index}.up", h)
        return self.conv_out(F.silu(self.norm_out(h, z)))


class VAEModel(nn.Module):
    """KL-VAE: GroupNorm encoder with mean / log-variance heads, GroupNorm or SCN decoder.

    Images are N x C x H x W tensors in [0, 1]; the network works on [-1, 1] internally.
    """

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        config.validate()
        self.config = config
        self.encoder = Encoder(config)
        ch = self.encoder.out_channels
        self.mu_head = PaddedConv2d(ch, config.latent_channels, 3, policy=config.padding_policy)
        self.logvar_head = PaddedConv2d(ch, config.latent_channels, 3, policy=config.padding_policy)
        self.decoder = Decoder(config)

    def encoder_parameters(self) -> List[nn.Parameter]:
        return [*self.encoder.parameters(), *self.mu_head.parameters(), *self.logvar_head.parameters()]

    def decoder_parameters(self) -> List[nn.Parameter]:
        return list(self.decoder.parameters())

    def encoder_state(self) -> Dict[str, torch.Tensor]:
        return {k: v for k, v in self.state_dict().items() if not k.startswith("decoder.")}

    def encode(self, x: torch.Tensor, trace: Optional[ActivationTrace] = None) -> LatentDistribution:
        check_image(x, self.config)
        h = self.encoder(x * 2.0 - 1.0, trace)
        mu = self.mu_head(h)
        logvar = self.logvar_head(h).clamp(LOGVAR_MIN, LOGVAR_MAX)
        return LatentDistribution(mu=mu, logvar=logvar)

    def decode(self, z: torch.Tensor, trace: bool = False) -> Tuple[torch.Tensor, Optional[ActivationTrace]]:
        if z.dim() != 4 or z.shape[1] != self.config.latent_channels or min(z.shape[-2:]) < 1:
            raise ShapeError(
                f"latent must be N x {self.config.latent_channels} x h x w with h, w >= 1, got {tuple(z.shape)}"
            )
        if not torch.isfinite(z).all():
            raise ValidationError("latent has non-finite entries")
        tr = ActivationTrace() if trace else None
        out = self.decoder(z, tr)
        return (out + 1.0) * 0.5, tr

    def forward(self, x: torch.Tensor, noise: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, LatentDistribution]:
        dist = self.encode(x)
        z = dist.mu if noise is None else reparameterize(dist, noise)
        xhat, _ = self.decode(z)
        return xhat, dist


def encode(model: VAEModel, x: torch.Tensor) -> LatentDistribution:
    return model.encode(x)


def reparameterize(dist: LatentDistribution, noise: torch.Tensor) -> torch.Tensor:
    if noise.shape != dist.mu.shape:
        raise ShapeError(f"noise {tuple(noise.shape)} does not match latent {tuple(dist.mu.shape)}")
    return dist.mu + dist.std * noise


def decode(model: VAEModel, z: torch.Tensor, trace: bool = False) -> Tuple[torch.Tensor, Optional[ActivationTrace]]:
    return model.decode(z, trace=trace)


def forward(model: VAEModel, x: torch.Tensor, noise: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, LatentDistribution]:
    return model(x, noise)


@torch.no_grad()
def reconstruct(model: VAEModel, x: torch.Tensor) -> torch.Tensor:
    """Mean reconstruction (noise = 0)."""
    xhat, _ = model(x, None)
    return xhat


def model_meta(model: VAEModel) -> Dict:
    return {"kind": "model", "config": to_plain(asdict(model.config))}


def save_model(model: VAEModel, path: str | Path) -> Path:
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    return write_checkpoint(path, model_meta(model), tensors)


def model_from_checkpoint(meta: Dict, tensors: Dict[str, torch.Tensor], prefix: str = "model/") -> VAEModel:
    if "config" not in meta:
        raise CheckpointIntegrityError("checkpoint header has no model config")
    model = VAEModel(model_config_from_dict(meta["config"]))
    state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise CheckpointIntegrityError(f"checkpoint lacks {len(missing)} model tensors, e.g. {sorted(missing)[0]}")
    dtype = next(iter(state.values())).dtype
    model.to(dtype)
    model.load_state_dict(state, strict=True)
    return model


def load_model(path: str | Path, prefix: str = "model/") -> VAEModel:
    meta, tensors = read_checkpoint(path)
    return model_from_checkpoint(meta, tensors, prefix)
