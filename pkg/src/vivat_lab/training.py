"""Two-phase optimisation: full VAE training, then decoder finetuning with a frozen encoder.

One Adam step for the autoencoder and one for the discriminator per training step (1:1), an EMA
copy of the autoencoder for evaluation, and checkpoints that resume bit-exactly.
"""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import torch
from torch import nn

from .core.checkpoint import read_checkpoint, write_checkpoint
from .core.config import RunConfig, run_config_from_dict
from .core.errors import CheckpointIntegrityError, ConfigError, DivergenceError, ShapeError, ValidationError
from .core.models import LossBundle
from .core.output import append_jsonl
from .core.utils import PRECISION_DTYPES, grad_norm, seed_everything
from .data import BatchLoader, ImageDataset, eval_batches, to_batch
from .losses import (
    adv_generator_loss,
    combine,
    discriminator_loss,
    kl_loss,
    perceptual_loss,
    recon_loss,
    total_loss,
)
from .nets.discriminator import Discriminator
from .nets.perceptual import build_extractor
from .nets.vae import VAEModel, check_image, model_meta, reparameterize

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class RollingStats:
    smoothing: float = 0.9
    smoothed: Dict[str, float] = field(default_factory=dict)
    initial: Dict[str, float] = field(default_factory=dict)
    count: int = 0

    def update(self, bundle: LossBundle) -> None:
        values = bundle.to_json()
        if not self.initial:
            self.initial = dict(values)
            self.smoothed = dict(values)
        else:
            a = self.smoothing
            self.smoothed = {k: a * self.smoothed[k] + (1.0 - a) * v for k, v in values.items()}
        self.count += 1

    def to_json(self) -> Dict:
        return {"smoothing": self.smoothing, "smoothed": self.smoothed, "initial": self.initial, "count": self.count}


@dataclass
class TrainState:
    config: RunConfig
    step: int
    phase: str
    model: VAEModel
    ema: VAEModel
    discriminator: Discriminator
    gen_optimizer: torch.optim.Optimizer
    disc_optimizer: torch.optim.Optimizer
    generator: torch.Generator
    stats: RollingStats


@dataclass(frozen=True)
class StepResult:
    losses: LossBundle
    disc_loss: float
    grad_norm: float


def _adam(params: Sequence[nn.Parameter], lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=0.0)


def _gen_params(model: VAEModel, phase: str) -> List[nn.Parameter]:
    return model.decoder_parameters() if phase == "decoder_only" else list(model.parameters())


def build_state(cfg: RunConfig) -> TrainState:
    tc = cfg.train
    seed_everything(tc.seed)
    dtype = PRECISION_DTYPES[tc.precision]
    model = VAEModel(cfg.model).to(dtype)
    disc = Discriminator(tc.discriminator, cfg.model.input_channels).to(dtype)
    ema = copy.deepcopy(model).requires_grad_(False)
    state = TrainState(
        config=cfg,
        step=0,
        phase="full",
        model=model,
        ema=ema,
        discriminator=disc,
        gen_optimizer=_adam(list(model.parameters()), tc.learning_rate),
        disc_optimizer=_adam(list(disc.parameters()), tc.learning_rate),
        generator=torch.Generator().manual_seed(tc.seed + 1),
        stats=RollingStats(smoothing=tc.smoothing),
    )
    if tc.phase == "decoder_only":
        state = freeze_encoder(state)
    return state


def ema_update(ema_params: Iterable[torch.Tensor], params: Iterable[torch.Tensor], decay: float) -> List[torch.Tensor]:
    """ema <- decay * ema + (1 - decay) * params, in place, elementwise."""
    ema_list, param_list = list(ema_params), list(params)
    if len(ema_list) != len(param_list):
        raise ShapeError(f"EMA has {len(ema_list)} tensors, model has {len(param_list)}")
    with torch.no_grad():
        for e, p in zip(ema_list, param_list):
            if e.shape != p.shape:
                raise ShapeError(f"EMA tensor {tuple(e.shape)} does not match parameter {tuple(p.shape)}")
            e.mul_(decay).add_(p.detach(), alpha=1.0 - decay)
    return ema_list


# config sections a resumed state cannot change: its tensors were built from them
FIXED_ON_RESUME = ("model", "train.discriminator", "train.precision")


def _lookup(d: Dict, dotted: str):
    for part in dotted.split("."):
        d = d[part]
    return d


def adopt_config(state: TrainState, cfg: RunConfig) -> TrainState:
    """Continue a loaded state under ``cfg``: new weights, schedule and variants, same networks."""
    old, new = state.config.to_dict(), cfg.to_dict()
    for key in FIXED_ON_RESUME:
        if _lookup(old, key) != _lookup(new, key):
            raise ConfigError(key, "differs from the checkpoint and cannot change on resume")
    for opt in (state.gen_optimizer, state.disc_optimizer):
        for group in opt.param_groups:
            group["lr"] = cfg.train.learning_rate
    state.config = cfg
    return state


def freeze_encoder(state: TrainState) -> TrainState:
    """Encoder and latent heads stop training; Adam moments of the decoder carry over."""
    for p in state.model.encoder_parameters():
        p.requires_grad_(False)
        p.grad = None
    old = state.gen_optimizer
    new = _adam(state.model.decoder_parameters(), state.config.train.learning_rate)
    for p in state.model.decoder_parameters():
        if p in old.state:
            new.state[p] = old.state[p]
    state.gen_optimizer = new
    state.phase = "decoder_only"
    return state


def _abort_step(state: TrainState, rng_snapshot: torch.Tensor) -> None:
    state.generator.set_state(rng_snapshot)
    state.gen_optimizer.zero_grad(set_to_none=True)
    state.disc_optimizer.zero_grad(set_to_none=True)


def train_step(state: TrainState, batch: torch.Tensor, extractor: nn.Module) -> StepResult:
    tc = state.config.train
    model, disc = state.model, state.discriminator
    dtype = next(model.parameters()).dtype
    batch = batch.to(dtype)
    if batch.shape[0] != tc.batch_size:
        raise ShapeError(f"batch of {batch.shape[0]} images, config says {tc.batch_size}")
    # bad input is a validation error, never a divergence
    check_image(batch, model.config)

    rng_snapshot = state.generator.get_state()
    model.train()
    disc_active = state.step >= tc.disc_start_step
    d_loss = None
    component = "latent"
    try:
        dist = model.encode(batch)
        noise = torch.randn(dist.mu.shape, generator=state.generator, dtype=dist.mu.dtype)
        xhat, _ = model.decode(reparameterize(dist, noise))
        comps = {
            "kl": kl_loss(dist),
            "recon": recon_loss(batch, xhat),
            "perc": perceptual_loss(extractor, batch, xhat),
            "adv": batch.new_zeros(()),
        }
        component = "adv"
        # recorded unweighted even when lambda_adv is 0
        if disc_active:
            comps["adv"] = adv_generator_loss(disc(xhat), tc.adv_variant)
        bundle = total_loss(comps, tc.weights, step=state.step)
        component = "disc"
        if disc_active:
            d_loss = discriminator_loss(disc(batch), disc(xhat.detach()), tc.disc_variant)
            if not torch.isfinite(d_loss):
                raise DivergenceError("disc", float(d_loss), state.step)
    except DivergenceError:
        _abort_step(state, rng_snapshot)
        raise
    except ShapeError:
        _abort_step(state, rng_snapshot)
        raise
    except ValidationError as exc:
        # non-finite activations reached a checked input
        _abort_step(state, rng_snapshot)
        raise DivergenceError(component, math.nan, state.step) from exc

    # both gradients are checked before either optimizer steps
    state.gen_optimizer.zero_grad(set_to_none=True)
    combine(comps, tc.weights).backward()
    gnorm = grad_norm(_gen_params(model, state.phase))
    if not math.isfinite(gnorm):
        _abort_step(state, rng_snapshot)
        raise DivergenceError("grad", gnorm, state.step)

    # the generator pass leaves gradients on D; they are never applied
    state.disc_optimizer.zero_grad(set_to_none=True)
    disc_value = 0.0
    if d_loss is not None:
        d_loss.backward()
        dnorm = grad_norm(disc.parameters())
        if not math.isfinite(dnorm):
            _abort_step(state, rng_snapshot)
            raise DivergenceError("disc_grad", dnorm, state.step)
        disc_value = float(d_loss.detach())

    state.gen_optimizer.step()
    if d_loss is not None:
        state.disc_optimizer.step()

    ema_update(state.ema.parameters(), model.parameters(), tc.ema_decay)
    state.step += 1
    state.stats.update(bundle)
    return StepResult(losses=bundle, disc_loss=disc_value, grad_norm=gnorm)


def _optimizer_tensors(opt: torch.optim.Optimizer, prefix: str) -> Dict[str, torch.Tensor]:
    out = {}
    for idx, slot in opt.state_dict()["state"].items():
        for key, value in slot.items():
            t = value if isinstance(value, torch.Tensor) else torch.tensor(value)
            out[f"{prefix}/{idx}/{key}"] = t
    return out


def _load_optimizer(opt: torch.optim.Optimizer, tensors: Dict[str, torch.Tensor], prefix: str) -> None:
    state: Dict[int, Dict[str, torch.Tensor]] = {}
    for name, t in tensors.items():
        if not name.startswith(prefix + "/"):
            continue
        _, idx, key = name.split("/", 2)
        state.setdefault(int(idx), {})[key] = t
    sd = opt.state_dict()
    sd["state"] = state
    opt.load_state_dict(sd)


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    meta = model_meta(state.model)
    meta.update({
        "kind": "train_state",
        "run_config": state.config.to_dict(),
        "step": state.step,
        "phase": state.phase,
        "stats": state.stats.to_json(),
    })
    tensors: Dict[str, torch.Tensor] = {}
    tensors.update({f"model/{k}": v for k, v in state.model.state_dict().items()})
    tensors.update({f"ema/{k}": v for k, v in state.ema.state_dict().items()})
    tensors.update({f"disc/{k}": v for k, v in state.discriminator.state_dict().items()})
    tensors.update(_optimizer_tensors(state.gen_optimizer, "opt_gen"))
    tensors.update(_optimizer_tensors(state.disc_optimizer, "opt_disc"))
    tensors["rng/noise"] = state.generator.get_state()
    return write_checkpoint(path, meta, tensors)


def _strip(tensors: Dict[str, torch.Tensor], prefix: str) -> Dict[str, torch.Tensor]:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def load_checkpoint(path: str | Path) -> TrainState:
    meta, tensors = read_checkpoint(path)
    if meta.get("kind") != "train_state":
        raise CheckpointIntegrityError(f"{path} holds a {meta.get('kind')!r} checkpoint, not a training state")
    cfg = run_config_from_dict(meta["run_config"], check_data=False)
    dtype = PRECISION_DTYPES[cfg.train.precision]
    model = VAEModel(cfg.model).to(dtype)
    model.load_state_dict(_strip(tensors, "model/"), strict=True)
    ema = VAEModel(cfg.model).to(dtype)
    ema.load_state_dict(_strip(tensors, "ema/"), strict=True)
    ema.requires_grad_(False)
    disc = Discriminator(cfg.train.discriminator, cfg.model.input_channels).to(dtype)
    disc.load_state_dict(_strip(tensors, "disc/"), strict=True)

    phase = meta["phase"]
    if phase == "decoder_only":
        for p in model.encoder_parameters():
            p.requires_grad_(False)
    gen_opt = _adam(_gen_params(model, phase), cfg.train.learning_rate)
    _load_optimizer(gen_opt, tensors, "opt_gen")
    disc_opt = _adam(list(disc.parameters()), cfg.train.learning_rate)
    _load_optimizer(disc_opt, tensors, "opt_disc")

    generator = torch.Generator()
    generator.set_state(tensors["rng/noise"])
    s = meta["stats"]
    stats = RollingStats(smoothing=s["smoothing"], smoothed=s["smoothed"], initial=s["initial"], count=s["count"])
    return TrainState(config=cfg, step=int(meta["step"]), phase=phase, model=model, ema=ema, discriminator=disc,
                      gen_optimizer=gen_opt, disc_optimizer=disc_opt, generator=generator, stats=stats)


@torch.no_grad()
def heldout_recon_loss(model: VAEModel, dataset: ImageDataset, resolution: int, limit: int = 0) -> float:
    """Mean-latent reconstruction MSE over a held-out set."""
    model.eval()
    dtype = next(model.parameters()).dtype
    total, n = 0.0, 0
    for _, images in eval_batches(dataset, resolution, limit=limit):
        x = to_batch(images, dtype)
        xhat, _ = model(x, None)
        total += float(recon_loss(x, xhat)) * x.shape[0]
        n += x.shape[0]
    return total / max(n, 1)


class Trainer:
    """Drives train_step over a batch schedule, with JSON-lines metrics and periodic checkpoints."""

    def __init__(self, cfg: RunConfig, train_set: ImageDataset, run_dir: Optional[Path] = None,
                 log: Optional[logging.Logger] = None, state: Optional[TrainState] = None) -> None:
        self.cfg = cfg
        self.log = log or logging.getLogger("vivat_lab")
        self.run_dir = Path(run_dir) if run_dir else None
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
        self.state = adopt_config(state, cfg) if state is not None else build_state(cfg)
        dtype = PRECISION_DTYPES[cfg.train.precision]
        self.extractor = build_extractor(cfg.train.perceptual, cfg.model.input_channels).to(dtype)
        self.loader = BatchLoader(train_set, cfg.train.batch_size, seed=cfg.data.shuffle_seed,
                                  workers=cfg.data.workers, dtype=dtype)
        self.history: List[StepResult] = []

    @property
    def checkpoint_dir(self) -> Optional[Path]:
        return self.run_dir / "checkpoints" if self.run_dir else None

    def _emit(self, result: StepResult, started: float) -> None:
        st = self.state
        if self.run_dir is not None:
            record = {"step": st.step, "phase": st.phase, **result.losses.to_json(),
                      "disc_loss": result.disc_loss, "grad_norm": result.grad_norm,
                      "wall_time": round(time.time() - started, 6)}
            append_jsonl(str(self.run_dir / "metrics.jsonl"), [record])
        if st.step % self.cfg.train.log_every == 0:
            b = result.losses
            self.log.info(
                "step=%s phase=%s total=%.5f kl=%.4f recon=%.5f adv=%.4f perc=%.4f disc=%.4f grad_norm=%.3f",
                st.step, st.phase, b.total, b.kl, b.recon, b.adv, b.perc, result.disc_loss, result.grad_norm,
            )

    def save(self, name: Optional[str] = None) -> Optional[Path]:
        if self.checkpoint_dir is None:
            return None
        path = self.checkpoint_dir / (name or f"step_{self.state.step:07d}.ckpt")
        save_checkpoint(self.state, path)
        save_checkpoint(self.state, self.checkpoint_dir / "latest.ckpt")
        self.log.info("checkpoint step=%s path=%s", self.state.step, path)
        return path

    def run_until(self, target_step: int) -> TrainState:
        started = time.time()
        while self.state.step < target_step:
            batch = self.loader.batch(self.state.step)
            try:
                result = train_step(self.state, batch, self.extractor)
            except DivergenceError as exc:
                self.log.error("divergence at step=%s component=%s", self.state.step, exc.component)
                self.save("last_finite.ckpt")
                raise
            self.history.append(result)
            self._emit(result, started)
            if self.state.step % self.cfg.train.checkpoint_every == 0:
                self.save()
        return self.state

    def fit(self) -> TrainState:
        """First phase up to max_steps, then the frozen-encoder phase for decoder_only_steps."""
        tc = self.cfg.train
        if self.state.step < tc.max_steps:
            self.log.info("phase=%s steps=%s..%s", self.state.phase, self.state.step, tc.max_steps)
            self.run_until(tc.max_steps)
        if tc.decoder_only_steps > 0:
            if self.state.phase != "decoder_only":
                freeze_encoder(self.state)
            target = tc.max_steps + tc.decoder_only_steps
            self.log.info("phase=decoder_only steps=%s..%s", self.state.step, target)
            self.run_until(target)
        self.save()
        return self.state

    def finetune_decoder(self, steps: int) -> TrainState:
        if self.state.phase != "decoder_only":
            freeze_encoder(self.state)
        self.log.info("phase=decoder_only resumed at step=%s for %s steps", self.state.step, steps)
        self.run_until(self.state.step + steps)
        self.save()
        return self.state
