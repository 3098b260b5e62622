from __future__ import annotations

import copy
import dataclasses
import math
import os
import tomllib
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml

from .errors import ConfigError

PADDING_POLICIES = ("zero", "reflect")
DECODER_NORMS = ("group_norm", "scn")
ADV_VARIANTS = ("paper", "non_saturating", "hinge")
# "minimax" names the same log(1 - D) objective as "paper"
ADV_VARIANT_ALIASES = {"minimax": "paper"}
DISC_VARIANTS = ("vanilla", "hinge")
RESIZE_FILTERS = ("bicubic", "bilinear", "nearest")
CROP_MODES = ("random", "center")
PHASES = ("full", "decoder_only")
PRECISIONS = ("fp32", "fp64")

RUN_ROOT_ENV = "VIVAT_RUN_ROOT"


@dataclass
class ModelConfig:
    input_channels: int = 3
    base_channels: int = 128
    channel_multipliers: Tuple[int, ...] = (1, 2, 2, 4)
    downscale_factor: int = 8
    latent_channels: int = 16
    # None means "lowest resolution level only"
    attention_levels: Optional[Tuple[int, ...]] = None
    padding_policy: str = "reflect"
    decoder_norm: str = "scn"
    group_norm_groups: int = 32
    blocks_per_level: int = 2
    scn_hidden_channels: int = 64

    @property
    def num_levels(self) -> int:
        return len(self.channel_multipliers)

    def level_channels(self) -> List[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    def resolved_attention_levels(self) -> Tuple[int, ...]:
        if self.attention_levels is None:
            return (self.num_levels - 1,)
        return tuple(sorted(set(self.attention_levels)))

    def validate(self, prefix: str = "model") -> None:
        for name in ("input_channels", "base_channels", "latent_channels", "group_norm_groups",
                     "blocks_per_level", "scn_hidden_channels"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{prefix}.{name}", "must be >= 1")
        if not self.channel_multipliers:
            raise ConfigError(f"{prefix}.channel_multipliers", "needs at least one level")
        if any(int(m) < 1 for m in self.channel_multipliers):
            raise ConfigError(f"{prefix}.channel_multipliers", "all multipliers must be >= 1")
        expected = 2 ** (self.num_levels - 1)
        if self.downscale_factor != expected:
            raise ConfigError(
                f"{prefix}.downscale_factor",
                f"is {self.downscale_factor} but {self.num_levels} levels give 2^{self.num_levels - 1} = {expected}",
            )
        if self.padding_policy not in PADDING_POLICIES:
            raise ConfigError(f"{prefix}.padding_policy", f"must be one of {PADDING_POLICIES}")
        if self.decoder_norm not in DECODER_NORMS:
            raise ConfigError(f"{prefix}.decoder_norm", f"must be one of {DECODER_NORMS}")
        for lvl in self.resolved_attention_levels():
            if not 0 <= lvl < self.num_levels:
                raise ConfigError(f"{prefix}.attention_levels", f"level {lvl} outside 0..{self.num_levels - 1}")
        for width in set(self.level_channels()):
            if width % self.group_norm_groups != 0:
                raise ConfigError(
                    f"{prefix}.group_norm_groups",
                    f"{self.group_norm_groups} groups do not divide channel width {width}",
                )


@dataclass
class LossWeights:
    lambda_kl: float = 1e-4
    lambda_recon: float = 1.0
    lambda_adv: float = 0.01
    lambda_perc: float = 0.1

    def validate(self, prefix: str = "train.weights") -> None:
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{prefix}.{f.name}", f"must be finite and >= 0, got {v}")


@dataclass
class DiscriminatorConfig:
    layers: int = 3
    base_channels: int = 64

    def validate(self, prefix: str = "train.discriminator") -> None:
        if self.layers < 1:
            raise ConfigError(f"{prefix}.layers", "must be >= 1")
        if self.base_channels < 1:
            raise ConfigError(f"{prefix}.base_channels", "must be >= 1")


@dataclass
class PerceptualConfig:
    backend: str = "random"
    levels: int = 3
    base_channels: int = 32
    seed: int = 0
    level_weights: Optional[Tuple[float, ...]] = None
    weights_path: str = ""

    def resolved_level_weights(self) -> Tuple[float, ...]:
        if self.level_weights is None:
            return tuple(1.0 for _ in range(self.levels))
        return tuple(float(w) for w in self.level_weights)

    def validate(self, prefix: str = "train.perceptual") -> None:
        if self.backend not in ("random", "identity"):
            raise ConfigError(f"{prefix}.backend", "must be 'random' or 'identity'")
        if self.levels < 1:
            raise ConfigError(f"{prefix}.levels", "must be >= 1")
        if len(self.resolved_level_weights()) != self.levels:
            raise ConfigError(f"{prefix}.level_weights", f"needs {self.levels} entries")
        if self.weights_path and not Path(self.weights_path).is_file():
            raise ConfigError(f"{prefix}.weights_path", f"file does not exist: {self.weights_path}")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    ema_decay: float = 0.9999
    batch_size: int = 8
    max_steps: int = 1000
    # length of the frozen-encoder phase that follows max_steps of full training
    decoder_only_steps: int = 0
    disc_start_step: int = 0
    phase: str = "full"
    seed: int = 0
    precision: str = "fp32"
    weights: LossWeights = field(default_factory=LossWeights)
    adv_variant: str = "non_saturating"
    disc_variant: str = "vanilla"
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    perceptual: PerceptualConfig = field(default_factory=PerceptualConfig)
    log_every: int = 10
    checkpoint_every: int = 500
    smoothing: float = 0.9

    def validate(self, prefix: str = "train") -> None:
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ConfigError(f"{prefix}.learning_rate", "must be > 0")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError(f"{prefix}.ema_decay", "must lie in [0, 1]")
        if self.batch_size < 1:
            raise ConfigError(f"{prefix}.batch_size", "must be >= 1")
        if self.max_steps < 0 or self.decoder_only_steps < 0:
            raise ConfigError(f"{prefix}.max_steps", "step counts must be >= 0")
        if self.disc_start_step < 0:
            raise ConfigError(f"{prefix}.disc_start_step", "must be >= 0")
        if self.phase not in PHASES:
            raise ConfigError(f"{prefix}.phase", f"must be one of {PHASES}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"{prefix}.precision", f"must be one of {PRECISIONS}")
        if self.adv_variant not in ADV_VARIANTS and self.adv_variant not in ADV_VARIANT_ALIASES:
            raise ConfigError(f"{prefix}.adv_variant", f"must be one of {ADV_VARIANTS}")
        if self.disc_variant not in DISC_VARIANTS:
            raise ConfigError(f"{prefix}.disc_variant", f"must be one of {DISC_VARIANTS}")
        if not 0.0 <= self.smoothing < 1.0:
            raise ConfigError(f"{prefix}.smoothing", "must lie in [0, 1)")
        if self.log_every < 1 or self.checkpoint_every < 1:
            raise ConfigError(f"{prefix}.log_every", "intervals must be >= 1")
        self.weights.validate(f"{prefix}.weights")
        self.discriminator.validate(f"{prefix}.discriminator")
        self.perceptual.validate(f"{prefix}.perceptual")


@dataclass
class PreprocessSpec:
    intermediate_short_side: int = 480
    crop_size: int = 240
    resize_filter: str = "bicubic"
    crop_mode: str = "random"
    # ablation: crop at source resolution without the proportional resize
    crop_first: bool = False

    def validate(self, prefix: str = "preprocess") -> None:
        if self.intermediate_short_side < 1 or self.crop_size < 1:
            raise ConfigError(f"{prefix}.crop_size", "sizes must be positive")
        if self.crop_size > self.intermediate_short_side:
            raise ConfigError(
                f"{prefix}.crop_size",
                f"{self.crop_size} exceeds intermediate_short_side {self.intermediate_short_side}",
            )
        if self.resize_filter not in RESIZE_FILTERS:
            raise ConfigError(f"{prefix}.resize_filter", f"must be one of {RESIZE_FILTERS}")
        if self.crop_mode not in CROP_MODES:
            raise ConfigError(f"{prefix}.crop_mode", f"must be one of {CROP_MODES}")


@dataclass
class TextureConfig:
    octaves: int = 5
    persistence: float = 0.7
    seed: int = 0
    count: int = 1000
    size: int = 64

    def validate(self, prefix: str = "data.synthetic") -> None:
        if self.octaves < 1:
            raise ConfigError(f"{prefix}.octaves", "must be >= 1")
        if self.count < 1:
            raise ConfigError(f"{prefix}.count", "must be >= 1")
        if self.size < 2:
            raise ConfigError(f"{prefix}.size", "must be >= 2")
        if not self.persistence > 0:
            raise ConfigError(f"{prefix}.persistence", "must be > 0")


@dataclass
class DatasetSource:
    kind: str = "synthetic"
    root: str = ""
    manifest: str = ""
    synthetic: TextureConfig = field(default_factory=TextureConfig)
    shuffle_seed: int = 0
    holdout: int = 0
    workers: int = 0

    def validate(self, prefix: str = "data") -> None:
        if self.kind not in ("directory", "synthetic"):
            raise ConfigError(f"{prefix}.kind", "must be 'directory' or 'synthetic'")
        if self.kind == "directory":
            if not self.root:
                raise ConfigError(f"{prefix}.root", "dataset path is required for kind=directory")
            if not Path(self.root).is_dir():
                raise ConfigError(f"{prefix}.root", f"dataset directory does not exist: {self.root}")
            if self.manifest and not Path(self.root, self.manifest).is_file():
                raise ConfigError(f"{prefix}.manifest", f"manifest not found: {self.manifest}")
        else:
            self.synthetic.validate(f"{prefix}.synthetic")
        if self.holdout < 0:
            raise ConfigError(f"{prefix}.holdout", "must be >= 0")
        if self.workers < 0:
            raise ConfigError(f"{prefix}.workers", "must be >= 0")


@dataclass
class DetectorThresholds:
    color_shift: float = 0.02
    grid: float = 8.0
    blur: float = 0.6
    blur_cutoff: float = 0.25
    corner: float = 2.0
    corner_band: int = 8
    droplet: float = 6.0
    droplet_window: int = 4

    def validate(self, prefix: str = "detectors") -> None:
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"{prefix}.{f.name}", f"must be finite and > 0, got {v}")
        if self.blur_cutoff >= 1.0:
            raise ConfigError(f"{prefix}.blur_cutoff", "is a fraction of Nyquist, must be < 1")


@dataclass
class EvalSpec:
    resolution: int = 256
    resize_filter: str = "bicubic"
    limit: int = 0
    use_ema: bool = True
    model_id: str = ""

    def validate(self, prefix: str = "eval") -> None:
        if self.resolution < 1:
            raise ConfigError(f"{prefix}.resolution", "must be >= 1")
        if self.resize_filter not in RESIZE_FILTERS:
            raise ConfigError(f"{prefix}.resize_filter", f"must be one of {RESIZE_FILTERS}")
        if self.limit < 0:
            raise ConfigError(f"{prefix}.limit", "must be >= 0")

    def protocol(self) -> str:
        return (
            f"proportional {self.resize_filter} resize to short side {self.resolution}, "
            f"center crop {self.resolution}x{self.resolution}, mean latent (noise=0)"
        )


@dataclass
class PathsConfig:
    run_root: str = ""
    run_dir: str = ""

    def resolved_run_root(self) -> Path:
        return Path(self.run_root or os.environ.get(RUN_ROOT_ENV, "") or "runs")


@dataclass
class Provenance:
    config_path: str = ""
    preset: str = ""
    overrides: List[str] = field(default_factory=list)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DatasetSource = field(default_factory=DatasetSource)
    preprocess: PreprocessSpec = field(default_factory=PreprocessSpec)
    detectors: DetectorThresholds = field(default_factory=DetectorThresholds)
    eval: EvalSpec = field(default_factory=EvalSpec)
    paths: PathsConfig = field(default_factory=PathsConfig)
    provenance: Provenance = field(default_factory=Provenance)

    def validate(self, check_data: bool = True) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        if check_data:
            self.data.validate()
        self.preprocess.validate()
        self.detectors.validate()
        self.eval.validate()
        f = self.model.downscale_factor
        if self.preprocess.crop_size % f != 0:
            raise ConfigError("preprocess.crop_size", f"must be a multiple of the downscale factor {f}")
        if self.eval.resolution % f != 0:
            raise ConfigError("eval.resolution", f"must be a multiple of the downscale factor {f}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return to_plain(asdict(self))


PRESETS: Dict[str, Dict[str, Any]] = {
    "baseline": {
        "model": {"padding_policy": "zero", "decoder_norm": "group_norm"},
        "train": {"weights": {"lambda_kl": 1e-3, "lambda_adv": 0.1}},
    },
    "vivat": {
        "model": {"padding_policy": "reflect", "decoder_norm": "scn", "latent_channels": 16},
        "train": {
            "learning_rate": 1e-4,
            "ema_decay": 0.9999,
            "disc_start_step": 0,
            "precision": "fp32",
            "weights": {"lambda_kl": 1e-4, "lambda_recon": 1.0, "lambda_adv": 0.01, "lambda_perc": 0.1},
        },
    },
    # laptop-sized network and data for smoke runs and directional studies
    "micro": {
        "model": {
            "base_channels": 32,
            "channel_multipliers": [1, 1, 2],
            "downscale_factor": 4,
            "latent_channels": 4,
            "group_norm_groups": 8,
            "blocks_per_level": 1,
            "scn_hidden_channels": 16,
        },
        "train": {
            "batch_size": 8,
            "max_steps": 2000,
            "ema_decay": 0.99,
            "checkpoint_every": 500,
            "discriminator": {"layers": 2, "base_channels": 16},
            "perceptual": {"levels": 3, "base_channels": 8},
        },
        "data": {"kind": "synthetic", "synthetic": {"count": 1000, "size": 32}, "holdout": 16},
        "preprocess": {"intermediate_short_side": 32, "crop_size": 32},
        "eval": {"resolution": 32},
        "detectors": {"corner_band": 4},
    },
}


def to_plain(obj: Any) -> Any:
    """Tuples become lists so the result is YAML/JSON friendly."""
    if isinstance(obj, dict):
        return {k: to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    return obj


def deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for k, v in (update or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config_file(path: str) -> Dict[str, Any]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError("--config", f"config file not found: {path}")
    if p.suffix.lower() == ".toml":
        with open(p, "rb") as f:
            return tomllib.load(f)
    with open(p, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("--config", "top level of a config file must be a mapping")
    return data


def parse_override(item: str) -> Tuple[List[str], Any]:
    if "=" not in item:
        raise ConfigError("--set", f"expected key=value, got {item!r}")
    key, raw = item.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError("--set", f"empty key in {item!r}")
    return parts, yaml.safe_load(raw)


def apply_overrides(data: Dict[str, Any], overrides: List[str]) -> Dict[str, Any]:
    out = copy.deepcopy(data)
    for item in overrides:
        parts, value = parse_override(item)
        node = out
        for p in parts[:-1]:
            nxt = node.get(p)
            if not isinstance(nxt, dict):
                raise ConfigError(".".join(parts), f"{p!r} is not a config section")
            node = nxt
        if parts[-1] not in node:
            raise ConfigError(".".join(parts), "unknown config field")
        node[parts[-1]] = value
    return out


def _coerce(hint: Any, value: Any, where: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(where, "expected a mapping")
        return build_dataclass(hint, value, where)
    if origin is typing.Union:
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(where, "expected a list")
        return tuple(_coerce(args[0], v, where) for v in value)
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(where, "expected a list")
        return [_coerce(args[0], v, where) if args else v for v in value]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(where, f"expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or float(value) != int(value):
            raise ConfigError(where, f"expected an integer, got {value!r}")
        return int(value)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(where, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        return "" if value is None else str(value)
    return value


def build_dataclass(cls: Any, data: Dict[str, Any], prefix: str = "") -> Any:
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{prefix}.{unknown[0]}" if prefix else unknown[0]
        raise ConfigError(where, "unknown config field")
    kwargs = {}
    for name, value in data.items():
        where = f"{prefix}.{name}" if prefix else name
        kwargs[name] = _coerce(hints[name], value, where)
    return cls(**kwargs)


def resolve_run_config(
    config_path: str = "",
    preset: str = "",
    overrides: Optional[List[str]] = None,
    seed: Optional[int] = None,
    run_dir: str = "",
    check_data: bool = True,
) -> RunConfig:
    """defaults -> preset -> config file -> --set overrides -> --seed/--run-dir"""
    data = RunConfig().to_dict()
    if preset:
        if preset not in PRESETS:
            raise ConfigError("--preset", f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        data = deep_merge(data, PRESETS[preset])
    if config_path:
        data = deep_merge(data, load_config_file(config_path))
    data = apply_overrides(data, list(overrides or []))
    if seed is not None:
        data["train"]["seed"] = int(seed)
    if run_dir:
        data["paths"]["run_dir"] = run_dir
    data["provenance"] = {
        "config_path": config_path,
        "preset": preset,
        "overrides": list(overrides or []),
    }
    cfg = build_dataclass(RunConfig, data)
    return cfg.validate(check_data=check_data)


def run_config_from_dict(data: Dict[str, Any], check_data: bool = False) -> RunConfig:
    merged = deep_merge(RunConfig().to_dict(), data)
    return build_dataclass(RunConfig, merged).validate(check_data=check_data)


def write_run_config(cfg: RunConfig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=False)


def model_config_from_dict(data: Dict[str, Any]) -> ModelConfig:
    cfg = build_dataclass(ModelConfig, data, "model")
    cfg.validate()
    return cfg
