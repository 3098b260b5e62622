from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from .config import DetectorThresholds, LossWeights

LOSS_COMPONENTS = ("kl", "recon", "adv", "perc")


@dataclass(frozen=True)
class LossBundle:
    kl: float
    recon: float
    adv: float
    perc: float
    total: float

    @staticmethod
    def weighted_total(kl: float, recon: float, adv: float, perc: float, weights: LossWeights) -> float:
        return (weights.lambda_kl * kl + weights.lambda_recon * recon
                + weights.lambda_adv * adv + weights.lambda_perc * perc)

    def recomputed_total(self, weights: LossWeights) -> float:
        return self.weighted_total(self.kl, self.recon, self.adv, self.perc, weights)

    def to_json(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class ColorShiftResult:
    shift: Tuple[float, ...]
    score: float
    dominant_channel: int
    threshold: float
    flagged: bool


@dataclass(frozen=True)
class GridResult:
    score: float
    period: Optional[float]
    threshold: float
    flagged: bool


@dataclass(frozen=True)
class BlurResult:
    ratio: Optional[float]
    cutoff: float
    threshold: float
    flagged: bool
    applicable: bool = True


@dataclass(frozen=True)
class CornerResult:
    ratio: float
    band: int
    threshold: float
    flagged: bool


@dataclass(frozen=True)
class DropletResult:
    score: float
    location: Tuple[int, int]
    window: int
    threshold: float
    flagged: bool
    # True when MAD was zero and mean/std scoring was used instead
    fallback: bool = False


@dataclass(frozen=True)
class ArtifactReport:
    color_shift: ColorShiftResult
    grid: GridResult
    blur: BlurResult
    corner: CornerResult
    droplet: DropletResult
    thresholds: DetectorThresholds
    name: str = ""

    def flags(self) -> Dict[str, bool]:
        return {
            "color_shift": self.color_shift.flagged,
            "grid": self.grid.flagged,
            "blur": self.blur.flagged,
            "corner": self.corner.flagged,
            "droplet": self.droplet.flagged,
        }

    def scores(self) -> Dict[str, float]:
        return {
            "color_shift": self.color_shift.score,
            "grid": self.grid.score,
            "blur": self.blur.ratio if self.blur.ratio is not None else math.nan,
            "corner": self.corner.ratio,
            "droplet": self.droplet.score,
        }

    def to_json(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class LayerNormStats:
    layer: str
    max: float
    median: float
    ratio: float
    argmax: Tuple[int, int]


@dataclass(frozen=True)
class NormStats:
    layers: Tuple[LayerNormStats, ...]

    def max_ratio(self) -> float:
        return max(s.ratio for s in self.layers)

    def to_json(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class ImageMetrics:
    name: str
    psnr: float
    ssim: float

    def to_row(self) -> Dict[str, Any]:
        return {"path": self.name, "psnr": f"{self.psnr:.6f}", "ssim": f"{self.ssim:.6f}"}


@dataclass(frozen=True)
class Aggregate:
    mean: float
    std: float
    count: int

    @staticmethod
    def of(values: List[float]) -> "Aggregate":
        n = len(values)
        if n == 0:
            return Aggregate(mean=math.nan, std=math.nan, count=0)
        mean = math.fsum(values) / n
        var = math.fsum((v - mean) ** 2 for v in values) / n
        return Aggregate(mean=mean, std=math.sqrt(var), count=n)


@dataclass(frozen=True)
class MetricReport:
    images: Tuple[ImageMetrics, ...]
    psnr: Aggregate
    ssim: Aggregate
    resolution: int
    model_id: str
    protocol: str

    @staticmethod
    def from_images(images: List[ImageMetrics], resolution: int, model_id: str, protocol: str) -> "MetricReport":
        return MetricReport(
            images=tuple(images),
            psnr=Aggregate.of([m.psnr for m in images]),
            ssim=Aggregate.of([m.ssim for m in images]),
            resolution=resolution,
            model_id=model_id,
            protocol=protocol,
        )

    def to_json(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class VariantSummary:
    label: str
    metrics: MetricReport
    artifact_scores: Dict[str, float]
    artifact_flag_rates: Dict[str, float]
    max_norm_ratio: float
    probe_border_ratio: float
    final_losses: Optional[LossBundle] = None

    def numbers(self) -> Dict[str, float]:
        out = {
            "psnr": self.metrics.psnr.mean,
            "ssim": self.metrics.ssim.mean,
            "max_norm_ratio": self.max_norm_ratio,
            "probe_border_ratio": self.probe_border_ratio,
        }
        out.update({f"score.{k}": v for k, v in self.artifact_scores.items()})
        out.update({f"flag_rate.{k}": v for k, v in self.artifact_flag_rates.items()})
        return out


@dataclass(frozen=True)
class Delta:
    metric: str
    a: float
    b: float
    delta: float
    sign: int


@dataclass(frozen=True)
class ComparisonReport:
    variant_a: VariantSummary
    variant_b: VariantSummary
    deltas: Tuple[Delta, ...]
    differing_fields: Tuple[str, ...] = field(default_factory=tuple)

    def delta(self, metric: str) -> Delta:
        for d in self.deltas:
            if d.metric == metric:
                return d
        raise KeyError(metric)

    def to_json(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class StageProbe:
    layer: str
    border_ratio: float
    # (max - min) / mean of the norm map; 0 for spatially uniform activations
    deviation: float


@dataclass(frozen=True)
class ProbeReport:
    stages: Tuple[StageProbe, ...]
    norms: NormStats
    input_value: Optional[float] = None

    def max_border_ratio(self) -> float:
        return max(s.border_ratio for s in self.stages)

    def to_json(self) -> Dict[str, Any]:
        return asdict(self)
