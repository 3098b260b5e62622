"""Artifact detectors, activation-norm probing and the A/B comparison harness.

Detectors are pure functions of an (original, reconstruction) pair of H x W x C arrays in [0, 1].
Every result carries its threshold so a stored report can be re-checked without this code.
"""
from __future__ import annotations

import logging
import math
from dataclasses import replace
from functools import reduce
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .core.config import DetectorThresholds, EvalSpec, RunConfig
from .core.errors import NotApplicableError, ShapeError, ValidationError
from .core.models import (
    ArtifactReport,
    BlurResult,
    ColorShiftResult,
    ComparisonReport,
    CornerResult,
    Delta,
    DropletResult,
    GridResult,
    ImageMetrics,
    LayerNormStats,
    MetricReport,
    NormStats,
    ProbeReport,
    StageProbe,
    VariantSummary,
)
from .data import ImageDataset, eval_batches, to_batch, to_images
from .metrics import psnr, ssim
from .nets.vae import ActivationTrace, VAEModel
from .training import Trainer, build_state

LUMA = (0.299, 0.587, 0.114)
SCORE_CAP = 1e6
MAD_SCALE = 1.4826
DEFAULT_PROBE_VALUE = 0.75

# config fields an A/B pair may differ in
ABLATION_AXES = (
    "model.padding_policy",
    "model.decoder_norm",
    "model.attention_levels",
    "model.latent_channels",
    "train.weights.lambda_kl",
    "train.weights.lambda_recon",
    "train.weights.lambda_adv",
    "train.weights.lambda_perc",
    "train.adv_variant",
    "train.disc_variant",
    "train.disc_start_step",
    "train.phase",
    "train.decoder_only_steps",
    "train.perceptual.backend",
    "preprocess.resize_filter",
    "preprocess.crop_first",
)
_IGNORED_SECTIONS = ("provenance", "paths")


def _pair(x: np.ndarray, xhat: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ShapeError(f"shapes differ: {x.shape} vs {xhat.shape}")
    if x.ndim == 2:
        x, xhat = x[:, :, None], xhat[:, :, None]
    if x.ndim != 3:
        raise ShapeError(f"expected H x W x C images, got shape {x.shape}")
    return x, xhat


def luma(img: np.ndarray) -> np.ndarray:
    if img.shape[2] == 1:
        return img[:, :, 0]
    if img.shape[2] != 3:
        raise ShapeError(f"luma needs 1 or 3 channels, got {img.shape[2]}")
    return img[:, :, 0] * LUMA[0] + img[:, :, 1] * LUMA[1] + img[:, :, 2] * LUMA[2]


def _safe_ratio(num: float, den: float) -> float:
    if den == 0.0:
        return 1.0 if num == 0.0 else SCORE_CAP
    return min(num / den, SCORE_CAP)


def detect_color_shift(x: np.ndarray, xhat: np.ndarray, threshold: float = 0.02) -> ColorShiftResult:
    x, xhat = _pair(x, xhat)
    shift = tuple(float(v) for v in xhat.mean(axis=(0, 1)) - x.mean(axis=(0, 1)))
    mags = [abs(s) for s in shift]
    score = max(mags)
    return ColorShiftResult(shift=shift, score=score, dominant_channel=int(np.argmax(mags)),
                            threshold=threshold, flagged=score > threshold)


def _power(r: np.ndarray) -> np.ndarray:
    return np.abs(np.fft.fft2(r)) ** 2


def residual_spectrum(x: np.ndarray, xhat: np.ndarray) -> np.ndarray:
    """log(1 + |FFT|^2) of the luma residual, DC centred; for heatmap export."""
    x, xhat = _pair(x, xhat)
    return np.log1p(np.fft.fftshift(_power(luma(xhat - x))))


def detect_grid(x: np.ndarray, xhat: np.ndarray, downscale_f: int = 8, threshold: float = 8.0) -> GridResult:
    """Peak-to-median energy of the residual spectrum at the lattice harmonics (k*H/f, k*W/f).

    Each harmonic's energy is the mean over its 3 x 3 bin neighbourhood; the median runs over
    every bin outside those neighbourhoods and the DC neighbourhood.
    """
    x, xhat = _pair(x, xhat)
    h, w = x.shape[:2]
    f = int(downscale_f)
    if f < 2:
        raise ValidationError(f"grid detection needs downscale factor >= 2, got {f}")
    if h < 2 * f or w < 2 * f:
        raise ValidationError(f"image {h}x{w} is smaller than 2f = {2 * f}")
    power = _power(luma(xhat - x))
    off_peak = np.ones_like(power, dtype=bool)

    def hood(u: int, v: int) -> Tuple[np.ndarray, np.ndarray]:
        return np.array([(u - 1) % h, u, (u + 1) % h]), np.array([(v - 1) % w, v, (v + 1) % w])

    rows, cols = hood(0, 0)
    off_peak[np.ix_(rows, cols)] = False
    peaks: List[Tuple[int, int, float]] = []
    for ku in range(f):
        for kv in range(f):
            if ku == 0 and kv == 0:
                continue
            u, v = int(round(ku * h / f)) % h, int(round(kv * w / f)) % w
            rows, cols = hood(u, v)
            off_peak[np.ix_(rows, cols)] = False
            peaks.append((ku, kv, float(power[np.ix_(rows, cols)].mean())))
    background = power[off_peak] if off_peak.any() else power.ravel()[1:]
    median = float(np.median(background))
    ratios = [(ku, kv, _safe_ratio(e, median) if e > 0 else 0.0) for ku, kv, e in peaks]
    score = max(r for _, _, r in ratios)
    if score == 0.0:
        return GridResult(score=0.0, period=None, threshold=threshold, flagged=False)
    strong = [(ku, kv) for ku, kv, r in ratios if r > threshold]
    if not strong:
        strong = [max(ratios, key=lambda t: t[2])[:2]]
    g = reduce(math.gcd, [f] + [k for pair in strong for k in pair])
    return GridResult(score=score, period=float(f // g), threshold=threshold, flagged=score > threshold)


def _hf_energy(img: np.ndarray, cutoff: float) -> float:
    h, w = img.shape
    radius = np.hypot(np.fft.fftfreq(h)[:, None], np.fft.fftfreq(w)[None, :])
    return float(_power(img)[radius > cutoff].sum())


def detect_blur(x: np.ndarray, xhat: np.ndarray, cutoff: float = 0.25, threshold: float = 0.6) -> BlurResult:
    """Energy of the reconstruction above ``cutoff * Nyquist`` relative to the original's.

    Raises NotApplicableError when the original has no energy there but the reconstruction does.
    """
    x, xhat = _pair(x, xhat)
    radial = cutoff * 0.5
    ex = _hf_energy(luma(x), radial)
    exh = _hf_energy(luma(xhat), radial)
    if ex == 0.0:
        if exh == 0.0:
            return BlurResult(ratio=1.0, cutoff=cutoff, threshold=threshold, flagged=False)
        raise NotApplicableError("original has no energy above the blur cutoff")
    ratio = exh / ex
    return BlurResult(ratio=ratio, cutoff=cutoff, threshold=threshold, flagged=ratio < threshold)


def _border_mask(h: int, w: int, band: int) -> np.ndarray:
    mask = np.zeros((h, w), dtype=bool)
    mask[:band, :] = True
    mask[-band:, :] = True
    mask[:, :band] = True
    mask[:, -band:] = True
    return mask


def detect_corner(x: np.ndarray, xhat: np.ndarray, band: int = 8, threshold: float = 2.0) -> CornerResult:
    """Border-over-interior mean absolute residual. Directional: only a border worse than the interior flags."""
    x, xhat = _pair(x, xhat)
    h, w = x.shape[:2]
    if band < 1 or band >= min(h, w) / 4:
        raise ValidationError(f"border band {band} leaves no usable interior in a {h}x{w} image")
    r = np.abs(xhat - x).mean(axis=2)
    mask = _border_mask(h, w, band)
    ratio = _safe_ratio(float(r[mask].mean()), float(r[~mask].mean()))
    return CornerResult(ratio=ratio, band=band, threshold=threshold, flagged=ratio > threshold)


def detect_droplet(x: np.ndarray, xhat: np.ndarray, window: int = 4, threshold: float = 6.0) -> DropletResult:
    """Robust z-score of the window-mean absolute residual; location is the peak window's centre."""
    x, xhat = _pair(x, xhat)
    h, w = x.shape[:2]
    if window < 1 or window > min(h, w):
        raise ValidationError(f"window {window} does not fit a {h}x{w} image")
    r = np.abs(xhat - x).mean(axis=2)
    means = np.lib.stride_tricks.sliding_window_view(r, (window, window)).mean(axis=(-1, -2))
    top, left = np.unravel_index(int(np.argmax(means)), means.shape)
    location = (int(top) + window // 2, int(left) + window // 2)
    peak = float(means.max())
    median = float(np.median(means))
    mad = float(np.median(np.abs(means - median))) * MAD_SCALE
    fallback = False
    if mad > 0:
        score = (peak - median) / mad
    elif peak == median:
        score = 0.0
    else:
        fallback = True
        std = float(means.std())
        score = (peak - float(means.mean())) / std if std > 0 else 0.0
    score = min(max(score, 0.0), SCORE_CAP)
    return DropletResult(score=score, location=location, window=window, threshold=threshold,
                         flagged=score > threshold, fallback=fallback)


def analyze_pair(x: np.ndarray, xhat: np.ndarray, thresholds: DetectorThresholds, downscale_f: int,
                 name: str = "") -> ArtifactReport:
    t = thresholds
    try:
        blur = detect_blur(x, xhat, t.blur_cutoff, t.blur)
    except NotApplicableError:
        blur = BlurResult(ratio=None, cutoff=t.blur_cutoff, threshold=t.blur, flagged=False, applicable=False)
    return ArtifactReport(
        color_shift=detect_color_shift(x, xhat, t.color_shift),
        grid=detect_grid(x, xhat, downscale_f, t.grid),
        blur=blur,
        corner=detect_corner(x, xhat, t.corner_band, t.corner),
        droplet=detect_droplet(x, xhat, t.droplet_window, t.droplet),
        thresholds=thresholds,
        name=name,
    )


def evaluate(pairs: Iterable[Tuple[str, np.ndarray, np.ndarray]], thresholds: DetectorThresholds,
             downscale_f: int) -> List[ArtifactReport]:
    return [analyze_pair(x, xhat, thresholds, downscale_f, name) for name, x, xhat in pairs]


def aggregate_reports(reports: Sequence[ArtifactReport]) -> Tuple[Dict[str, float], Dict[str, float]]:
    """(mean score, flag rate) per detector; non-applicable blur results are left out."""
    if not reports:
        raise ValidationError("no artifact reports to aggregate")
    means: Dict[str, float] = {}
    rates: Dict[str, float] = {}
    for key in reports[0].scores():
        vals = [r.scores()[key] for r in reports]
        vals = [v for v in vals if not math.isnan(v)]
        means[key] = math.fsum(vals) / len(vals) if vals else math.nan
        rates[key] = sum(r.flags()[key] for r in reports) / len(reports)
    return means, rates


def norm_stats(trace: ActivationTrace, index: int = 0) -> NormStats:
    if len(trace) == 0:
        raise ValidationError("activation trace is empty")
    layers = []
    for name, norms in trace.items():
        m = norms[index].double().cpu().numpy()
        peak = float(m.max())
        median = float(np.median(m))
        y, x = np.unravel_index(int(np.argmax(m)), m.shape)
        layers.append(LayerNormStats(layer=name, max=peak, median=median, ratio=_safe_ratio(peak, median),
                                     argmax=(int(y), int(x))))
    return NormStats(layers=tuple(layers))


def border_interior_ratio(norm_map: np.ndarray | torch.Tensor, band: int = 1) -> float:
    """max(b/i, i/b) of the mean border-frame and interior values; 1.0 when uniform."""
    m = norm_map.double().cpu().numpy() if isinstance(norm_map, torch.Tensor) else np.asarray(norm_map, np.float64)
    h, w = m.shape
    if min(h, w) <= 2 * band:
        raise ValidationError(f"a {h}x{w} map has no interior inside a {band}-pixel band")
    mask = _border_mask(h, w, band)
    b, i = float(m[mask].mean()), float(m[~mask].mean())
    if b == 0.0 and i == 0.0:
        return 1.0
    return max(_safe_ratio(b, i), _safe_ratio(i, b))


def _deviation(m: np.ndarray) -> float:
    mean = float(np.abs(m).mean())
    if mean == 0.0:
        return 0.0
    return float(m.max() - m.min()) / mean


@torch.no_grad()
def probe_trace(model: VAEModel, image: Optional[torch.Tensor] = None, size: int = 32,
                value: float = DEFAULT_PROBE_VALUE) -> ActivationTrace:
    """Encoder then decoder activation norms for one image.

    Without an image the encoder sees a constant ``value`` image and the decoder a constant ``value``
    latent, so any spatial structure in the norm maps comes from border handling.
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    if image is None:
        x = torch.full((1, model.config.input_channels, size, size), value, dtype=dtype)
    else:
        x = image.to(dtype)
    trace = ActivationTrace()
    dist = model.encode(x, trace)
    # a constant image leaves the normalised encoder output at zero
    z = dist.mu if image is not None else torch.full_like(dist.mu, value)
    _, dec_trace = model.decode(z, trace=True)
    for name, norms in dec_trace.items():
        trace.layers.append(name)
        trace.norms.append(norms)
    return trace


def probe(model: VAEModel, image: Optional[torch.Tensor] = None, size: int = 32,
          value: float = DEFAULT_PROBE_VALUE, band: int = 1, trace: Optional[ActivationTrace] = None) -> ProbeReport:
    """Border/interior ratio and spatial deviation of every traced stage.

    Stages too small to have an interior get border ratio 1.0. A ``trace`` already taken with
    ``probe_trace`` on the same inputs is reused.
    """
    if trace is None:
        trace = probe_trace(model, image, size, value)
    if image is not None:
        value = None
    stages = []
    for name, norms in trace.items():
        m = norms[0].double().cpu().numpy()
        ratio = border_interior_ratio(m, band) if min(m.shape) > 2 * band else 1.0
        stages.append(StageProbe(layer=name, border_ratio=ratio, deviation=_deviation(m)))
    return ProbeReport(stages=tuple(stages), norms=norm_stats(trace), input_value=value)


def probe_border_ratio(model: VAEModel, size: int = 32, value: float = DEFAULT_PROBE_VALUE) -> float:
    return probe(model, size=size, value=value).max_border_ratio()


def _flatten(d: Dict, prefix: str = "") -> Dict[str, object]:
    out: Dict[str, object] = {}
    for k, v in d.items():
        key = f"{prefix}.{k}" if prefix else k
        if isinstance(v, dict):
            out.update(_flatten(v, key))
        else:
            out[key] = v
    return out


def differing_fields(config_a: RunConfig, config_b: RunConfig) -> List[str]:
    a, b = _flatten(config_a.to_dict()), _flatten(config_b.to_dict())
    keys = sorted(set(a) | set(b))
    return [k for k in keys if not k.startswith(_IGNORED_SECTIONS) and a.get(k) != b.get(k)]


def check_ablation(config_a: RunConfig, config_b: RunConfig) -> List[str]:
    diff = differing_fields(config_a, config_b)
    mismatched = [k for k in diff if k.startswith(("eval.", "data."))]
    if mismatched:
        raise ValidationError(f"variants use different evaluation data: {', '.join(mismatched)}")
    extra = [k for k in diff if k not in ABLATION_AXES]
    if extra:
        raise ValidationError(f"variants differ outside the ablation axes: {', '.join(extra)}")
    return diff


@torch.no_grad()
def summarize_variant(label: str, cfg: RunConfig, model: VAEModel, eval_set: ImageDataset, eval_spec: EvalSpec,
                      final_losses=None) -> VariantSummary:
    model.eval()
    dtype = next(model.parameters()).dtype
    rows: List[ImageMetrics] = []
    reports: List[ArtifactReport] = []
    norm_ratios: List[float] = []
    f = cfg.model.downscale_factor
    for names, images in eval_batches(eval_set, eval_spec.resolution, eval_spec.resize_filter, eval_spec.limit):
        x = to_batch(images, dtype)
        dist = model.encode(x)
        xhat, trace = model.decode(dist.mu, trace=True)
        recon = to_images(xhat.clamp(0.0, 1.0))
        for i, (name, img, rec) in enumerate(zip(names, images, recon)):
            rows.append(ImageMetrics(name=name, psnr=psnr(img, rec), ssim=ssim(img, rec)))
            reports.append(analyze_pair(img, rec, cfg.detectors, f, name))
            norm_ratios.append(norm_stats(trace, i).max_ratio())
    if not rows:
        raise ValidationError("evaluation dataset is empty")
    scores, rates = aggregate_reports(reports)
    return VariantSummary(
        label=label,
        metrics=MetricReport.from_images(rows, eval_spec.resolution, eval_spec.model_id or label, eval_spec.protocol()),
        artifact_scores=scores,
        artifact_flag_rates=rates,
        max_norm_ratio=math.fsum(norm_ratios) / len(norm_ratios),
        probe_border_ratio=probe_border_ratio(model, size=eval_spec.resolution),
        final_losses=final_losses,
    )


def _delta(metric: str, a: float, b: float) -> Delta:
    if math.isnan(a) and math.isnan(b):
        return Delta(metric=metric, a=a, b=b, delta=0.0, sign=0)
    d = b - a
    sign = 0 if math.isnan(d) or d == 0 else (1 if d > 0 else -1)
    return Delta(metric=metric, a=a, b=b, delta=d, sign=sign)


def compare(a: VariantSummary, b: VariantSummary, fields: Sequence[str] = ()) -> ComparisonReport:
    na, nb = a.numbers(), b.numbers()
    deltas = tuple(_delta(k, na[k], nb[k]) for k in na)
    return ComparisonReport(variant_a=a, variant_b=b, deltas=deltas, differing_fields=tuple(fields))


def ab_compare(config_a: RunConfig, config_b: RunConfig, datasets: Tuple[ImageDataset, ImageDataset],
               eval_spec: Optional[EvalSpec] = None, train: bool = True, states=(None, None),
               run_dir: Optional[Path] = None, labels: Tuple[str, str] = ("a", "b"),
               log: Optional[logging.Logger] = None) -> ComparisonReport:
    """Train (or take loaded states for) both variants on shared data and compare their EMA models.

    ``train=False`` compares freshly initialised networks, which is enough for mechanism probes.
    """
    log = log or logging.getLogger("vivat_lab")
    fields = check_ablation(config_a, config_b)
    train_set, eval_set = datasets
    eval_spec = eval_spec or config_a.eval
    summaries = []
    for label, cfg, state in zip(labels, (config_a, config_b), states):
        if eval_spec.resolution % cfg.model.downscale_factor != 0:
            raise ValidationError(f"eval resolution {eval_spec.resolution} does not suit variant {label}")
        final = None
        if state is None:
            if train:
                trainer = Trainer(cfg, train_set, run_dir / label if run_dir else None, log)
                state = trainer.fit()
                final = trainer.history[-1].losses if trainer.history else None
            else:
                state = build_state(cfg)
        log.info("variant=%s step=%s phase=%s", label, state.step, state.phase)
        model = state.ema if eval_spec.use_ema else state.model
        summaries.append(summarize_variant(label, cfg, model, eval_set, replace(eval_spec, model_id=label), final))
    report = compare(summaries[0], summaries[1], fields)
    log.info("ab fields=%s psnr_delta=%.4f", ",".join(fields) or "-", report.delta("psnr").delta)
    return report
