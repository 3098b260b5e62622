from __future__ import annotations

import logging
import math
from typing import Callable, List, Optional, Union

import numpy as np
import torch
from scipy.ndimage import correlate1d

from .core.config import EvalSpec
from .core.errors import ShapeError, ValidationError
from .core.models import ImageMetrics, MetricReport
from .data import ImageDataset, eval_batches, to_batch, to_images
from .nets.vae import VAEModel, reconstruct

PSNR_CAP_DB = 100.0

Reconstructor = Callable[[torch.Tensor], torch.Tensor]


def _pair(x: np.ndarray, xhat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ShapeError(f"shapes differ: {x.shape} vs {xhat.shape}")
    return x, xhat


def psnr(x: np.ndarray, xhat: np.ndarray, max_value: float = 1.0) -> float:
    x, xhat = _pair(x, xhat)
    if max_value <= 0:
        raise ValidationError(f"max_value must be > 0, got {max_value}")
    mse = float(np.mean((x - xhat) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return 10.0 * math.log10(max_value ** 2 / mse)


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = (size - 1) / 2.0
    g = np.exp(-((np.arange(size) - r) ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable Gaussian mean over every window that fits inside the image."""
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    r0 = len(g) // 2
    r1 = len(g) - 1 - r0
    h, w = img.shape
    return out[r0:h - r1, r0:w - r1]


def ssim(x: np.ndarray, xhat: np.ndarray, window: int = 11, sigma: float = 1.5, max_value: float = 1.0) -> float:
    """Mean SSIM over all valid Gaussian windows and channels (H x W or H x W x C inputs)."""
    x, xhat = _pair(x, xhat)
    if x.ndim == 2:
        x, xhat = x[:, :, None], xhat[:, :, None]
    h, w = x.shape[:2]
    if h < window or w < window:
        raise ValidationError(f"image {h}x{w} is smaller than the {window}x{window} SSIM window")
    c1 = (0.01 * max_value) ** 2
    c2 = (0.03 * max_value) ** 2
    g = gaussian_window(window, sigma)
    per_channel = []
    for c in range(x.shape[2]):
        a, b = x[:, :, c], xhat[:, :, c]
        mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
        var_a = _filter_valid(a * a, g) - mu_a * mu_a
        var_b = _filter_valid(b * b, g) - mu_b * mu_b
        cov = _filter_valid(a * b, g) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
        per_channel.append(float(np.mean(num / den)))
    return float(np.mean(per_channel))


def as_reconstructor(model: Union[VAEModel, Reconstructor]) -> Reconstructor:
    if isinstance(model, VAEModel):
        def run(x: torch.Tensor) -> torch.Tensor:
            model.eval()
            param = next(model.parameters())
            return reconstruct(model, x.to(param.dtype)).clamp(0.0, 1.0)
        return run
    return model


def evaluate(model: Union[VAEModel, Reconstructor], dataset: ImageDataset, eval_spec: EvalSpec,
             log: Optional[logging.Logger] = None) -> MetricReport:
    """Reconstruct each image with the mean latent and score PSNR/SSIM.

    Callers pass the EMA model; any callable batch -> batch also works (e.g. an identity stub).
    """
    log = log or logging.getLogger("vivat_lab")
    if len(dataset) == 0:
        raise ValidationError("evaluation dataset is empty")
    run = as_reconstructor(model)
    rows: List[ImageMetrics] = []
    with torch.no_grad():
        for names, images in eval_batches(dataset, eval_spec.resolution, eval_spec.resize_filter, eval_spec.limit):
            recon = to_images(run(to_batch(images)))
            for name, x, xhat in zip(names, images, recon):
                rows.append(ImageMetrics(name=name, psnr=psnr(x, xhat), ssim=ssim(x, xhat)))
    report = MetricReport.from_images(rows, eval_spec.resolution, eval_spec.model_id, eval_spec.protocol())
    log.info("evaluated images=%s psnr=%.3f ssim=%.4f", report.psnr.count, report.psnr.mean, report.ssim.mean)
    return report
