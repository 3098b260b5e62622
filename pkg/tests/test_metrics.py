from __future__ import annotations

import math

import numpy as np
import pytest

from vivat_lab.core.config import EvalSpec, PreprocessSpec, TextureConfig
from vivat_lab.core.errors import ShapeError, ValidationError
from vivat_lab.core.models import Aggregate
from vivat_lab.data import SyntheticDataset
from vivat_lab.metrics import PSNR_CAP_DB, evaluate, gaussian_window, psnr, ssim
from vivat_lab.nets.vae import VAEModel


def _naive_ssim(x: np.ndarray, y: np.ndarray, window: int = 11, sigma: float = 1.5) -> float:
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    g = gaussian_window(window, sigma)
    w = np.outer(g, g)
    h, wd, ch = x.shape
    vals = []
    for c in range(ch):
        for i in range(h - window + 1):
            for j in range(wd - window + 1):
                a = x[i:i + window, j:j + window, c]
                b = y[i:i + window, j:j + window, c]
                ma, mb = (w * a).sum(), (w * b).sum()
                va = (w * (a - ma) ** 2).sum()
                vb = (w * (b - mb) ** 2).sum()
                cov = (w * (a - ma) * (b - mb)).sum()
                vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def _synthetic(count: int = 3) -> SyntheticDataset:
    return SyntheticDataset(TextureConfig(size=16, count=count), PreprocessSpec(intermediate_short_side=16, crop_size=16))


def test_psnr_examples():
    zeros = np.zeros((4, 4, 3))
    assert psnr(zeros, zeros) == PSNR_CAP_DB
    assert psnr(zeros, np.full_like(zeros, 0.1)) == pytest.approx(20.0)
    assert psnr(zeros, np.ones_like(zeros)) == pytest.approx(0.0)
    with pytest.raises(ShapeError):
        psnr(zeros, np.zeros((4, 5, 3)))


def test_psnr_half_contrast():
    assert psnr(np.zeros((8, 8, 3)), np.full((8, 8, 3), 0.5)) == pytest.approx(6.0206, abs=1e-4)


def test_psnr_is_symmetric(rng):
    x, y = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    assert psnr(x, y) == psnr(y, x)


def test_ssim_identical_images(rng):
    x = rng.random((16, 16, 3))
    assert ssim(x, x) == pytest.approx(1.0)


def test_ssim_of_opposite_constants():
    c1 = 0.01 ** 2
    got = ssim(np.zeros((16, 16)), np.ones((16, 16)))
    assert got == pytest.approx(c1 / (1.0 + c1), rel=1e-6)


def test_ssim_matches_window_loop(rng):
    for _ in range(20):
        x = rng.random((16, 17, 3))
        y = np.clip(x + 0.2 * rng.standard_normal(x.shape), 0.0, 1.0)
        assert ssim(x, y) == pytest.approx(_naive_ssim(x, y), abs=1e-5)
        assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-12)


def test_ssim_needs_a_full_window():
    with pytest.raises(ValidationError):
        ssim(np.zeros((10, 16, 3)), np.zeros((10, 16, 3)))


def test_aggregate_uses_population_std():
    agg = Aggregate.of([1.0, 2.0, 3.0, 4.0])
    assert agg.mean == 2.5
    assert agg.std == pytest.approx(math.sqrt(1.25))
    assert agg.count == 4
    assert math.isnan(Aggregate.of([]).mean)


def test_identity_reconstructor_scores_perfectly():
    report = evaluate(lambda x: x, _synthetic(), EvalSpec(resolution=16, model_id="identity"))
    assert report.psnr.mean == PSNR_CAP_DB
    assert report.ssim.mean == pytest.approx(1.0)
    assert report.psnr.count == 3
    assert report.model_id == "identity"
    assert report.resolution == 16
    # aggregates are recomputable from the per-image rows
    assert report.ssim.mean == pytest.approx(sum(m.ssim for m in report.images) / 3)


def test_evaluate_is_deterministic(tiny_cfg):
    model = VAEModel(tiny_cfg)
    spec = EvalSpec(resolution=16)
    a = evaluate(model, _synthetic(), spec)
    b = evaluate(model, _synthetic(), spec)
    assert a.to_json() == b.to_json()
    assert all(math.isfinite(m.psnr) and -1.0 <= m.ssim <= 1.0 for m in a.images)


def test_evaluate_rejects_empty_dataset():
    with pytest.raises(ValidationError):
        evaluate(lambda x: x, _synthetic(0), EvalSpec(resolution=16))


def test_eval_limit():
    report = evaluate(lambda x: x, _synthetic(5), EvalSpec(resolution=16, limit=2))
    assert [m.name for m in report.images] == [_synthetic().name(0), _synthetic().name(1)]
