from __future__ import annotations

import math
import random

import numpy as np
import pytest
import torch
from scipy.ndimage import gaussian_filter

from conftest import tiny_model_config, tiny_run_config
from vivat_lab.core.config import DetectorThresholds, TextureConfig
from vivat_lab.core.errors import NotApplicableError, ValidationError
from vivat_lab import diagnostics
from vivat_lab.data import build_datasets, synth_texture
from vivat_lab.diagnostics import (
    SCORE_CAP,
    ab_compare,
    aggregate_reports,
    analyze_pair,
    border_interior_ratio,
    check_ablation,
    detect_blur,
    detect_color_shift,
    detect_corner,
    detect_droplet,
    detect_grid,
    evaluate,
    norm_stats,
    probe,
    residual_spectrum,
)
from vivat_lab.nets.vae import ActivationTrace, VAEModel


def _grid(size: int, period: int = 8) -> np.ndarray:
    lines = np.zeros((size, size))
    lines[::period, :] = 1.0
    lines[:, ::period] = 1.0
    return np.repeat(lines[:, :, None], 3, axis=2)


def _trace(*maps: np.ndarray) -> ActivationTrace:
    trace = ActivationTrace()
    for i, m in enumerate(maps):
        trace.layers.append(f"layer{i}")
        trace.norms.append(torch.as_tensor(m, dtype=torch.float64)[None])
    return trace


def test_color_shift_matches_channel_means(texture, rng):
    xhat = np.clip(texture + 0.05 * rng.standard_normal(texture.shape), 0.0, 1.0)
    result = detect_color_shift(texture, xhat)
    h, w, c = texture.shape
    for ch in range(c):
        naive = sum(float(xhat[i, j, ch]) - float(texture[i, j, ch]) for i in range(h) for j in range(w)) / (h * w)
        assert result.shift[ch] == pytest.approx(naive, abs=1e-6)
    assert result.score == max(abs(s) for s in result.shift)


def test_color_shift_flags_a_tinted_channel(texture):
    xhat = texture.astype(np.float64) + np.array([0.1, 0.0, 0.0])
    result = detect_color_shift(texture, xhat)
    assert result.score == pytest.approx(0.1)
    assert result.dominant_channel == 0
    assert result.flagged
    assert not detect_color_shift(texture, texture).flagged


def test_grid_detects_period_eight(texture, rng):
    noise = 0.01 * rng.standard_normal(texture.shape)
    clean = texture + noise
    gridded = clean + 0.05 * _grid(64)
    result = detect_grid(texture, gridded, downscale_f=8)
    assert result.flagged
    assert result.period == 8.0
    assert not detect_grid(texture, clean, downscale_f=8).flagged


def test_grid_is_translation_invariant(texture, rng):
    xhat = texture + 0.01 * rng.standard_normal(texture.shape) + 0.05 * _grid(64)
    base = detect_grid(texture, xhat, 8)
    shifted = detect_grid(np.roll(texture, (3, 5), axis=(0, 1)), np.roll(xhat, (3, 5), axis=(0, 1)), 8)
    assert shifted.score == pytest.approx(base.score, rel=1e-6)
    assert shifted.period == base.period


def test_grid_trivial_and_invalid(texture):
    result = detect_grid(texture, texture, 8)
    assert result.score == 0.0 and result.period is None and not result.flagged
    with pytest.raises(ValidationError):
        detect_grid(texture[:16, :16], texture[:16, :16], 16)
    with pytest.raises(ValidationError):
        detect_grid(texture, texture, 1)


def test_residual_spectrum_shape(texture):
    spec = residual_spectrum(texture, texture + 0.01)
    assert spec.shape == (64, 64)
    assert np.all(spec >= 0.0)


def test_blur_ratio(texture):
    assert detect_blur(texture, texture).ratio == 1.0
    blurred = gaussian_filter(texture.astype(np.float64), sigma=(2, 2, 0), mode="wrap")
    result = detect_blur(texture, blurred)
    assert result.flagged
    assert result.ratio < 0.6


def test_blur_not_applicable_without_detail(rng):
    flat = np.zeros((32, 32, 3))
    noisy = rng.random((32, 32, 3))
    with pytest.raises(NotApplicableError):
        detect_blur(flat, noisy)
    assert detect_blur(flat, flat).ratio == 1.0
    report = analyze_pair(flat, noisy, DetectorThresholds(corner_band=4), 8)
    assert not report.blur.applicable
    assert report.blur.ratio is None and not report.blur.flagged


def test_corner_ratio(texture):
    assert detect_corner(texture, texture).ratio == 1.0
    xhat = texture.astype(np.float64).copy()
    xhat[:2, :2] += 0.3
    result = detect_corner(texture, xhat, band=4)
    assert result.ratio == SCORE_CAP
    assert result.flagged
    with pytest.raises(ValidationError):
        detect_corner(texture, texture, band=16)
    with pytest.raises(ValidationError):
        detect_corner(texture, texture, band=0)


def test_corner_ratio_is_border_over_interior(texture):
    xhat = texture.astype(np.float64).copy()
    xhat[:4, :] += 0.1
    xhat[8:24, 8:24] += 0.4
    r = np.abs(xhat - texture).mean(axis=2)
    mask = np.zeros(r.shape, dtype=bool)
    mask[:4, :] = mask[-4:, :] = mask[:, :4] = mask[:, -4:] = True
    result = detect_corner(texture, xhat, band=4)
    assert result.ratio == pytest.approx(r[mask].mean() / r[~mask].mean())
    assert result.ratio < 1.0
    assert not result.flagged


def test_droplet_localises_a_spot(texture, rng):
    xhat = texture + 0.01 * rng.standard_normal(texture.shape)
    xhat[20:24, 40:44] += 0.5
    result = detect_droplet(texture, xhat)
    assert result.flagged
    assert abs(result.location[0] - 22) <= 4 and abs(result.location[1] - 42) <= 4
    assert not result.fallback


def test_droplet_trivial_and_fallback():
    flat = np.zeros((64, 64, 3))
    assert detect_droplet(flat, flat).score == 0.0
    spot = flat.copy()
    spot[10:14, 10:14] = 0.5
    result = detect_droplet(flat, spot)
    assert result.fallback
    assert result.flagged
    with pytest.raises(ValidationError):
        detect_droplet(flat, flat, window=65)


def test_report_flags_follow_scores(texture, rng):
    xhat = texture + 0.02 * rng.standard_normal(texture.shape) + 0.05 * _grid(64)
    report = analyze_pair(texture, xhat, DetectorThresholds(), 8, "a")
    stored = report.to_json()
    t = stored["thresholds"]
    assert stored["grid"]["flagged"] == (stored["grid"]["score"] > t["grid"])
    assert stored["color_shift"]["flagged"] == (stored["color_shift"]["score"] > t["color_shift"])
    assert stored["corner"]["flagged"] == (stored["corner"]["ratio"] > t["corner"])
    assert stored["droplet"]["flagged"] == (stored["droplet"]["score"] > t["droplet"])
    assert stored["blur"]["flagged"] == (stored["blur"]["ratio"] < t["blur"])
    assert all(math.isfinite(v) and v >= 0 for v in report.scores().values())


def test_aggregate_is_order_independent(rng):
    pairs = []
    for i in range(6):
        x = synth_texture(TextureConfig(size=32, seed=i), 0)
        pairs.append((f"p{i}", x, np.clip(x + 0.03 * rng.standard_normal(x.shape), 0.0, 1.0)))
    reports = evaluate(pairs, DetectorThresholds(corner_band=4), 8)
    shuffled = list(reports)
    random.Random(0).shuffle(shuffled)
    means, rates = aggregate_reports(reports)
    means2, rates2 = aggregate_reports(shuffled)
    assert rates == rates2
    assert means == pytest.approx(means2, abs=1e-12)
    with pytest.raises(ValidationError):
        aggregate_reports([])


def test_norm_stats_examples():
    uniform = np.ones((4, 4))
    spiked = np.ones((4, 4))
    spiked[2, 3] = 10.0
    stats = norm_stats(_trace(uniform, spiked, np.zeros((4, 4))))
    assert stats.layers[0].ratio == 1.0
    assert stats.layers[1].ratio == 10.0
    assert stats.layers[1].argmax == (2, 3)
    assert stats.layers[2].ratio == 1.0
    assert stats.max_ratio() == 10.0
    with pytest.raises(ValidationError):
        norm_stats(ActivationTrace())


def test_border_interior_ratio_is_symmetric():
    assert border_interior_ratio(np.ones((6, 6))) == 1.0
    loud_border = np.full((6, 6), 2.0)
    loud_border[1:-1, 1:-1] = 1.0
    loud_interior = np.full((6, 6), 1.0)
    loud_interior[1:-1, 1:-1] = 2.0
    assert border_interior_ratio(loud_border) == 2.0
    assert border_interior_ratio(loud_interior) == 2.0
    with pytest.raises(ValidationError):
        border_interior_ratio(np.ones((2, 2)))


def test_reflect_probe_is_uniform():
    model = VAEModel(tiny_model_config(padding_policy="reflect")).double()
    report = probe(model, size=32)
    assert report.input_value == pytest.approx(0.75)
    for stage in report.stages:
        assert stage.deviation <= 1e-5, stage.layer
    assert report.max_border_ratio() == pytest.approx(1.0, abs=1e-5)


def test_zero_padding_probe_shows_borders():
    model = VAEModel(tiny_model_config(padding_policy="zero")).double()
    assert probe(model, size=32).max_border_ratio() > 1.1


def test_probe_of_an_image(texture):
    model = VAEModel(tiny_model_config())
    image = torch.from_numpy(texture[:32, :32]).permute(2, 0, 1)[None]
    report = probe(model, image=image)
    assert report.input_value is None
    assert len(report.stages) == len(report.norms.layers)


def test_probe_reuses_a_given_trace(monkeypatch):
    model = VAEModel(tiny_model_config(padding_policy="zero")).double()
    expected = probe(model, size=32)
    trace = diagnostics.probe_trace(model, None, 32, 0.75)

    def _no_second_pass(*args, **kwargs):
        raise AssertionError("trace was recomputed")

    monkeypatch.setattr(diagnostics, "probe_trace", _no_second_pass)
    report = probe(model, size=32, trace=trace)
    assert report.stages == expected.stages
    assert report.input_value == expected.input_value


def test_ablation_checks():
    base = tiny_run_config()
    assert check_ablation(base, tiny_run_config("model.padding_policy=zero")) == ["model.padding_policy"]
    with pytest.raises(ValidationError, match="different evaluation data"):
        check_ablation(base, tiny_run_config("eval.resolution=8"))
    with pytest.raises(ValidationError, match="ablation axes"):
        check_ablation(base, tiny_run_config("train.learning_rate=0.5"))


def test_identical_variants_have_zero_deltas():
    cfg = tiny_run_config()
    datasets = build_datasets(cfg.data, cfg.preprocess)
    report = ab_compare(cfg, tiny_run_config(), datasets, train=False)
    assert report.differing_fields == ()
    assert all(d.delta == 0.0 and d.sign == 0 for d in report.deltas)


def test_trained_identical_variants_have_zero_deltas(tmp_path):
    cfg = tiny_run_config("train.max_steps=2")
    datasets = build_datasets(cfg.data, cfg.preprocess)
    report = ab_compare(cfg, tiny_run_config("train.max_steps=2"), datasets, run_dir=tmp_path)
    assert all(d.delta == 0.0 for d in report.deltas)
    assert (tmp_path / "a" / "metrics.jsonl").is_file()
    assert report.variant_a.final_losses == report.variant_b.final_losses


def test_padding_axis_moves_the_probe():
    a = tiny_run_config("model.padding_policy=reflect", "train.precision=fp64")
    b = tiny_run_config("model.padding_policy=zero", "train.precision=fp64")
    report = ab_compare(a, b, build_datasets(a.data, a.preprocess), train=False)
    assert report.differing_fields == ("model.padding_policy",)
    assert report.delta("probe_border_ratio").sign == 1


def _calibration_pairs(n: int = 100, size: int = 64):
    for i in range(n):
        x = synth_texture(TextureConfig(size=size, seed=11), i).astype(np.float64)
        noise = np.random.default_rng([11, i]).standard_normal(x.shape)
        yield i, x, np.clip(x + 0.01 * noise, 0.0, 1.0)


@pytest.mark.slow
def test_grid_calibration():
    t = DetectorThresholds()
    hits = false_alarms = 0
    for _, x, clean in _calibration_pairs():
        hits += detect_grid(x, clean + 0.02 * _grid(64), 8, t.grid).flagged
        false_alarms += detect_grid(x, clean, 8, t.grid).flagged
    assert hits >= 95
    assert false_alarms <= 5


@pytest.mark.slow
def test_droplet_calibration():
    t = DetectorThresholds()
    hits = false_alarms = located = 0
    for i, x, clean in _calibration_pairs():
        rng = np.random.default_rng([12, i])
        top, left = (int(v) for v in rng.integers(4, 56, size=2))
        spotted = clean.copy()
        spotted[top:top + 4, left:left + 4] += 0.3
        result = detect_droplet(x, spotted, t.droplet_window, t.droplet)
        hits += result.flagged
        located += abs(result.location[0] - (top + 2)) <= 4 and abs(result.location[1] - (left + 2)) <= 4
        false_alarms += detect_droplet(x, clean, t.droplet_window, t.droplet).flagged
    assert hits >= 95
    assert located >= 95
    assert false_alarms <= 5


@pytest.mark.slow
def test_blur_calibration():
    t = DetectorThresholds()
    hits = false_alarms = 0
    for _, x, clean in _calibration_pairs():
        blurred = gaussian_filter(x, sigma=(1, 1, 0), mode="reflect")
        hits += detect_blur(x, blurred, t.blur_cutoff, t.blur).flagged
        false_alarms += detect_blur(x, clean, t.blur_cutoff, t.blur).flagged
    assert hits >= 90
    assert false_alarms <= 5


def _micro(*extra: str, seed: int):
    from vivat_lab.core.config import resolve_run_config

    return resolve_run_config(preset="micro", overrides=["train.log_every=500", *extra], seed=seed)


@pytest.mark.slow
def test_lower_kl_weight_sharpens_reconstructions():
    wins = 0
    for seed in range(3):
        a = _micro("train.weights.lambda_kl=0.001", "train.max_steps=1000", seed=seed)
        b = _micro("train.weights.lambda_kl=0.0001", "train.max_steps=1000", seed=seed)
        report = ab_compare(a, b, build_datasets(a.data, a.preprocess))
        wins += report.delta("score.blur").delta > 0
    assert wins >= 2


@pytest.mark.slow
def test_lower_adversarial_weight_reduces_grid_score():
    wins = 0
    for seed in range(3):
        a = _micro("train.weights.lambda_adv=0.1", "train.max_steps=1000", seed=seed)
        b = _micro("train.weights.lambda_adv=0.01", "train.max_steps=1000", seed=seed)
        report = ab_compare(a, b, build_datasets(a.data, a.preprocess))
        wins += report.delta("score.grid").delta < 0
    assert wins >= 2


@pytest.mark.slow
def test_scn_decoder_has_fewer_outliers():
    size = ["data.synthetic.size=64", "preprocess.intermediate_short_side=64", "preprocess.crop_size=64",
            "eval.resolution=64", "eval.limit=16", "train.max_steps=3000"]
    wins = 0
    for seed in range(5):
        a = _micro("model.decoder_norm=group_norm", *size, seed=seed)
        b = _micro("model.decoder_norm=scn", *size, seed=seed)
        report = ab_compare(a, b, build_datasets(a.data, a.preprocess))
        wins += report.delta("max_norm_ratio").delta < 0
    assert wins >= 4
