from __future__ import annotations

import numpy as np
import pytest
from PIL import Image

from vivat_lab.core.config import DatasetSource, PreprocessSpec, TextureConfig
from vivat_lab.core.errors import ShapeError, ValidationError
from vivat_lab.data import (
    BatchLoader,
    DirectoryDataset,
    SyntheticDataset,
    build_datasets,
    crop,
    eval_batches,
    list_images,
    load_png,
    preprocess,
    resize_proportional,
    save_png,
    synth_texture,
    to_batch,
    to_images,
)


def _dataset(count: int = 10) -> SyntheticDataset:
    spec = PreprocessSpec(intermediate_short_side=16, crop_size=8, crop_mode="random")
    return SyntheticDataset(TextureConfig(size=16, count=count, seed=2), spec, shuffle_seed=5)


@pytest.mark.parametrize("shape, short, expected", [
    ((30, 45), 20, (20, 30)),
    ((45, 30), 20, (30, 20)),
    ((20, 25), 10, (10, 13)),
    ((8, 8), 16, (16, 16)),
])
def test_resize_proportional_rounds_long_side(shape, short, expected):
    img = np.random.default_rng(0).random((*shape, 3), dtype=np.float32)
    assert resize_proportional(img, short).shape == (*expected, 3)


def test_resize_keeps_constant_images_and_range():
    img = np.full((12, 20, 3), 0.25, dtype=np.float32)
    out = resize_proportional(img, 30)
    np.testing.assert_allclose(out, 0.25, atol=1e-5)
    noisy = np.random.default_rng(1).random((12, 20, 3), dtype=np.float32)
    out = resize_proportional(noisy, 30)
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert resize_proportional(noisy, 12) is noisy
    with pytest.raises(ValidationError):
        resize_proportional(noisy, 0)
    with pytest.raises(ValidationError):
        resize_proportional(noisy, 8, "lanczos9")


def test_bicubic_downscale_reproduces_a_ramp():
    ramp = np.tile((np.arange(64, dtype=np.float32) / 63.0)[None, :, None], (32, 1, 3))
    out = resize_proportional(ramp, 16)
    assert out.shape == (16, 32, 3)
    cols = np.arange(32)
    expected = (2.0 * cols + 0.5) / 63.0
    np.testing.assert_allclose(out[4:12, 3:29, 0], np.broadcast_to(expected[3:29], (8, 26)), atol=1e-3)


def test_center_crop_uses_floor_offsets():
    img = np.arange(5 * 7, dtype=np.float32).reshape(5, 7, 1)
    out = crop(img, 3, "center")
    np.testing.assert_array_equal(out, img[1:4, 2:5])
    with pytest.raises(ShapeError):
        crop(img, 6, "center")
    with pytest.raises(ValidationError):
        crop(img, 3, "random")


def test_random_crop_is_seeded():
    img = np.random.default_rng(0).random((20, 30, 3), dtype=np.float32)
    a = crop(img, 8, "random", np.random.default_rng(4))
    b = crop(img, 8, "random", np.random.default_rng(4))
    np.testing.assert_array_equal(a, b)
    assert a.shape == (8, 8, 3)


def test_preprocess_resizes_before_cropping():
    img = np.random.default_rng(0).random((40, 60, 3), dtype=np.float32)
    spec = PreprocessSpec(intermediate_short_side=20, crop_size=16, crop_mode="center")
    out = preprocess(img, spec)
    expected = crop(resize_proportional(img, 20), 16, "center")
    np.testing.assert_array_equal(out, expected)
    assert out.dtype == np.float32


def test_crop_first_ablation_crops_source_pixels():
    img = np.random.default_rng(0).random((40, 40, 3), dtype=np.float32)
    spec = PreprocessSpec(intermediate_short_side=20, crop_size=16, crop_mode="center", crop_first=True)
    np.testing.assert_array_equal(preprocess(img, spec), img[12:28, 12:28])


def test_synth_texture_is_deterministic_and_normalised():
    cfg = TextureConfig(size=32, seed=9)
    a, b = synth_texture(cfg, 3), synth_texture(cfg, 3)
    np.testing.assert_array_equal(a, b)
    assert a.dtype == np.float32 and a.shape == (32, 32, 3)
    assert a.min() == 0.0 and a.max() == 1.0
    assert not np.array_equal(a, synth_texture(cfg, 4))
    assert not np.array_equal(a, synth_texture(TextureConfig(size=32, seed=10), 3))


def _energy_above_half_nyquist(img: np.ndarray) -> float:
    n = img.shape[0]
    spectrum = np.abs(np.fft.fft2(img - img.mean())) ** 2
    radius = np.hypot(np.fft.fftfreq(n)[:, None], np.fft.fftfreq(n)[None, :])
    return float(spectrum[radius > 0.25].sum())


def test_synth_texture_keeps_detail_a_resample_loses():
    for index in range(3):
        img = np.ascontiguousarray(synth_texture(TextureConfig(size=64, seed=1), index)[:, :, 0])
        small = Image.fromarray(img).resize((16, 16), Image.Resampling.BICUBIC)
        blurred = np.asarray(small.resize((64, 64), Image.Resampling.BICUBIC), dtype=np.float64)
        sharp = _energy_above_half_nyquist(img.astype(np.float64))
        assert sharp > 0.0
        assert sharp > 2.0 * _energy_above_half_nyquist(blurred)


def test_png_round_trip(tmp_path):
    levels = (np.arange(48, dtype=np.float64) * 5 / 255.0).reshape(4, 4, 3).astype(np.float32)
    save_png(tmp_path / "sub" / "a.png", levels)
    np.testing.assert_allclose(load_png(tmp_path / "sub" / "a.png"), levels, atol=1e-7)


def test_batch_tensor_layout():
    imgs = [np.random.default_rng(i).random((6, 4, 3), dtype=np.float32) for i in range(2)]
    batch = to_batch(imgs)
    assert tuple(batch.shape) == (2, 3, 6, 4)
    np.testing.assert_allclose(to_images(batch)[1], imgs[1])


def test_batch_loader_is_stateless():
    a = BatchLoader(_dataset(), batch_size=4, seed=3)
    b = BatchLoader(_dataset(), batch_size=4, seed=3)
    # order of requests does not matter
    later = a.batch(5)
    assert b.batch(0).shape == (4, 3, 8, 8)
    assert (later == b.batch(5)).all()
    threaded = BatchLoader(_dataset(), batch_size=4, seed=3, workers=2)
    assert (threaded.batch(5) == later).all()


def test_batch_loader_drops_trailing_items():
    loader = BatchLoader(_dataset(10), batch_size=4, seed=0)
    assert loader.batches_per_epoch == 2
    e0, first = loader.indices(0)
    e1, second = loader.indices(1)
    e2, _ = loader.indices(2)
    assert (e0, e1, e2) == (0, 0, 1)
    assert len(set(first) | set(second)) == 8
    with pytest.raises(ValidationError):
        BatchLoader(_dataset(3), batch_size=4)


def test_synthetic_holdout_is_disjoint():
    source = DatasetSource(kind="synthetic", synthetic=TextureConfig(size=16, count=6), holdout=3)
    train, held = build_datasets(source, PreprocessSpec(intermediate_short_side=16, crop_size=16))
    assert len(train) == 6 and len(held) == 3
    assert not {train.name(i) for i in range(6)} & {held.name(i) for i in range(3)}


def test_directory_dataset_and_manifest(tmp_path):
    rng = np.random.default_rng(0)
    for name in ("b.png", "a.png", "c.png"):
        save_png(tmp_path / name, rng.random((20, 24, 3)))
    (tmp_path / "notes.txt").write_text("not an image", encoding="utf-8")
    assert [p.name for p in list_images(tmp_path)] == ["a.png", "b.png", "c.png"]
    (tmp_path / "order.txt").write_text("# curated\nc.png\na.png\n", encoding="utf-8")
    assert [p.name for p in list_images(tmp_path, "order.txt")] == ["c.png", "a.png"]

    spec = PreprocessSpec(intermediate_short_side=16, crop_size=16)
    ds = DirectoryDataset(tmp_path, spec)
    assert ds.train_item(1, 0).shape == (16, 16, 3)
    np.testing.assert_array_equal(ds.train_item(1, 0), ds.train_item(1, 0))

    train, held = build_datasets(DatasetSource(kind="directory", root=str(tmp_path), holdout=1), spec)
    assert [held.name(i) for i in range(len(held))] == ["c.png"]
    with pytest.raises(ValidationError):
        build_datasets(DatasetSource(kind="directory", root=str(tmp_path), holdout=3), spec)


def test_eval_batches_respects_limit():
    ds = _dataset(7)
    names = [n for batch_names, _ in eval_batches(ds, 16, limit=5, batch_size=2) for n in batch_names]
    assert names == [ds.name(i) for i in range(5)]
    _, images = next(eval_batches(ds, 12))
    assert images[0].shape == (12, 12, 3)
