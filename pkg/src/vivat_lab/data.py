"""Dataset ingestion and preprocessing.

Images are H x W x C float32 numpy arrays in [0, 1]. Training crops come from
``preprocess = crop(resize_proportional(img))``; cropping at source resolution is only
available as the ``crop_first`` ablation.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
from PIL import Image
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from .core.config import DatasetSource, PreprocessSpec, TextureConfig
from .core.errors import ShapeError, ValidationError


# Pillow's BICUBIC is the Catmull-Rom kernel (a = -0.5)
_FILTERS = {
    "bicubic": Image.Resampling.BICUBIC,
    "bilinear": Image.Resampling.BILINEAR,
    "nearest": Image.Resampling.NEAREST,
}

IMAGE_SUFFIXES = (".png",)


def resize_proportional(img: np.ndarray, short_side: int, resize_filter: str = "bicubic") -> np.ndarray:
    if short_side <= 0:
        raise ValidationError(f"target short side must be positive, got {short_side}")
    if resize_filter not in _FILTERS:
        raise ValidationError(f"unknown resize filter {resize_filter!r}")
    h, w = img.shape[:2]
    if min(h, w) < 1:
        raise ShapeError(f"image {h}x{w} has an empty side")
    if min(h, w) == short_side:
        return img
    scale = short_side / min(h, w)
    if h <= w:
        new_h, new_w = short_side, int(math.floor(w * scale + 0.5))
    else:
        new_h, new_w = int(math.floor(h * scale + 0.5)), short_side
    resample = _FILTERS[resize_filter]
    planes = []
    for c in range(img.shape[2]):
        plane = Image.fromarray(np.ascontiguousarray(img[:, :, c], dtype=np.float32))
        planes.append(np.asarray(plane.resize((new_w, new_h), resample=resample), dtype=np.float32))
    return np.clip(np.stack(planes, axis=2), 0.0, 1.0)


def crop(img: np.ndarray, size: int, mode: str = "center", rng: Optional[np.random.Generator] = None) -> np.ndarray:
    h, w = img.shape[:2]
    if h < size or w < size:
        raise ShapeError(f"image {h}x{w} is smaller than crop size {size}")
    if mode == "center":
        top, left = (h - size) // 2, (w - size) // 2
    elif mode == "random":
        if rng is None:
            raise ValidationError("random crops need an rng")
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
    else:
        raise ValidationError(f"unknown crop mode {mode!r}")
    return img[top:top + size, left:left + size]


def preprocess(img: np.ndarray, spec: PreprocessSpec, rng: Optional[np.random.Generator] = None,
               mode: Optional[str] = None) -> np.ndarray:
    mode = mode or spec.crop_mode
    if spec.crop_first:
        out = crop(img, spec.crop_size, mode, rng)
    else:
        out = crop(resize_proportional(img, spec.intermediate_short_side, spec.resize_filter), spec.crop_size, mode, rng)
    return np.ascontiguousarray(out, dtype=np.float32)


def synth_texture(config: TextureConfig, index: int, channels: int = 3) -> np.ndarray:
    """Multi-octave band-limited colour noise in [0, 1].

    Octave ``k`` (0 = coarsest) fills the radial band (Nyquist / 2^(octaves-k), Nyquist / 2^(octaves-1-k)]
    with gain ``persistence ** k``; the finest octave reaches Nyquist, the coarsest extends down to DC.
    Identical (seed, index) give bit-identical images.
    """
    rng = np.random.default_rng([config.seed, index])
    n = config.size
    radius = np.hypot(np.fft.fftfreq(n)[:, None], np.fft.fftfreq(n)[None, :])
    nyquist = 0.5
    envelope = np.zeros((n, n))
    for k in range(config.octaves):
        hi = nyquist / 2 ** (config.octaves - 1 - k)
        lo = 0.0 if k == 0 else nyquist / 2 ** (config.octaves - k)
        envelope[(radius > lo) & (radius <= hi)] = config.persistence ** k
    shared = rng.standard_normal((n, n))
    out = np.empty((n, n, channels), dtype=np.float64)
    for c in range(channels):
        noise = 0.6 * shared + 0.4 * rng.standard_normal((n, n))
        out[:, :, c] = np.real(np.fft.ifft2(np.fft.fft2(noise) * envelope))
    lo_v, hi_v = out.min(), out.max()
    if hi_v - lo_v <= 0:
        return np.full((n, n, channels), 0.5, dtype=np.float32)
    return ((out - lo_v) / (hi_v - lo_v)).astype(np.float32)


@retry(
    stop=stop_after_attempt(3),
    wait=wait_exponential(multiplier=0.1, min=0.1, max=1),
    retry=retry_if_exception_type((PermissionError, TimeoutError)),
    reraise=True,
)
def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        return np.asarray(rgb, dtype=np.float32) / 255.0


def save_png(path: str | Path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def to_batch(images: Sequence[np.ndarray], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """H x W x C arrays -> N x C x H x W tensor."""
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images], axis=0)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous().to(dtype)


def to_images(batch: torch.Tensor) -> List[np.ndarray]:
    arr = batch.detach().cpu().to(torch.float64).permute(0, 2, 3, 1).numpy()
    return [arr[i] for i in range(arr.shape[0])]


def list_images(root: str | Path, manifest: str = "") -> List[Path]:
    root = Path(root)
    if manifest:
        with open(root / manifest, "r", encoding="utf-8") as f:
            rel = [line.strip() for line in f if line.strip() and not line.startswith("#")]
        return [root / r for r in rel]
    return sorted(p for p in root.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


class ImageDataset:
    """Common interface: ``len``, ``name(i)``, ``train_item(i, epoch)``, ``eval_item(i, resolution, filter)``."""

    def __len__(self) -> int:
        raise NotImplementedError

    def name(self, index: int) -> str:
        raise NotImplementedError

    def raw(self, index: int) -> np.ndarray:
        raise NotImplementedError

    def train_item(self, index: int, epoch: int) -> np.ndarray:
        raise NotImplementedError

    def eval_item(self, index: int, resolution: int, resize_filter: str = "bicubic") -> np.ndarray:
        img = self.raw(index)
        return np.ascontiguousarray(
            crop(resize_proportional(img, resolution, resize_filter), resolution, "center"), dtype=np.float32
        )


class DirectoryDataset(ImageDataset):
    def __init__(self, root: str | Path, spec: PreprocessSpec, shuffle_seed: int = 0, manifest: str = "") -> None:
        self.paths = list_images(root, manifest)
        self.spec = spec
        self.shuffle_seed = shuffle_seed
        if not self.paths:
            raise ValidationError(f"no PNG images found under {root}")

    def __len__(self) -> int:
        return len(self.paths)

    def name(self, index: int) -> str:
        return self.paths[index].name

    def raw(self, index: int) -> np.ndarray:
        return load_png(self.paths[index])

    def train_item(self, index: int, epoch: int) -> np.ndarray:
        rng = np.random.default_rng([self.shuffle_seed, epoch, index])
        return preprocess(self.raw(index), self.spec, rng)


class SyntheticDataset(ImageDataset):
    def __init__(self, texture: TextureConfig, spec: PreprocessSpec, shuffle_seed: int = 0, offset: int = 0,
                 count: Optional[int] = None) -> None:
        self.texture = texture
        self.spec = spec
        self.shuffle_seed = shuffle_seed
        self.offset = offset
        self.count = texture.count if count is None else count

    def __len__(self) -> int:
        return self.count

    def name(self, index: int) -> str:
        return f"synth_{self.texture.seed}_{self.offset + index:06d}.png"

    def raw(self, index: int) -> np.ndarray:
        return synth_texture(self.texture, self.offset + index)

    def train_item(self, index: int, epoch: int) -> np.ndarray:
        rng = np.random.default_rng([self.shuffle_seed, epoch, self.offset + index])
        return preprocess(self.raw(index), self.spec, rng)


class IndexedView(ImageDataset):
    def __init__(self, base: ImageDataset, indices: Sequence[int]) -> None:
        self.base = base
        self.indices = list(indices)

    def __len__(self) -> int:
        return len(self.indices)

    def name(self, index: int) -> str:
        return self.base.name(self.indices[index])

    def raw(self, index: int) -> np.ndarray:
        return self.base.raw(self.indices[index])

    def train_item(self, index: int, epoch: int) -> np.ndarray:
        return self.base.train_item(self.indices[index], epoch)


def build_datasets(source: DatasetSource, spec: PreprocessSpec) -> tuple[ImageDataset, ImageDataset]:
    """(train, held-out). Held-out images are the last ``holdout`` items, or extra synthetic indices."""
    if source.kind == "synthetic":
        train = SyntheticDataset(source.synthetic, spec, source.shuffle_seed)
        held = SyntheticDataset(source.synthetic, spec, source.shuffle_seed, offset=source.synthetic.count,
                                count=source.holdout)
        return train, held
    full = DirectoryDataset(source.root, spec, source.shuffle_seed, source.manifest)
    n = len(full)
    if source.holdout >= n:
        raise ValidationError(f"holdout {source.holdout} leaves no training images out of {n}")
    return IndexedView(full, range(n - source.holdout)), IndexedView(full, range(n - source.holdout, n))


class BatchLoader:
    """Stateless batch schedule: batch ``step`` depends only on (seed, step).

    Epoch ``e`` visits a permutation drawn from ``default_rng([seed, e])``; trailing items that do
    not fill a batch are dropped. Worker threads only change speed, never order.
    """

    def __init__(self, dataset: ImageDataset, batch_size: int, seed: int = 0, workers: int = 0,
                 dtype: torch.dtype = torch.float32) -> None:
        if len(dataset) < batch_size:
            raise ValidationError(f"dataset has {len(dataset)} images but batch_size is {batch_size}")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.workers = workers
        self.dtype = dtype
        self.batches_per_epoch = len(dataset) // batch_size

    def indices(self, step: int) -> tuple[int, List[int]]:
        epoch, b = divmod(step, self.batches_per_epoch)
        perm = np.random.default_rng([self.seed, epoch]).permutation(len(self.dataset))
        return epoch, [int(i) for i in perm[b * self.batch_size:(b + 1) * self.batch_size]]

    def batch(self, step: int) -> torch.Tensor:
        epoch, idx = self.indices(step)
        if self.workers > 0:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                items = list(pool.map(lambda i: self.dataset.train_item(i, epoch), idx))
        else:
            items = [self.dataset.train_item(i, epoch) for i in idx]
        return to_batch(items, self.dtype)


def eval_batches(dataset: ImageDataset, resolution: int, resize_filter: str = "bicubic", limit: int = 0,
                 batch_size: int = 8):
    n = len(dataset) if not limit else min(limit, len(dataset))
    for start in range(0, n, batch_size):
        idx = list(range(start, min(start + batch_size, n)))
        yield [dataset.name(i) for i in idx], [dataset.eval_item(i, resolution, resize_filter) for i in idx]
