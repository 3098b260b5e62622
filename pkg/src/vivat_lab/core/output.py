from __future__ import annotations

import csv
import json
import os
from typing import Any, Dict, Iterable, List

import numpy as np
from PIL import Image

from .models import ImageMetrics
from .utils import nan_to_none


def _ensure_dir(path: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)


def write_csv(path: str, rows: List[ImageMetrics]) -> None:
    _ensure_dir(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=["path", "psnr", "ssim"])
        writer.writeheader()
        for r in rows:
            writer.writerow(r.to_row())


def write_json(path: str, payload: Any) -> None:
    _ensure_dir(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(nan_to_none(payload), f, ensure_ascii=False, indent=2)


def append_jsonl(path: str, records: Iterable[Dict[str, Any]]) -> None:
    _ensure_dir(path)
    with open(path, "a", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(nan_to_none(r)) + "\n")


def read_jsonl(path: str) -> List[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_heatmap(path: str, values: np.ndarray) -> None:
    """Min-max scaled 16-bit grayscale PNG plus ``<path>.f32`` raw dump.

    The dump starts with one text line ``float32 <h> <w> little-endian`` followed by the values.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"heatmap needs a 2D array, got shape {arr.shape}")
    _ensure_dir(path)
    lo, hi = float(arr.min()), float(arr.max())
    scaled = np.zeros_like(arr) if hi <= lo else (arr - lo) / (hi - lo)
    Image.fromarray(np.rint(scaled * 65535.0).astype(np.uint16)).save(path)
    with open(path + ".f32", "wb") as f:
        f.write(f"float32 {arr.shape[0]} {arr.shape[1]} little-endian\n".encode("ascii"))
        f.write(arr.astype("<f4").tobytes())


def read_raw_dump(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").split()
        data = f.read()
    h, w = int(header[1]), int(header[2])
    return np.frombuffer(data, dtype="<f4").reshape(h, w)


def write_pair_png(path: str, original: np.ndarray, recon: np.ndarray) -> None:
    """Original | reconstruction, side by side, 8-bit RGB."""
    both = np.concatenate([np.clip(original, 0.0, 1.0), np.clip(recon, 0.0, 1.0)], axis=1)
    if both.ndim == 3 and both.shape[2] == 1:
        both = both[:, :, 0]
    _ensure_dir(path)
    Image.fromarray(np.rint(both * 255.0).astype(np.uint8)).save(path)
