# scripts/calibrate_detectors.py

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np
from rich.console import Console
from rich.table import Table
from scipy.ndimage import gaussian_filter

from vivat_lab.cli import setup_logging
from vivat_lab.core.config import DetectorThresholds, TextureConfig
from vivat_lab.core.output import write_json
from vivat_lab.data import synth_texture
from vivat_lab.diagnostics import detect_blur, detect_droplet, detect_grid

console = Console()


def grid_pattern(size: int, period: int) -> np.ndarray:
    lines = np.zeros((size, size))
    lines[::period, :] = 1.0
    lines[:, ::period] = 1.0
    return np.repeat(lines[:, :, None], 3, axis=2)


def clean_pairs(n: int, size: int, seed: int, noise: float):
    for i in range(n):
        x = synth_texture(TextureConfig(size=size, seed=seed), i).astype(np.float64)
        rng = np.random.default_rng([seed, i])
        yield i, x, np.clip(x + noise * rng.standard_normal(x.shape), 0.0, 1.0)


def main() -> int:
    p = argparse.ArgumentParser(description="Injection study for the artifact detector thresholds.")
    p.add_argument("--images", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=11)
    p.add_argument("--noise", type=float, default=0.01, help="Std of the clean reconstruction residual")
    p.add_argument("--period", type=int, default=8)
    p.add_argument("--out", default="out/calibration.json")
    args = p.parse_args()

    log = setup_logging()
    t = DetectorThresholds()
    pairs = list(clean_pairs(args.images, args.size, args.seed, args.noise))
    grid = grid_pattern(args.size, args.period)
    rows = []

    def record(detector: str, setting: str, hits: int, false_alarms: int = -1) -> None:
        rows.append({
            "detector": detector,
            "setting": setting,
            "detection_rate": hits / len(pairs),
            "false_positive_rate": None if false_alarms < 0 else false_alarms / len(pairs),
        })

    fp = sum(detect_grid(x, clean, args.period, t.grid).flagged for _, x, clean in pairs)
    for amp in (0.01, 0.02, 0.05):
        hits = sum(detect_grid(x, clean + amp * grid, args.period, t.grid).flagged for _, x, clean in pairs)
        record("grid", f"amplitude={amp}", hits, fp)

    fp = sum(detect_droplet(x, clean, t.droplet_window, t.droplet).flagged for _, x, clean in pairs)
    for amp in (0.1, 0.3, 0.5):
        hits = located = 0
        for i, x, clean in pairs:
            rng = np.random.default_rng([args.seed + 1, i])
            top, left = (int(v) for v in rng.integers(t.droplet_window, args.size - 2 * t.droplet_window, size=2))
            spotted = clean.copy()
            spotted[top:top + 4, left:left + 4] += amp
            res = detect_droplet(x, spotted, t.droplet_window, t.droplet)
            hits += res.flagged
            located += (abs(res.location[0] - (top + 2)) <= t.droplet_window
                        and abs(res.location[1] - (left + 2)) <= t.droplet_window)
        record("droplet", f"amplitude={amp}", hits, fp)
        rows[-1]["location_rate"] = located / len(pairs)

    fp = sum(detect_blur(x, clean, t.blur_cutoff, t.blur).flagged for _, x, clean in pairs)
    for sigma in (0.5, 1.0, 2.0):
        hits = sum(
            detect_blur(x, gaussian_filter(x, sigma=(sigma, sigma, 0), mode="reflect"), t.blur_cutoff, t.blur).flagged
            for _, x, _ in pairs
        )
        record("blur", f"sigma={sigma}", hits, fp)

    table = Table(title=f"Detector calibration ({len(pairs)} synthetic pairs, {args.size}px)")
    for col in ("detector", "setting", "detection", "false positives"):
        table.add_column(col, justify="right" if col != "detector" else "left")
    for r in rows:
        fpr = "-" if r["false_positive_rate"] is None else f"{r['false_positive_rate']:.0%}"
        table.add_row(r["detector"], r["setting"], f"{r['detection_rate']:.0%}", fpr)
    console.print(table)

    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_json(args.out, {"thresholds": vars(t), "images": len(pairs), "size": args.size, "rows": rows})
    log.info("wrote %s", args.out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
