from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
from rich.console import Console
from rich.table import Table

from vivat_lab import diagnostics
from vivat_lab.core.checkpoint import read_checkpoint, tensors_sha256
from vivat_lab.core.config import (
    RunConfig,
    apply_overrides,
    resolve_run_config,
    run_config_from_dict,
    write_run_config,
)
from vivat_lab.core.errors import CheckpointError, ConfigError, DivergenceError, ValidationError
from vivat_lab.core.models import ArtifactReport, ComparisonReport, MetricReport
from vivat_lab.core.output import write_csv, write_heatmap, write_json, write_pair_png
from vivat_lab.data import (
    ImageDataset,
    build_datasets,
    crop,
    list_images,
    load_png,
    resize_proportional,
    to_batch,
    to_images,
)
from vivat_lab.metrics import evaluate
from vivat_lab.nets.vae import VAEModel, model_from_checkpoint
from vivat_lab.training import Trainer, adopt_config, load_checkpoint

console = Console()

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4


def setup_logging(log_path: Optional[str] = None) -> logging.Logger:
    logger = logging.getLogger("vivat_lab")
    logger.setLevel(logging.INFO)
    logger.handlers.clear()

    fmt = logging.Formatter("%(asctime)s %(levelname)s %(message)s")

    # stdout
    sh = logging.StreamHandler(sys.stdout)
    sh.setFormatter(fmt)
    logger.addHandler(sh)

    # file
    if log_path:
        os.makedirs(os.path.dirname(log_path) or ".", exist_ok=True)
        fh = logging.FileHandler(log_path, encoding="utf-8")
        fh.setFormatter(fmt)
        logger.addHandler(fh)

    return logger


def parse_args(argv: List[str]) -> argparse.Namespace:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="", help="YAML or TOML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Dotted config override, repeatable (e.g. train.max_steps=10)")
    common.add_argument("--seed", type=int, default=None, help="Overrides train.seed")
    common.add_argument("--run-dir", default="", help="Run directory (default: $VIVAT_RUN_ROOT/<timestamp>)")
    common.add_argument("--preset", default="", help="baseline, vivat or micro")

    p = argparse.ArgumentParser(prog="vivat", description="Desk-scale KL-VAE training and artifact diagnostics")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="Train a VAE (full phase, then decoder-only)")
    t.add_argument("--resume", default="", help="Continue from a training checkpoint")

    f = sub.add_parser("finetune-decoder", parents=[common], help="Resume a checkpoint with the encoder frozen")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--steps", type=int, default=0, help="Default: train.decoder_only_steps of the checkpoint")

    r = sub.add_parser("reconstruct", parents=[common], help="Side-by-side reconstructions and artifact reports")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--input", required=True, help="Directory of PNG images")
    r.add_argument("--output", required=True)
    r.add_argument("--resolution", type=int, default=0, help="Default: eval.resolution")
    r.add_argument("--trace", action="store_true", help="Also write decoder activation-norm heatmaps")

    d = sub.add_parser("diagnose", parents=[common], help="Artifact detectors over side-by-side pair PNGs")
    d.add_argument("--pairs", required=True, help="Directory of original|reconstruction PNGs")
    d.add_argument("--output", default="", help="Default: <pairs>/diagnostics")
    d.add_argument("--heatmaps", action="store_true", help="Also write residual spectra")

    m = sub.add_parser("metrics", parents=[common], help="PSNR/SSIM of a checkpoint on the configured dataset")
    src = m.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", default="")
    src.add_argument("--identity", action="store_true", help="Score the identity reconstructor")
    m.add_argument("--output", default="", help="Default: <run dir>")

    a = sub.add_parser("ab", parents=[common], help="Compare two variants; B uses --config-b (else --config) and --set-b")
    a.add_argument("--config-b", default="", help="Config file for variant B instead of --config")
    a.add_argument("--set-b", dest="overrides_b", action="append", default=[], metavar="KEY=VALUE")
    a.add_argument("--untrained", action="store_true", help="Compare freshly initialised networks")

    pr = sub.add_parser("probe", parents=[common], help="Trace activation norms on a constant or given image")
    pr.add_argument("--checkpoint", default="", help="Default: a freshly initialised network")
    pr.add_argument("--image", default="", help="PNG to probe instead of a constant image")
    pr.add_argument("--value", type=float, default=diagnostics.DEFAULT_PROBE_VALUE)
    pr.add_argument("--size", type=int, default=0, help="Default: eval.resolution")
    return p.parse_args(argv)


def resolve_config(args: argparse.Namespace, check_data: bool = True) -> RunConfig:
    return resolve_run_config(args.config, args.preset, args.overrides, args.seed, args.run_dir, check_data)


def make_run_dir(cfg: RunConfig) -> Path:
    if cfg.paths.run_dir:
        run_dir = Path(cfg.paths.run_dir)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = cfg.paths.resolved_run_root() / f"{stamp}-seed{cfg.train.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def eval_set_of(train_set: ImageDataset, held: ImageDataset) -> ImageDataset:
    return held if len(held) > 0 else train_set


def load_eval_model(path: str, use_ema: bool = True) -> Tuple[VAEModel, Dict]:
    meta, tensors = read_checkpoint(path)
    prefix = "ema/" if meta.get("kind") == "train_state" and use_ema else "model/"
    return model_from_checkpoint(meta, tensors, prefix), meta


def render_metrics(report: MetricReport, limit: int = 20) -> None:
    t = Table(title=f"Reconstruction metrics ({report.psnr.count} images, {report.resolution}px)")
    t.add_column("image")
    t.add_column("psnr", justify="right")
    t.add_column("ssim", justify="right")
    for m in report.images[:limit]:
        t.add_row(m.name, f"{m.psnr:.3f}", f"{m.ssim:.4f}")
    t.add_row("[bold]mean[/bold]", f"{report.psnr.mean:.3f}", f"{report.ssim.mean:.4f}")
    console.print(t)


def render_reports(reports: List[ArtifactReport], limit: int = 20) -> None:
    t = Table(title=f"Artifact detectors (first {min(limit, len(reports))} of {len(reports)})")
    t.add_column("image")
    for key in ("color_shift", "grid", "blur", "corner", "droplet"):
        t.add_column(key, justify="right")
    for r in reports[:limit]:
        scores, flags = r.scores(), r.flags()
        cells = [f"{'[red]' if flags[k] else ''}{scores[k]:.3g}" for k in scores]
        t.add_row(r.name, *cells)
    console.print(t)


def render_comparison(report: ComparisonReport) -> None:
    t = Table(title=f"A/B: {', '.join(report.differing_fields) or 'identical configs'}")
    t.add_column("metric")
    t.add_column(report.variant_a.label, justify="right")
    t.add_column(report.variant_b.label, justify="right")
    t.add_column("delta", justify="right")
    for d in report.deltas:
        t.add_row(d.metric, f"{d.a:.4g}", f"{d.b:.4g}", f"{d.delta:+.4g}")
    console.print(t)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    run_dir = make_run_dir(cfg)
    log = setup_logging(str(run_dir / "run.log"))
    state = None
    if args.resume:
        state = adopt_config(load_checkpoint(args.resume), cfg)
        log.info("resuming from %s at step=%s", args.resume, state.step)
    write_run_config(cfg, run_dir / "config.yml")
    train_set, held = build_datasets(cfg.data, cfg.preprocess)
    log.info("run_dir=%s train_images=%s heldout=%s", run_dir, len(train_set), len(held))
    trainer = Trainer(cfg, train_set, run_dir, log, state=state)
    state = trainer.fit()
    model = state.ema if cfg.eval.use_ema else state.model
    report = evaluate(model, eval_set_of(train_set, held), cfg.eval, log)
    write_json(str(run_dir / "metrics.json"), report.to_json())
    render_metrics(report)
    return EXIT_OK


def cmd_finetune_decoder(args: argparse.Namespace) -> int:
    state = load_checkpoint(args.checkpoint)
    data = apply_overrides(state.config.to_dict(), args.overrides)
    if args.seed is not None:
        data["train"]["seed"] = args.seed
    cfg = run_config_from_dict(data, check_data=True)
    adopt_config(state, cfg)
    run_dir = Path(args.run_dir) if args.run_dir else Path(args.checkpoint).resolve().parent.parent
    run_dir.mkdir(parents=True, exist_ok=True)
    log = setup_logging(str(run_dir / "run.log"))
    steps = args.steps or cfg.train.decoder_only_steps
    if steps <= 0:
        raise ConfigError("--steps", "give --steps or a positive train.decoder_only_steps")
    before = tensors_sha256(state.model.encoder_state())
    train_set, held = build_datasets(cfg.data, cfg.preprocess)
    trainer = Trainer(cfg, train_set, run_dir, log, state=state)
    start = state.step
    state = trainer.finetune_decoder(steps)
    after = tensors_sha256(state.model.encoder_state())
    write_json(str(run_dir / "finetune.json"), {
        "checkpoint": args.checkpoint, "start_step": start, "end_step": state.step,
        "encoder_sha256_before": before, "encoder_sha256_after": after,
    })
    log.info("finetune done steps=%s..%s encoder_unchanged=%s", start, state.step, before == after)
    return EXIT_OK


def _eval_crop(img: np.ndarray, resolution: int) -> np.ndarray:
    return np.ascontiguousarray(crop(resize_proportional(img, resolution), resolution, "center"), dtype=np.float32)


def cmd_reconstruct(args: argparse.Namespace) -> int:
    out = Path(args.output)
    log = setup_logging(str(out / "reconstruct.log"))
    model, meta = load_eval_model(args.checkpoint)
    model.eval()
    run_cfg = run_config_from_dict(meta["run_config"], check_data=False) if "run_config" in meta else RunConfig()
    thresholds = run_cfg.detectors
    resolution = args.resolution or run_cfg.eval.resolution
    f = model.config.downscale_factor
    dtype = next(model.parameters()).dtype
    done, skipped = 0, 0
    for path in list_images(args.input):
        try:
            img = _eval_crop(load_png(path), resolution)
        except (OSError, ValueError) as e:
            log.warning("skipping unreadable image %s: %s", path, e)
            skipped += 1
            continue
        with torch.no_grad():
            x = to_batch([img], dtype)
            dist = model.encode(x)
            xhat, trace = model.decode(dist.mu, trace=args.trace)
        rec = to_images(xhat.clamp(0.0, 1.0))[0]
        stem = path.stem
        write_pair_png(str(out / f"{stem}_pair.png"), img, rec)
        report = diagnostics.analyze_pair(img, rec, thresholds, f, path.name)
        write_json(str(out / f"{stem}_report.json"), report.to_json())
        if args.trace:
            stats = diagnostics.norm_stats(trace)
            write_json(str(out / f"{stem}_norms.json"), stats.to_json())
            for name, norms in trace.items():
                write_heatmap(str(out / f"{stem}_trace" / f"{name}.png"), norms[0].double().numpy())
        done += 1
    log.info("reconstructed=%s skipped=%s output=%s", done, skipped, out)
    console.print(f"reconstructed {done} images, skipped {skipped}")
    return EXIT_OK if done or not skipped else EXIT_IO


def read_pairs(pairs_dir: str, log: logging.Logger) -> Tuple[List[Tuple[str, np.ndarray, np.ndarray]], int]:
    pairs, skipped = [], 0
    for path in list_images(pairs_dir):
        try:
            both = load_png(path)
        except OSError as e:
            log.warning("skipping unreadable image %s: %s", path, e)
            skipped += 1
            continue
        w = both.shape[1] // 2
        if both.shape[1] != 2 * w:
            log.warning("skipping %s: width %s is not an original|reconstruction pair", path, both.shape[1])
            skipped += 1
            continue
        pairs.append((path.name, both[:, :w], both[:, w:]))
    return pairs, skipped


def cmd_diagnose(args: argparse.Namespace) -> int:
    cfg = resolve_config(args, check_data=False)
    out = Path(args.output or Path(args.pairs) / "diagnostics")
    log = setup_logging(str(out / "diagnose.log"))
    pairs, skipped = read_pairs(args.pairs, log)
    if not pairs:
        log.error("no readable pairs under %s", args.pairs)
        return EXIT_IO
    reports = diagnostics.evaluate(pairs, cfg.detectors, cfg.model.downscale_factor)
    scores, rates = diagnostics.aggregate_reports(reports)
    write_json(str(out / "reports.json"), {
        "reports": [r.to_json() for r in reports], "mean_scores": scores, "flag_rates": rates, "skipped": skipped,
    })
    if args.heatmaps:
        for name, x, xhat in pairs:
            write_heatmap(str(out / f"{Path(name).stem}_spectrum.png"), diagnostics.residual_spectrum(x, xhat))
    render_reports(reports)
    log.info("diagnosed=%s skipped=%s flag_rates=%s", len(reports), skipped, rates)
    return EXIT_OK


def cmd_metrics(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    out = Path(args.output) if args.output else make_run_dir(cfg)
    log = setup_logging(str(out / "metrics.log"))
    train_set, held = build_datasets(cfg.data, cfg.preprocess)
    if args.identity:
        model = lambda x: x  # noqa: E731
        spec = replace(cfg.eval, model_id=cfg.eval.model_id or "identity")
    else:
        model, _ = load_eval_model(args.checkpoint, cfg.eval.use_ema)
        spec = replace(cfg.eval, model_id=cfg.eval.model_id or Path(args.checkpoint).name)
    report = evaluate(model, eval_set_of(train_set, held), spec, log)
    write_json(str(out / "metrics.json"), report.to_json())
    write_csv(str(out / "metrics.csv"), list(report.images))
    render_metrics(report)
    return EXIT_OK


def cmd_ab(args: argparse.Namespace) -> int:
    cfg_a = resolve_config(args)
    cfg_b = resolve_run_config(args.config_b or args.config, args.preset, args.overrides + args.overrides_b,
                               args.seed, args.run_dir)
    run_dir = make_run_dir(cfg_a)
    log = setup_logging(str(run_dir / "ab.log"))
    write_run_config(cfg_a, run_dir / "a" / "config.yml")
    write_run_config(cfg_b, run_dir / "b" / "config.yml")
    train_set, held = build_datasets(cfg_a.data, cfg_a.preprocess)
    report = diagnostics.ab_compare(cfg_a, cfg_b, (train_set, eval_set_of(train_set, held)), cfg_a.eval,
                                    train=not args.untrained, run_dir=run_dir, log=log)
    write_json(str(run_dir / "comparison.json"), report.to_json())
    render_comparison(report)
    return EXIT_OK


def cmd_probe(args: argparse.Namespace) -> int:
    cfg = resolve_config(args, check_data=False)
    run_dir = make_run_dir(cfg)
    log = setup_logging(str(run_dir / "probe.log"))
    if args.checkpoint:
        model, _ = load_eval_model(args.checkpoint, cfg.eval.use_ema)
    else:
        torch.manual_seed(cfg.train.seed)
        model = VAEModel(cfg.model)
    model.eval()
    size = args.size or cfg.eval.resolution
    dtype = next(model.parameters()).dtype
    image = to_batch([_eval_crop(load_png(args.image), size)], dtype) if args.image else None
    trace = diagnostics.probe_trace(model, image, size, args.value)
    report = diagnostics.probe(model, image=image, size=size, value=args.value, trace=trace)
    write_json(str(run_dir / "probe.json"), report.to_json())
    for name, norms in trace.items():
        write_heatmap(str(run_dir / "heatmaps" / f"{name}.png"), norms[0].double().numpy())
    title = "image" if args.image else f"constant {args.value}"
    t = Table(title=f"Activation probe ({title}, {size}px)")
    t.add_column("stage")
    t.add_column("border/interior", justify="right")
    t.add_column("deviation", justify="right")
    for s in report.stages:
        t.add_row(s.layer, f"{s.border_ratio:.4f}", f"{s.deviation:.2e}")
    console.print(t)
    log.info("probe max_border_ratio=%.4f max_norm_ratio=%.4f", report.max_border_ratio(), report.norms.max_ratio())
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "train": cmd_train,
    "finetune-decoder": cmd_finetune_decoder,
    "reconstruct": cmd_reconstruct,
    "diagnose": cmd_diagnose,
    "metrics": cmd_metrics,
    "ab": cmd_ab,
    "probe": cmd_probe,
}


def main(argv: List[str] | None = None) -> int:
    args = parse_args(sys.argv[1:] if argv is None else argv)
    log = logging.getLogger("vivat_lab")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        console.print(f"[red]config error[/red] {e.field}: {e.message}")
        log.error("config error %s: %s", e.field, e.message)
        return EXIT_CONFIG
    except DivergenceError as e:
        console.print(f"[red]diverged[/red] {e}")
        log.error("diverged component=%s step=%s", e.component, e.step)
        return EXIT_DIVERGENCE
    except (CheckpointError, OSError) as e:
        console.print(f"[red]io error[/red] {e}")
        log.error("io error: %s", e)
        return EXIT_IO
    except ValidationError as e:
        console.print(f"[red]invalid input[/red] {e}")
        log.error("invalid input: %s", e)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
