# scripts/desk_ab_study.py

from __future__ import annotations

import argparse
from pathlib import Path
from typing import Dict, List, Tuple

from rich.console import Console
from rich.table import Table

from vivat_lab.cli import setup_logging
from vivat_lab.core.config import resolve_run_config
from vivat_lab.core.output import write_json
from vivat_lab.data import build_datasets
from vivat_lab.diagnostics import ab_compare
from vivat_lab.training import Trainer, freeze_encoder, heldout_recon_loss

console = Console()

# name -> (A overrides, B overrides, compared metric, expected sign of B - A)
STUDIES: Dict[str, Tuple[List[str], List[str], str, int]] = {
    "kl": (["train.weights.lambda_kl=0.001"], ["train.weights.lambda_kl=0.0001"], "score.blur", 1),
    "adv": (["train.weights.lambda_adv=0.1"], ["train.weights.lambda_adv=0.01"], "score.grid", -1),
    "scn": (["model.decoder_norm=group_norm"], ["model.decoder_norm=scn"], "max_norm_ratio", -1),
    "padding": (["model.padding_policy=zero"], ["model.padding_policy=reflect"], "probe_border_ratio", -1),
}


def run_ab(name: str, seed: int, steps: int, extra: List[str], run_root: Path, log) -> Dict:
    a_over, b_over, metric, expected = STUDIES[name]
    base = ["train.log_every=500", f"train.max_steps={steps}", *extra]
    cfg_a = resolve_run_config(preset="micro", overrides=base + a_over, seed=seed)
    cfg_b = resolve_run_config(preset="micro", overrides=base + b_over, seed=seed)
    train_set, held = build_datasets(cfg_a.data, cfg_a.preprocess)
    report = ab_compare(cfg_a, cfg_b, (train_set, held if len(held) else train_set),
                        run_dir=run_root / name / f"seed{seed}", log=log)
    d = report.delta(metric)
    return {"study": name, "seed": seed, "metric": metric, "a": d.a, "b": d.b, "delta": d.delta,
            "agrees": d.sign == expected}


def run_finetune(seed: int, steps: int, finetune_steps: int, extra: List[str], log) -> Dict:
    cfg = resolve_run_config(preset="micro", overrides=["train.log_every=500", f"train.max_steps={steps}", *extra],
                             seed=seed)
    train_set, held = build_datasets(cfg.data, cfg.preprocess)
    trainer = Trainer(cfg, train_set, log=log)
    trainer.run_until(steps)
    before = heldout_recon_loss(trainer.state.ema, held, cfg.eval.resolution)
    freeze_encoder(trainer.state)
    trainer.run_until(steps + finetune_steps)
    after = heldout_recon_loss(trainer.state.ema, held, cfg.eval.resolution)
    return {"study": "finetune", "seed": seed, "metric": "heldout_recon", "a": before, "b": after,
            "delta": after - before, "agrees": after <= 1.05 * before}


def main() -> int:
    p = argparse.ArgumentParser(description="Seeded desk-scale A/B studies on the micro preset.")
    p.add_argument("--studies", default="kl,adv,scn,padding,finetune")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--finetune-steps", type=int, default=500)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="Extra override applied to both variants")
    p.add_argument("--out", default="out/desk_ab")
    args = p.parse_args()

    out = Path(args.out)
    log = setup_logging(str(out / "study.log"))
    names = [n.strip() for n in args.studies.split(",") if n.strip()]
    unknown = [n for n in names if n != "finetune" and n not in STUDIES]
    if unknown:
        raise SystemExit(f"Unknown studies: {', '.join(unknown)}")

    rows = []
    for name in names:
        for seed in range(args.seeds):
            log.info("study=%s seed=%s", name, seed)
            if name == "finetune":
                rows.append(run_finetune(seed, args.steps, args.finetune_steps, args.overrides, log))
            else:
                rows.append(run_ab(name, seed, args.steps, args.overrides, out, log))

    verdicts = {}
    for name in names:
        votes = [r["agrees"] for r in rows if r["study"] == name]
        verdicts[name] = sum(votes) > len(votes) / 2

    table = Table(title=f"Desk A/B ({args.seeds} seeds, {args.steps} steps)")
    for col in ("study", "seed", "metric", "a", "b", "delta", "agrees"):
        table.add_column(col)
    for r in rows:
        table.add_row(r["study"], str(r["seed"]), r["metric"], f"{r['a']:.4g}", f"{r['b']:.4g}",
                      f"{r['delta']:+.4g}", "yes" if r["agrees"] else "no")
    console.print(table)
    for name, ok in verdicts.items():
        console.print(f"{name}: {'[green]majority agrees[/green]' if ok else '[red]majority disagrees[/red]'}")

    write_json(str(out / "summary.json"), {"steps": args.steps, "seeds": args.seeds, "rows": rows,
                                          "verdicts": verdicts})
    log.info("wrote %s", out / "summary.json")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
