"""Command-line interface: synth, train, eval, compare.

Reports are written as CSV plus an aligned-text table, with matplotlib
figures rendered next to them.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path

import numpy as np

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from . import config as cfgmod
from . import experiment as exp
from .dataset import load_dataset, write_dataset
from .metrics import SCORE_COLUMNS, render_csv, render_table
from .model import load_checkpoint, save_checkpoint
from .training import prepare_split, train_model


def _load_config(args) -> cfgmod.ExperimentConfig:
    cfg = cfgmod.load_config(args.config) if args.config else cfgmod.ExperimentConfig()
    if args.arm:
        cfg = cfgmod.for_arm(cfg, args.arm)
    if args.seed is not None:
        cfg = dataclasses.replace(
            cfg, split=dataclasses.replace(cfg.split, seed=args.seed))
    cfg.validate()
    return cfg


def _write_history(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(history[0].keys()))
        writer.writeheader()
        writer.writerows(history)


def _score_figure(path: Path, rows: list[dict], title: str) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    x = np.arange(len(SCORE_COLUMNS))
    width = 0.8 / max(1, len(rows))
    for i, row in enumerate(rows):
        vals = [100.0 * row[c] for c in SCORE_COLUMNS]
        ax.bar(x + i * width, vals, width, label=str(row["id"]))
    ax.set_xticks(x + width * (len(rows) - 1) / 2)
    ax.set_xticklabels([c.replace("_f1", "").capitalize() + "-F1" for c in SCORE_COLUMNS])
    ax.set_ylabel("F1 (%)")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _uncertainty_figure(path: Path, rows: list[dict]) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.arange(len(rows))
    ax.bar(x - 0.2, [r["in_domain"] for r in rows], 0.4, label="in-domain (val)")
    ax.bar(x + 0.2, [r["ood"] for r in rows], 0.4, label="out-of-domain (test)")
    ax.set_xticks(x)
    ax.set_xticklabels([f"seed {r['seed']}" for r in rows])
    ax.set_ylabel("mean uncertainty")
    ax.set_title("Open-world uncertainty: in-domain vs held-out domain")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    split = exp.build_split(cfg.split)
    manifest = write_dataset(split, out)
    n = len(split.train), len(split.validation), len(split.test)
    print(f"wrote {sum(n)} clips (train/val/test = {n[0]}/{n[1]}/{n[2]}) -> {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    split = load_dataset(Path(args.data) / "manifest.json")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prepared = prepare_split(split, cfg.features, exp.class_map(cfg))
    seeds = cfg.train.seeds[:cfg.n_models]
    for seed in seeds:
        trained = train_model(prepared, cfg.arch, cfg.features, cfg.train, seed,
                              log=lambda row: print(
                                  f"seed {seed} epoch {row['epoch']}: "
                                  f"train {row['train_total']:.4f} "
                                  f"val {row['val_total']:.4f}"))
        save_checkpoint(out / f"ckpt_seed{seed}.bin", trained.build())
        _write_history(out / f"history_seed{seed}.csv", trained.history)
    print(f"wrote {len(seeds)} checkpoint(s) -> {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    split = load_dataset(Path(args.data) / "manifest.json")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prepared = prepare_split(split, cfg.features, exp.class_map(cfg))

    ckpt_dir = Path(args.checkpoints)
    seeds = cfg.train.seeds[:cfg.n_models]
    models = []
    for seed in seeds:
        model = load_checkpoint(ckpt_dir / f"ckpt_seed{seed}.bin")
        if model.arch != cfg.arch:
            raise ValueError(
                f"checkpoint arch {model.arch} does not match config arch {cfg.arch}")
        models.append(model)

    report = exp.score_models(models, prepared, split, cfg, cfg.fusion)
    rows = [{"id": cfg.arm, **report.as_row()}]
    (out / "metrics.csv").write_text(render_csv(rows))
    (out / "metrics.txt").write_text(render_table(rows, f"Arm {cfg.arm} test scores"))
    _score_figure(out / "metrics.png", rows, f"Arm {cfg.arm}")

    unc_rows = [{"seed": s,
                 "in_domain": exp.mean_uncertainty(m, prepared.validation),
                 "ood": exp.mean_uncertainty(m, prepared.test)}
                for s, m in zip(seeds, models)]
    with open(out / "uncertainty.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["seed", "in_domain", "ood"])
        writer.writeheader()
        writer.writerows(unc_rows)
    _uncertainty_figure(out / "uncertainty.png", unc_rows)
    print(render_table(rows, f"Arm {cfg.arm} test scores"))
    return 0


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = exp.run_comparison(
        cfg, log=(lambda row: print(f"  epoch {row['epoch']}: "
                                    f"val {row['val_total']:.4f}"))
        if args.verbose else None)

    rows = result.table_rows()
    rows.append(exp.relative_improvement(rows[0], rows[3]))
    (out / "comparison.csv").write_text(render_csv(rows))
    (out / "comparison.txt").write_text(
        render_table(rows, "Arm comparison on the held-out domain"))
    _score_figure(out / "comparison.png", rows[:4], "Arm comparison")

    per_seed = [row for arm in ("P1", "P2") for row in result.arms[arm].per_seed]
    (out / "per_seed.csv").write_text(render_csv(
        [{k: v for k, v in r.items() if k != "seed"} for r in per_seed]))

    with open(out / "uncertainty.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["seed", "in_domain", "ood"])
        writer.writeheader()
        writer.writerows(result.uncertainty)
    _uncertainty_figure(out / "uncertainty.png", result.uncertainty)

    for member in result.plain_bundle.members:
        save_checkpoint(out / f"ckpt_plain_seed{member.seed}.bin", member.build())
    for member in result.eow_bundle.members:
        save_checkpoint(out / f"ckpt_eow_seed{member.seed}.bin", member.build())

    print(render_table(rows, "Arm comparison on the held-out domain"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="opensed",
        description="Open-environment sound event detection with calibrated ensembles")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, ckpt=False):
        p.add_argument("--config", help="experiment config JSON (defaults used if omitted)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the dataset split seed")
        p.add_argument("--arm", choices=cfgmod.ARMS, help="override the experiment arm")
        if data:
            p.add_argument("--data", required=True, help="dataset directory (holds manifest.json)")
        if ckpt:
            p.add_argument("--checkpoints", required=True, help="checkpoint directory")

    common(sub.add_parser("synth", help="materialize the synthetic dataset"))
    common(sub.add_parser("train", help="train the configured arm"), data=True)
    common(sub.add_parser("eval", help="evaluate checkpoints on the test partition"),
           data=True, ckpt=True)
    cmp_p = sub.add_parser("compare", help="train and score all four arms")
    common(cmp_p)
    cmp_p.add_argument("--verbose", action="store_true", help="log per-epoch losses")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"synth": cmd_synth, "train": cmd_train,
                "eval": cmd_eval, "compare": cmd_compare}
    try:
        return handlers[args.command](args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FloatingPointError, RuntimeError) as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
