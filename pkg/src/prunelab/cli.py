"""Command-line entry point: ``prunelab <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config
from .engine import STRATEGIES
from .errors import ConfigError, PrunelabError
from .experiment import render_from_dir, run_experiment, single_cell, train_dense
from .masking import build_global_mask
from .model import PARAM_MODES, init_model, load_checkpoint, make_probe_inputs, save_checkpoint
from .schedule import SCHEDULE_KINDS
from .sparse import coordinate_figure_check, flops_count, model_memory_report, throughput_bench
from .spectral import analyze, calibrate_constant, random_masks, write_csv

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 1, 2
OUT_ENV = "PRUNELAB_OUT"
SUBCOMMANDS = ("train", "prune", "analyze", "bench", "report", "sweep")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, help=f"output directory (${OUT_ENV} takes precedence)")
    common.add_argument("--sparsity", type=float, help="final sparsity s_f")
    common.add_argument("--alpha", type=float, help="gradient exponent")
    common.add_argument("--strategy", choices=STRATEGIES)
    common.add_argument("--schedule", choices=SCHEDULE_KINDS)
    common.add_argument("--param-mode", choices=PARAM_MODES, dest="param_mode")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="prunelab", description="Stability-aware pruning lab for selective SSMs")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="train the dense baseline")
    sub.add_parser("prune", parents=[common], help="dense baseline plus one pruning run")
    an = sub.add_parser("analyze", parents=[common], help="stability report for a checkpoint")
    an.add_argument("--checkpoint", type=Path, help="checkpoint written by train or prune")
    an.add_argument("--dense", type=Path, help="dense checkpoint to apply the checkpoint's mask to")
    an.add_argument("--masks", type=int, default=50, help="calibration ensemble size")
    sub.add_parser("bench", parents=[common], help="memory, FLOPs and throughput accounting")
    sub.add_parser("report", parents=[common], help="summarize an existing output directory")
    sub.add_parser("sweep", parents=[common], help="dense baseline plus the configured grid")
    return parser


def _resolve(args) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg = cfg.with_overrides(
        seed=args.seed,
        s_f=args.sparsity,
        alpha=args.alpha,
        strategy=args.strategy,
        schedule=args.schedule,
        param_mode=args.param_mode,
    )
    out = os.environ.get(OUT_ENV) or args.out or cfg.run.out
    return cfg, Path(out)


def _cmd_train(cfg: ExperimentConfig, out: Path, args) -> int:
    out.mkdir(parents=True, exist_ok=True)
    dense = train_dense(cfg)
    save_checkpoint(out / "dense.ckpt", dense.model)
    (out / "metrics.json").write_text(json.dumps(dense.metrics | {"top20_mass": dense.top20_mass}, indent=2) + "\n")
    print(json.dumps(dense.metrics))
    return EXIT_OK


def _cmd_experiment(cfg: ExperimentConfig, out: Path, cells) -> int:
    report = run_experiment(cfg, cells, out_dir=out)
    print((out / "report.txt").read_text(), end="")
    return EXIT_RUN if report.partial else EXIT_OK


def _cmd_analyze(cfg: ExperimentConfig, out: Path, args) -> int:
    out.mkdir(parents=True, exist_ok=True)
    if args.checkpoint:
        model, mask = load_checkpoint(args.checkpoint)
    else:
        model = init_model(cfg.resolved().model)
        mask = None
    if args.dense:
        # shift is measured between the dense weights and the same weights under the pruned mask
        model = load_checkpoint(args.dense)[0]
    if mask is None:
        mask = random_masks(model, [cfg.prune.s_f], seed=cfg.seed)[0]
    probes = make_probe_inputs(model.config)
    rng = np.random.default_rng([cfg.seed, 5])
    cal = calibrate_constant(model, random_masks(model, rng.uniform(0.3, 0.7, args.masks), seed=cfg.seed + 1), probes)
    report = analyze(model, mask, probes, cfg.prune.epsilon, calibration=cal)
    (out / "stability_report.txt").write_text(report.to_text())
    report.to_csv(out / "stability.csv")
    print(report.to_text(), end="")
    return EXIT_OK


def _cmd_bench(cfg: ExperimentConfig, out: Path, args) -> int:
    out.mkdir(parents=True, exist_ok=True)
    model = init_model(cfg.resolved().model)
    rows = []
    for s in sorted({0.0, cfg.prune.s_f, 0.7}):
        mask = build_global_mask({k: np.abs(model.params[k]) for k in model.maskable_keys()}, s)
        mem = model_memory_report(model, mask)
        fl = flops_count(model, mask, cfg.bench.seq_len, cfg.bench.batch)
        tp = throughput_bench(model, mask, cfg.bench)
        rows.append({
            "sparsity": s,
            "bitmask_ratio": mem["bitmask_ratio"],
            "coordinate_ratio": mem["coordinate_ratio"],
            "flops_ratio": fl.maskable_ratio,
            "flops_ratio_with_unmaskable": fl.total_ratio,
            "tokens_per_second": tp.tokens_per_second,
            "speedup_vs_full_density": tp.speedup,
            "dense_blas_tokens_per_second": tp.dense_blas_tokens_per_second,
        })
    write_csv(out / "efficiency.csv", rows, list(rows[0]))
    check = coordinate_figure_check(1000, 0.7)
    lines = [f"{k}: " + ", ".join(f"{r[k]:.4g}" for r in rows) for k in rows[0]]
    lines.append(
        f"coordinate format at 70% sparsity: {check['computed_factor']:.1f}N bytes by per-element arithmetic; "
        f"a stated figure of 1.8N is {'consistent' if check['consistent'] else 'inconsistent'} with it"
    )
    lines.append(f"hardware: {tp.hardware}")
    (out / "bench.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def _cmd_report(cfg: ExperimentConfig, out: Path, args) -> int:
    text = render_from_dir(out)
    print(text, end="")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg, out = _resolve(args)
        cfg.resolved()
    except ConfigError as exc:
        print(f"prunelab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "train":
            return _cmd_train(cfg, out, args)
        if args.command == "prune":
            return _cmd_experiment(cfg, out, single_cell(cfg))
        if args.command == "sweep":
            return _cmd_experiment(cfg, out, None)
        if args.command == "analyze":
            return _cmd_analyze(cfg, out, args)
        if args.command == "bench":
            return _cmd_bench(cfg, out, args)
        return _cmd_report(cfg, out, args)
    except ConfigError as exc:
        print(f"prunelab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PrunelabError, OSError, ArithmeticError) as exc:
        print(f"prunelab: run failed: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
