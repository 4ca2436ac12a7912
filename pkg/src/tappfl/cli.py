"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 non-finite loss.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import theory
from .baselines import DEFENSE_KINDS, DefenseConfig
from .data import CsvFormatError
from .experiment import (ROUND_COLUMNS, SWEEP_COLUMNS, ConfigError, ExperimentConfig, load_config, load_split,
                         device_shards, round_rows, run_experiment, run_theory, train_cell, write_csv,
                         write_dataset, write_manifest)
from .evaluation import evaluate_extractor, sweep_rows
from .fl import init_federation
from .nn import checkpoint
from .nn.checkpoint import CheckpointError
from .trainer import NumericError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI experiment configuration")
    p.add_argument("--seed", type=int, help="override the seed list with one seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--lambda", dest="lam", type=float, help="override the lambda list with one value")
    p.add_argument("--rounds", type=int, help="global rounds")
    p.add_argument("--devices", type=int, help="device count")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tappfl", description="Privacy-preserving federated representation learning")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the configured dataset's splits as CSV")
    _common(p)

    p = sub.add_parser("train", help="train one (lambda, seed) cell and write per-round metrics")
    _common(p)

    p = sub.add_parser("baseline", help="train with lambda = 0 under an upload defense")
    _common(p)
    p.add_argument("--defense", choices=[k for k in DEFENSE_KINDS if k != "none"], required=True)
    p.add_argument("--noise-scale", type=float, default=0.0)
    p.add_argument("--prune-rate", type=float, default=0.0)
    p.add_argument("--per-layer", action="store_true", help="prune each tensor at its own quantile")

    p = sub.add_parser("evaluate", help="attack a saved extractor checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="extractor checkpoint written by train")

    p = sub.add_parser("theory-check", help="verify the bounds on random discrete instances")
    _common(p)
    p.add_argument("--instances", type=int, help="number of random instances")

    p = sub.add_parser("sweep", help="every (lambda, seed) cell of the configuration")
    _common(p)
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    return cfg.with_overrides(seed=args.seed, lam=args.lam, rounds=args.rounds, devices=args.devices, out=args.out)


def _first(cfg: ExperimentConfig) -> tuple[float, int]:
    return cfg.sweep.lambdas[0], cfg.sweep.seeds[0]


def cmd_gen_data(cfg: ExperimentConfig) -> None:
    _, seed = _first(cfg)
    split = write_dataset(cfg, seed, Path(cfg.output.dir))
    print(f"wrote {len(split.train)} train / {len(split.test)} test rows to {cfg.output.dir}")


def cmd_train(cfg: ExperimentConfig) -> None:
    lam, seed = _first(cfg)
    out = Path(cfg.output.dir)
    write_manifest(out, cfg)
    split = load_split(cfg, seed)
    server, _, records = train_cell(cfg, lam, seed, split, device_shards(cfg, split, seed))
    write_csv(out / "rounds.csv", round_rows(records), ROUND_COLUMNS)
    checkpoint.save(out / "theta.txt", server.global_theta.params())
    print(f"trained {len(records)} rounds; metrics in {out / 'rounds.csv'}, extractor in {out / 'theta.txt'}")


def cmd_baseline(cfg: ExperimentConfig, args) -> None:
    try:
        defense = DefenseConfig(args.defense, args.noise_scale, args.prune_rate, args.per_layer)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg = replace(cfg, defense=defense)
    run_experiment(cfg, log=print)
    print(f"defense table in {Path(cfg.output.dir) / 'defense.csv'}")


def cmd_evaluate(cfg: ExperimentConfig, args) -> None:
    lam, seed = _first(cfg)
    split = load_split(cfg, seed)
    # a freshly initialized extractor only supplies the checkpoint's expected shapes
    server, _ = init_federation(cfg.fl_config(lam, seed), cfg.architecture.build(), split.train.dim,
                                split.train.attribute_arity)
    try:
        theta = checkpoint.load_into(args.checkpoint, server.global_theta)
    except (OSError, CheckpointError) as exc:
        raise ConfigError(f"cannot use checkpoint {args.checkpoint}: {exc}") from exc
    report = evaluate_extractor(theta, split, seed, cfg.evaluation.settings(), lam=lam, dataset=cfg.dataset.name)
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "eval.csv", sweep_rows([report]), SWEEP_COLUMNS)
    print(f"test_acc={report.test_acc:.4f} infer_acc={report.infer_acc:.4f} gap={report.gap:.4f}")


def cmd_theory(cfg: ExperimentConfig, args) -> int:
    if args.instances is not None:
        cfg = replace(cfg, theory=replace(cfg.theory, instances=args.instances))
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = run_theory(cfg, out)
    lemma = theory.verify_inverse_entropy_lemma()
    failed = sum(not (r.thm1_holds and r.thm2_holds) for r in reports)
    lemma_failed = sum(not p.holds for p in lemma)
    print(f"{len(reports) - failed}/{len(reports)} instances satisfy both bounds; "
          f"lemma holds at {len(lemma) - lemma_failed}/{len(lemma)} grid points")
    return EXIT_OK if failed == 0 and lemma_failed == 0 else 1


def cmd_sweep(cfg: ExperimentConfig) -> None:
    run_experiment(cfg, log=print)
    print(f"sweep table in {Path(cfg.output.dir) / 'sweep.csv'}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        if args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "baseline":
            cmd_baseline(cfg, args)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args)
        elif args.command == "theory-check":
            return cmd_theory(cfg, args)
        elif args.command == "sweep":
            cmd_sweep(cfg)
    except (ConfigError, CsvFormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
