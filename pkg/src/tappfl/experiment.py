"""Experiment configuration, orchestration and metrics output."""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import theory
from .baselines import MATCHED_COLUMNS, DefenseConfig, baseline_config, matched_leakage_rows, upload_transform
from .data import (CsvSchema, DataSplit, SyntheticSpec, gen_synthetic, load_csv, partition, shards_for,
                   train_test_split, write_meta)
from .evaluation import LAMBDA_SWEEP, EvalReport, ProbeSettings, evaluate_extractor, sweep_rows
from .fl import PAPER_OMEGA_HIDDEN, Architecture, FLConfig, RoundRecord, ServerState, init_federation, run_training
from .nn import checkpoint
from .nn.checkpoint import atomic_write_text, format_float
from .trainer import DeviceModel, DeviceShard

ROUND_COLUMNS = ("round", "mean_ce_loss", "mean_jsd_loss", "wall_ms")
SWEEP_COLUMNS = ("dataset", "lambda", "test_acc", "infer_acc", "gap", "seed")


class ConfigError(ValueError):
    """The experiment configuration is malformed or inconsistent."""


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    name: str = "synthetic"
    path: str = ""
    label: str = ""
    attribute: str = ""
    categorical: tuple[str, ...] = ()
    drop: tuple[str, ...] = ()
    n: int = 5000
    d: int = 20
    attr_leak: float = 1.0
    label_signal: float = 1.0
    attr_label_corr: float = 0.5
    noise_std: float = 1.0
    test_fraction: float = 0.2
    partition: str = "iid"
    alpha: float = 1.0


@dataclass(frozen=True)
class FederationConfig:
    devices: int = 100
    rho: float = 0.1
    rounds: int = 20
    local_epochs: int = 10
    batch_size: int = 10
    lr_psi: float = 0.01
    lr_omega: float = 0.01
    lr_theta: float = 0.01
    weighted_avg: bool = False
    train_only_sampled: bool = False
    theta_privacy_sign: str = "eq7"
    sequential_refresh: bool = False
    pretrain_epochs: int = 0


@dataclass(frozen=True)
class ArchitectureConfig:
    theta_hidden: tuple[int, ...] = (64, 128)
    theta_activations: tuple[str, ...] = ("relu", "sigmoid")
    psi_hidden: tuple[int, ...] = (64, 128, 4)
    omega_hidden: tuple[int, ...] = (128, 128, 64)
    paper_omega: bool = False

    def build(self) -> Architecture:
        omega = PAPER_OMEGA_HIDDEN if self.paper_omega else self.omega_hidden
        return Architecture(self.theta_hidden, self.theta_activations, self.psi_hidden, omega)


@dataclass(frozen=True)
class SweepConfig:
    lambdas: tuple[float, ...] = LAMBDA_SWEEP
    seeds: tuple[int, ...] = (0,)


@dataclass(frozen=True)
class EvaluationConfig:
    adversary: str = "fresh"
    hidden: tuple[int, ...] = (64, 128, 4)
    epochs: int = 50
    lr: float = 0.01
    batch_size: int = 32
    standardize: bool = True

    def settings(self) -> ProbeSettings:
        return ProbeSettings(self.hidden, self.epochs, self.lr, self.batch_size, self.standardize)


@dataclass(frozen=True)
class TheoryConfig:
    enabled: bool = False
    instances: int = 50
    max_bins: int = 8


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "out"
    checkpoint_every: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    theory: TheoryConfig = field(default_factory=TheoryConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def fl_config(self, lam: float, seed: int) -> FLConfig:
        f = self.federation
        try:
            return FLConfig(num_devices=f.devices, rho=f.rho, rounds=f.rounds, local_epochs=f.local_epochs,
                            batch_size=f.batch_size, lr_psi=f.lr_psi, lr_omega=f.lr_omega, lr_theta=f.lr_theta,
                            lambdas=(float(lam),), seed=int(seed), weighted_avg=f.weighted_avg,
                            train_only_sampled=f.train_only_sampled, theta_privacy_sign=f.theta_privacy_sign,
                            sequential_refresh=f.sequential_refresh, pretrain_epochs=f.pretrain_epochs)
        except ValueError as exc:
            raise ConfigError(f"[federation] {exc}") from exc

    def with_overrides(self, **flags) -> "ExperimentConfig":
        """Apply CLI-style overrides: seed, lam, rounds, devices, out."""
        cfg = self
        if flags.get("seed") is not None:
            cfg = replace(cfg, sweep=replace(cfg.sweep, seeds=(int(flags["seed"]),)))
        if flags.get("lam") is not None:
            cfg = replace(cfg, sweep=replace(cfg.sweep, lambdas=(float(flags["lam"]),)))
        if flags.get("rounds") is not None:
            cfg = replace(cfg, federation=replace(cfg.federation, rounds=int(flags["rounds"])))
        if flags.get("devices") is not None:
            cfg = replace(cfg, federation=replace(cfg.federation, devices=int(flags["devices"])))
        if flags.get("out") is not None:
            cfg = replace(cfg, output=replace(cfg.output, dir=str(flags["out"])))
        validate(cfg)
        return cfg


_SECTIONS = ("dataset", "federation", "architecture", "defense", "sweep", "evaluation", "theory", "output")


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return format_float(v)
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    return str(v)


def _parse_value(text: str, default, where: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [s.strip() for s in text.split(",") if s.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(s) for s in items)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    return text


def to_ini(cfg: ExperimentConfig) -> str:
    """Canonical text form: every key, fixed order, fixed number formatting."""
    out = io.StringIO()
    for name in _SECTIONS:
        out.write(f"[{name}]\n")
        section = getattr(cfg, name)
        for f in fields(section):
            out.write(f"{f.name} = {_format_value(getattr(section, f.name))}\n")
        out.write("\n")
    return out.getvalue()


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(to_ini(cfg).encode()).hexdigest()


def parse_ini(text: str, source: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    unknown = set(parser.sections()) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {sorted(unknown)}")
    base = ExperimentConfig()
    parts = {}
    for name in _SECTIONS:
        section = getattr(base, name)
        cls = type(section)
        known = {f.name for f in fields(cls)}
        values = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in known:
                    raise ConfigError(f"{source}: [{name}] has unknown key {key!r}")
                default = getattr(section, key)
                if key == "lambdas":
                    default = (0.0,)
                elif key == "seeds":
                    default = (0,)
                values[key] = _parse_value(raw, default, f"{source}: [{name}] {key}")
        try:
            parts[name] = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: [{name}] {exc}") from exc
    cfg = ExperimentConfig(**parts)
    validate(cfg)
    return cfg


def load_config(path: Optional[str]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_ini(text, str(path))


def validate(cfg: ExperimentConfig) -> None:
    ds = cfg.dataset
    if ds.kind not in ("synthetic", "csv"):
        raise ConfigError(f"[dataset] kind must be synthetic or csv, got {ds.kind!r}")
    if ds.kind == "csv" and not (ds.path and ds.label and ds.attribute):
        raise ConfigError("[dataset] csv datasets need path, label and attribute")
    if not 0.0 < ds.test_fraction < 1.0:
        raise ConfigError("[dataset] test_fraction must lie in (0, 1)")
    if ds.partition not in ("iid", "attr_skew"):
        raise ConfigError(f"[dataset] partition must be iid or attr_skew, got {ds.partition!r}")
    if not cfg.sweep.lambdas or not cfg.sweep.seeds:
        raise ConfigError("[sweep] needs at least one lambda and one seed")
    if len(set(cfg.sweep.lambdas)) != len(cfg.sweep.lambdas):
        raise ConfigError("[sweep] lambdas must be distinct")
    if cfg.evaluation.adversary not in ("fresh", "training_psi"):
        raise ConfigError("[evaluation] adversary must be fresh or training_psi")
    if cfg.output.checkpoint_every < 0:
        raise ConfigError("[output] checkpoint_every must be non-negative")
    try:
        SyntheticSpec(ds.n, ds.d, ds.attr_leak, ds.label_signal, ds.attr_label_corr, ds.noise_std)
    except ValueError as exc:
        if ds.kind == "synthetic":
            raise ConfigError(f"[dataset] {exc}") from exc
    for lam in cfg.sweep.lambdas:
        cfg.fl_config(lam, cfg.sweep.seeds[0])


def load_split(cfg: ExperimentConfig, seed: int) -> DataSplit:
    ds = cfg.dataset
    if ds.kind == "synthetic":
        full = gen_synthetic(SyntheticSpec(ds.n, ds.d, ds.attr_leak, ds.label_signal, ds.attr_label_corr,
                                           ds.noise_std, seed))
        return train_test_split(full, ds.test_fraction, seed)
    schema = CsvSchema(ds.label, ds.attribute, tuple(ds.categorical), tuple(ds.drop))
    return load_csv(ds.path, schema, ds.test_fraction, seed)


def device_shards(cfg: ExperimentConfig, split: DataSplit, seed: int) -> list[DeviceShard]:
    parts = partition(split.train, cfg.federation.devices, cfg.dataset.partition, cfg.dataset.alpha, seed)
    return shards_for(split.train, parts)


def format_row(row: dict, columns: Sequence[str]) -> list[str]:
    out = []
    for c in columns:
        v = row[c]
        if isinstance(v, (bool, np.bool_)):
            out.append("true" if v else "false")
        elif isinstance(v, (float, np.floating)):
            out.append(format_float(float(v)))
        else:
            out.append(str(v))
    return out


def csv_text(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow(format_row(row, columns))
    return buf.getvalue()


def write_csv(path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    atomic_write_text(path, csv_text(rows, columns))


def round_rows(records: Sequence[RoundRecord]) -> list[dict]:
    return [{"round": r.round, "mean_ce_loss": r.mean_ce_loss, "mean_jsd_loss": r.mean_jsd_loss,
             "wall_ms": r.wall_ms} for r in records]


@dataclass
class CellResult:
    report: EvalReport
    records: list[RoundRecord]
    server: ServerState
    devices: list[DeviceModel]


def train_cell(cfg: ExperimentConfig, lam: float, seed: int, split: DataSplit, shards: Sequence[DeviceShard],
               defense: Optional[DefenseConfig] = None,
               on_round: Optional[Callable] = None) -> tuple[ServerState, list[DeviceModel], list[RoundRecord]]:
    fl_cfg = cfg.fl_config(lam, seed)
    upload = None
    if defense is not None:
        fl_cfg = baseline_config(fl_cfg)
        upload = upload_transform(defense, seed)
    server, devices = init_federation(fl_cfg, cfg.architecture.build(), split.train.dim,
                                      split.train.attribute_arity)
    return run_training(server, devices, shards, fl_cfg, upload=upload, on_round=on_round)


def run_cell(cfg: ExperimentConfig, lam: float, seed: int, split: Optional[DataSplit] = None,
             shards: Optional[Sequence[DeviceShard]] = None, defense: Optional[DefenseConfig] = None,
             cell_dir: Optional[Path] = None) -> CellResult:
    """Train one (lambda, seed) cell, optionally under a defense, and evaluate its global extractor."""
    split = load_split(cfg, seed) if split is None else split
    shards = device_shards(cfg, split, seed) if shards is None else shards
    on_round = None
    every = cfg.output.checkpoint_every
    if cell_dir is not None and every > 0:
        def on_round(record, server):
            if (record.round + 1) % every == 0 or record.round + 1 == cfg.federation.rounds:
                checkpoint.save(cell_dir / f"theta_round{record.round + 1:04d}.txt", server.global_theta.params())
    server, devices, records = train_cell(cfg, lam, seed, split, shards, defense, on_round)
    lam_used = 0.0 if defense is not None else lam
    report = evaluate_extractor(server.global_theta, split, seed, cfg.evaluation.settings(),
                                cfg.evaluation.adversary, devices, lam=lam_used, dataset=cfg.dataset.name)
    return CellResult(report, records, server, devices)


def run_baseline(cfg: ExperimentConfig, defense: DefenseConfig, seed: int, split: Optional[DataSplit] = None,
                 shards: Optional[Sequence[DeviceShard]] = None, cell_dir: Optional[Path] = None) -> CellResult:
    """Privacy objective off (lambda = 0), every upload passed through ``defense``."""
    return run_cell(cfg, 0.0, seed, split, shards, defense, cell_dir)


def cell_name(lam: float, seed: int, defense: Optional[DefenseConfig] = None) -> str:
    if defense is not None and defense.kind != "none":
        return f"{defense.kind}_{format_float(defense.hyperparam)}_seed{seed}"
    return f"lambda{format_float(lam)}_seed{seed}"


def write_manifest(out: Path, cfg: ExperimentConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "config.ini", to_ini(cfg))
    seeds = ",".join(str(s) for s in cfg.sweep.seeds)
    atomic_write_text(out / "manifest.txt", f"config_sha256 = {config_hash(cfg)}\nseeds = {seeds}\n")


def run_theory(cfg: ExperimentConfig, out: Path) -> list[theory.TheoryReport]:
    reports = theory.run_suite(cfg.theory.instances, cfg.sweep.seeds[0], cfg.theory.max_bins)
    write_csv(out / "theory.csv", [theory.report_row(r) for r in reports], theory.THEORY_COLUMNS)
    return reports


def run_experiment(cfg: ExperimentConfig, log: Callable[[str], None] = lambda s: None) -> list[EvalReport]:
    """Every (lambda, seed) cell, or every seed under the configured defense.

    Writes ``config.ini``, ``manifest.txt``, per-cell ``rounds.csv`` and the
    sweep table ``sweep.csv`` (plus ``defense.csv`` under a defense and
    ``theory.csv`` if enabled) into the output directory.
    """
    validate(cfg)
    out = Path(cfg.output.dir)
    write_manifest(out, cfg)
    defense = cfg.defense if cfg.defense.kind != "none" else None
    lambdas = (0.0,) if defense is not None else cfg.sweep.lambdas
    reports, matched = [], []
    for seed in cfg.sweep.seeds:
        split = load_split(cfg, seed)
        shards = device_shards(cfg, split, seed)
        for lam in lambdas:
            cell_dir = out / "cells" / cell_name(lam, seed, defense)
            cell_dir.mkdir(parents=True, exist_ok=True)
            result = run_cell(cfg, lam, seed, split, shards, defense, cell_dir)
            write_csv(cell_dir / "rounds.csv", round_rows(result.records), ROUND_COLUMNS)
            reports.append(result.report)
            if defense is not None:
                matched.append((defense, result.report))
            r = result.report
            log(f"seed={seed} lambda={format_float(lam)} test_acc={r.test_acc:.4f} infer_acc={r.infer_acc:.4f} "
                f"gap={r.gap:.4f}")
    write_csv(out / "sweep.csv", sweep_rows(reports), SWEEP_COLUMNS)
    if defense is not None:
        write_csv(out / "defense.csv", matched_leakage_rows(matched), MATCHED_COLUMNS)
    if cfg.theory.enabled:
        run_theory(cfg, out)
    return reports


def write_dataset(cfg: ExperimentConfig, seed: int, out: Path) -> DataSplit:
    """Materialize the configured dataset's train and test splits as CSV plus metadata."""
    split = load_split(cfg, seed)
    out.mkdir(parents=True, exist_ok=True)
    split.train.to_csv(out / "train.csv")
    split.test.to_csv(out / "test.csv")
    write_meta(out / "meta.txt", split.train)
    return split


def sweep_table(reports: Sequence[EvalReport]) -> str:
    return csv_text(sweep_rows(reports), SWEEP_COLUMNS)


def summary_medians(reports: Sequence[EvalReport]) -> dict[float, dict[str, float]]:
    """Per-lambda medians over seeds."""
    by_lam: dict[float, list[EvalReport]] = {}
    for r in reports:
        by_lam.setdefault(r.lam, []).append(r)
    return {lam: {"test_acc": float(np.median([r.test_acc for r in rs])),
                  "infer_acc": float(np.median([r.infer_acc for r in rs])),
                  "gap": float(np.median([r.gap for r in rs]))}
            for lam, rs in sorted(by_lam.items())}
