"""``stable-rnn-va`` command line: synth-data, train, eval, measure, verify.

Exit codes: 0 success, 1 runtime failure (divergence, instability),
2 usage or validation error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .cells import GateMode, GruParams, LstmParams, Model, ModelConfig, OutputLayer
from .constraints import FREE_KEYS, Parametrization, StabilityMargin, verify_model
from .datasets import (
    DatasetError,
    DatasetManifest,
    NormalizationStats,
    SyntheticDatasetConfig,
    WavError,
    generate_synthetic_dataset,
    load_and_normalize,
    summarize,
)
from .measurement import (
    SCENARIOS,
    InstabilityError,
    NoiseProtocolConfig,
    aggregate_runs,
    evaluate_mae_db,
    export_trace,
    measure_noise,
)
from .numerics import SeededRng
from .training import AdamState, DivergedError, EpochRecord, TrainConfig, TrainResult, evaluate_mae, train

log = logging.getLogger("stable_rnn_va")

CHECKPOINT_FORMAT = "stable-rnn-va-checkpoint"
CHECKPOINT_VERSION = 1
NEG_INF = "-inf"


class UsageError(ValueError):
    """Invalid configuration, arguments or input files (exit code 2)."""


# ---------------------------------------------------------------------- config


@dataclass(frozen=True)
class ModelSection:
    cell: str = "gru"
    hidden: int = 16
    stable: bool = False
    skip_gain: float = 1.0


@dataclass(frozen=True)
class TrainSection:
    learning_rate: float = 3e-4
    weight_decay: float = 0.0
    batch_size: int = 32
    tbptt: int = 1024
    epochs: int = 10
    max_steps: int | None = None


@dataclass(frozen=True)
class DataSection:
    dir: str = "data"
    train_manifest: str | None = None
    eval_manifest: str | None = None

    def manifests(self) -> tuple[Path, Path]:
        root = Path(self.dir)
        return (
            Path(self.train_manifest) if self.train_manifest else root / "train.json",
            Path(self.eval_manifest) if self.eval_manifest else root / "eval.json",
        )


@dataclass(frozen=True)
class SyntheticSection:
    n_train: int = 64
    n_eval: int = 16
    seconds: float = 1.0
    silence: float = 0.0


@dataclass(frozen=True)
class MarginSection:
    spectral: float = 1e-3
    gate: float = 1e-3


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    margin: MarginSection = field(default_factory=MarginSection)
    measure: dict = field(default_factory=lambda: NoiseProtocolConfig().to_dict())
    out: str = "runs"
    seed: int = 0
    runs: int = 1

    def __post_init__(self) -> None:
        # construct every derived object once so bad values fail before any work
        self.model_config(2)
        self.train_config(self.seed)
        self.stability_margin()
        self.protocol()
        SyntheticDatasetConfig(**dataclasses.asdict(self.synthetic), seed=self.seed)
        if self.runs < 1:
            raise UsageError("runs must be >= 1")
        if not 0 <= self.seed < 2**63:
            raise UsageError("seed must be a non-negative 63-bit integer")

    def stability_margin(self) -> StabilityMargin:
        return StabilityMargin(self.margin.spectral, self.margin.gate)

    def model_config(self, n_controls: int) -> ModelConfig:
        m = self.model
        mode = GateMode.coupled_stable(self.margin.gate) if (m.stable and m.cell == "lstm") else GateMode.standard()
        return ModelConfig(m.cell, m.hidden, n_controls, m.stable, mode, 48000, m.skip_gain)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(**dataclasses.asdict(self.train), seed=seed)

    def protocol(self) -> NoiseProtocolConfig:
        return NoiseProtocolConfig(**self.measure)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        if not isinstance(d, dict):
            raise UsageError("config must be a JSON object")
        sections = {
            "model": ModelSection,
            "train": TrainSection,
            "data": DataSection,
            "synthetic": SyntheticSection,
            "margin": MarginSection,
        }
        _reject_unknown(d, {f.name for f in dataclasses.fields(cls)}, "config")
        kw: dict[str, Any] = {}
        for key, value in d.items():
            if key in sections:
                if not isinstance(value, dict):
                    raise UsageError(f"config section {key!r} must be an object")
                sec = sections[key]
                _reject_unknown(value, {f.name for f in dataclasses.fields(sec)}, key)
                kw[key] = sec(**value)
            elif key == "measure":
                if not isinstance(value, dict):
                    raise UsageError("config section 'measure' must be an object")
                _reject_unknown(value, set(NoiseProtocolConfig().to_dict()), key)
                kw[key] = {**NoiseProtocolConfig().to_dict(), **value}
            else:
                kw[key] = value
        try:
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid config: {exc}") from exc

    def override(self, **changes) -> ExperimentConfig:
        d = self.to_dict()
        for path, value in changes.items():
            if value is None:
                continue
            node = d
            *parents, leaf = path.split(".")
            for p in parents:
                node = node[p]
            node[leaf] = value
        return ExperimentConfig.from_dict(d)


def _reject_unknown(d: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise UsageError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        d = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(d)


# ---------------------------------------------------------------------- JSON helpers


def _encode(obj):
    """Replace non-finite floats by string sentinels so the output is strict JSON."""
    if isinstance(obj, float):
        if math.isnan(obj):
            return "nan"
        if math.isinf(obj):
            return NEG_INF if obj < 0 else "inf"
        return obj
    if isinstance(obj, dict):
        return {k: _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _encode(obj.tolist())
    if isinstance(obj, np.generic):
        return _encode(obj.item())
    return obj


def _decode_float(v) -> float:
    if v == NEG_INF:
        return -math.inf
    if v == "inf":
        return math.inf
    return float(v)


def dumps(obj) -> str:
    return json.dumps(_encode(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------- checkpoints


class CheckpointError(UsageError):
    pass


@dataclass
class Checkpoint:
    experiment: ExperimentConfig
    model_config: ModelConfig
    free: dict[str, np.ndarray]
    model: Model
    optimizer: AdamState
    normalization: NormalizationStats
    rng_state: dict
    pi_vector: np.ndarray | None
    best_eval_mae: float
    epoch: int
    kind: str = "best"

    def to_dict(self) -> dict:
        exp = self.experiment.to_dict()
        exp.pop("out")  # the output location is not part of the experiment
        p = self.model.params
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "kind": self.kind,
            "experiment": exp,
            "model_config": self.model_config.to_dict(),
            "free": {k: np.asarray(self.free[k]).tolist() for k in FREE_KEYS},
            "materialized": {
                "recurrent": p.recurrent.tolist(),
                "input": p.input.tolist(),
                "control": p.control.tolist(),
                "bias": p.bias.tolist(),
                "w_out": self.model.output.w_out.tolist(),
                "b_out": self.model.output.b_out,
                "skip_gain": self.model.output.skip_gain,
                "gate_mode": self.model.mode.to_dict(),
            },
            "optimizer": self.optimizer.to_dict(),
            "normalization": {"max_abs": self.normalization.max_abs},
            "rng_state": self.rng_state,
            "pi_vector": None if self.pi_vector is None else self.pi_vector.tolist(),
            "best_eval_mae": self.best_eval_mae,
            "epoch": self.epoch,
        }

    def dumps(self) -> str:
        return dumps(self.to_dict())

    def save(self, path: str | os.PathLike) -> None:
        write_atomic(Path(path), self.dumps())

    @classmethod
    def from_dict(cls, d: dict) -> Checkpoint:
        if not isinstance(d, dict) or d.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError("not a stable-rnn-va checkpoint")
        if d.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {d.get('version')!r} is not supported (expected {CHECKPOINT_VERSION})"
            )
        try:
            exp = ExperimentConfig.from_dict({**d["experiment"], "out": "."})
            mcfg = ModelConfig.from_dict(d["model_config"])
            m = d["materialized"]
            cls_p = GruParams if mcfg.cell == "gru" else LstmParams
            params = cls_p(*(np.asarray(m[k], dtype=np.float64) for k in ("recurrent", "input", "control", "bias")))
            model = Model(
                params,
                OutputLayer(np.asarray(m["w_out"], dtype=np.float64), m["b_out"], m["skip_gain"]),
                GateMode.from_dict(m["gate_mode"]),
            )
            free = {k: np.asarray(d["free"][k], dtype=np.float64) for k in FREE_KEYS}
            pi = d["pi_vector"]
            return cls(
                exp,
                mcfg,
                free,
                model,
                AdamState.from_dict(d["optimizer"]),
                NormalizationStats(float(d["normalization"]["max_abs"])),
                d["rng_state"],
                None if pi is None else np.asarray(pi, dtype=np.float64),
                _decode_float(d["best_eval_mae"]),
                int(d["epoch"]),
                d["kind"],
            )
        except CheckpointError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"malformed checkpoint: {exc}") from exc

    @classmethod
    def load(cls, path: str | os.PathLike) -> Checkpoint:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"checkpoint {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    @property
    def parametrization(self) -> Parametrization:
        margin = self.experiment.stability_margin()
        return Parametrization(self.model_config, self.free, margin, pi_vector=self.pi_vector)


def _checkpoint(
    result: TrainResult, exp: ExperimentConfig, stats: NormalizationStats, best: bool, epoch: int
) -> Checkpoint:
    if best:
        par = result.best_parametrization()
        free, pi = result.best_free, result.best_pi_vector
    else:
        par = result.parametrization
        free, pi = par.free, par.pi_vector
    pi_before = None if pi is None else pi.copy()
    model = Parametrization(par.config, free, par.margin, par.pi_iters, par.pi_tol, pi_before).materialize()
    return Checkpoint(
        exp,
        par.config,
        {k: a.copy() for k, a in free.items()},
        model,
        result.optimizer,
        stats,
        result.rng.get_state(),
        pi_before,
        result.best_eval_mae,
        result.best_epoch if best else epoch,
        "best" if best else "final",
    )


# ---------------------------------------------------------------------- reports


HISTORY_COLUMNS = ("epoch", "steps", "train_mae", "eval_mae", "eval_mae_db", "constraints")


def history_csv(history: list[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for r in history:
        db = r.eval_mae_db
        w.writerow([r.epoch, r.steps, "%.17g" % r.train_mae, "%.17g" % r.eval_mae,
                    NEG_INF if db == -math.inf else "%.17g" % db, r.constraints])
    return buf.getvalue()


def _load_split(path: Path, stats: NormalizationStats | None = None):
    try:
        manifest = DatasetManifest.load(path)
        return load_and_normalize(manifest, stats) + (manifest,)
    except (OSError, WavError) as exc:
        raise UsageError(f"cannot load dataset {path}: {exc}") from exc


# ---------------------------------------------------------------------- commands


def cmd_synth_data(exp: ExperimentConfig, out: Path, force: bool) -> int:
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
    cfg = SyntheticDatasetConfig(**dataclasses.asdict(exp.synthetic), seed=exp.seed)
    train_m, eval_m = generate_synthetic_dataset(cfg, out)
    write_atomic(out / "synth_config.json", dumps({**cfg.to_dict(), "sample_rate": train_m.sample_rate}))
    train_s, stats = load_and_normalize(train_m)
    summary = {
        "train": summarize(train_s),
        "eval": summarize(load_and_normalize(eval_m, stats)[0]),
        "normalization_max_abs": stats.max_abs,
    }
    print(dumps(summary), end="")
    return 0


def _train_one(exp: ExperimentConfig, out: Path, seed: int, train_set, eval_set, stats, n_ctl) -> TrainResult:
    mcfg = exp.model_config(n_ctl)
    tcfg = exp.train_config(seed)
    out.mkdir(parents=True, exist_ok=True)
    write_atomic(out / "config.json", dumps({**exp.to_dict(), "seed": seed}))
    history_path = out / "history.csv"

    def on_epoch(rec: EpochRecord, result: TrainResult) -> None:
        write_atomic(history_path, history_csv(result.history))
        if result.best_epoch == rec.epoch:
            _checkpoint(result, exp_seeded, stats, True, rec.epoch).save(out / "best.ckpt.json")
        print(f"epoch {rec.epoch:4d}  steps {rec.steps:6d}  train {rec.train_mae:.6g}  "
              f"eval {rec.eval_mae:.6g} ({rec.eval_mae_db:.2f} dB)  constraints {rec.constraints}", flush=True)

    exp_seeded = exp.override(seed=seed)
    try:
        result = train(mcfg, train_set, eval_set, tcfg, exp.stability_margin(), on_epoch)
    except DivergedError as exc:
        write_atomic(history_path, history_csv(exc.history))
        raise
    last = result.history[-1].epoch
    _checkpoint(result, exp_seeded, stats, False, last).save(out / "final.ckpt.json")
    return result


def cmd_train(exp: ExperimentConfig, out: Path) -> int:
    train_path, eval_path = exp.data.manifests()
    for p in (train_path, eval_path):
        if not p.exists():
            raise UsageError(f"dataset manifest {p} not found (run synth-data first)")
    train_set, stats, manifest = _load_split(train_path)
    eval_set, _, _ = _load_split(eval_path, stats)
    n_ctl = len(manifest.controls)
    out.mkdir(parents=True, exist_ok=True)
    if exp.runs == 1:
        result = _train_one(exp, out, exp.seed, train_set, eval_set, stats, n_ctl)
        print(f"best eval MAE {result.best_eval_mae:.6g} at epoch {result.best_epoch}")
        return 0
    losses = []
    for i in range(exp.runs):
        seed = exp.seed + i
        print(f"run {i + 1}/{exp.runs} (seed {seed})", flush=True)
        result = _train_one(exp, out / f"run_{i:02d}", seed, train_set, eval_set, stats, n_ctl)
        losses.append(result.best_eval_mae)
    agg = aggregate_runs(losses)
    report = {**agg.to_dict(), "losses": losses, "seeds": [exp.seed + i for i in range(exp.runs)]}
    write_atomic(out / "aggregate.json", dumps(report))
    print(f"eval MAE_dB over {exp.runs} runs: {agg.format()}")
    return 0


def cmd_eval(ckpt_path: str, manifest_path: str | None, out: Path | None) -> int:
    ckpt = Checkpoint.load(ckpt_path)
    path = Path(manifest_path) if manifest_path else ckpt.experiment.data.manifests()[1]
    try:
        manifest = DatasetManifest.load(path)
    except OSError as exc:
        raise UsageError(str(exc)) from exc
    if not manifest.samples:
        raise UsageError(f"manifest {path} lists no samples")
    if len(manifest.controls) != ckpt.model.params.n_controls:
        raise UsageError("manifest control count does not match the model")
    samples, _, _ = _load_split(path, ckpt.normalization)
    mae_value = evaluate_mae(ckpt.model, samples)
    report = {
        "manifest": str(path),
        "n_samples": len(samples),
        "mae": mae_value,
        "mae_db": evaluate_mae_db(ckpt.model, samples),
    }
    text = dumps(report)
    if out is not None:
        write_atomic(out / "eval.json", text)
    print(text, end="")
    return 0


def cmd_measure(ckpt_path: str, scenario: str, trace: bool, out: Path, seed: int | None) -> int:
    ckpt = Checkpoint.load(ckpt_path)
    protocol = ckpt.experiment.protocol()
    seed = ckpt.experiment.seed if seed is None else seed
    scenarios = SCENARIOS if scenario == "both" else (scenario,)
    out.mkdir(parents=True, exist_ok=True)
    energies = {}
    for sc in scenarios:
        rep = measure_noise(ckpt.model, sc, protocol, seed, keep_trace=trace)
        energies[sc] = rep.energy_dbfs
        if trace:
            export_trace(rep, out / f"trace_{sc}.csv")
    report = {
        "cell": ckpt.model_config.cell,
        "stable": ckpt.model_config.stable,
        "seed": seed,
        "protocol": protocol.to_dict(),
        "energy_dbfs": energies,
    }
    text = dumps(report)
    write_atomic(out / "measure.json", text)
    print(text, end="")
    return 0


def cmd_verify(ckpt_path: str, out: Path | None) -> int:
    ckpt = Checkpoint.load(ckpt_path)
    rep = verify_model(ckpt.model, ckpt.experiment.stability_margin())
    stable = ckpt.model_config.stable
    doc = {"stable": stable, "enforced": stable, **rep.to_dict()}
    print(rep.format() if stable else rep.format() + "\n(unconstrained model: values are informational)")
    text = dumps(doc)
    if out is not None:
        write_atomic(out / "verify.json", text)
    print(text, end="")
    return 0 if (rep.passed or not stable) else 1


# ---------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stable-rnn-va", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_default=None):
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--seed", type=int, help="override the experiment seed")
        p.add_argument("--out", default=out_default, help="output directory")

    p = sub.add_parser("synth-data", help="render the synthetic dataset")
    common(p)
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")

    p = sub.add_parser("train", help="train one model (or --runs N models)")
    common(p)
    p.add_argument("--stable", action=argparse.BooleanOptionalAction, default=None,
                   help="enable the stability parametrization")
    p.add_argument("--cell", choices=("gru", "lstm"))
    p.add_argument("--runs", type=int, help="number of independent training runs")
    p.add_argument("--data", help="dataset directory holding train.json and eval.json")

    p = sub.add_parser("eval", help="evaluation MAE of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="dataset manifest (default: the checkpoint's eval split)")

    p = sub.add_parser("measure", help="silent-input noise protocol")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenario", choices=SCENARIOS + ("both",), default="both")
    p.add_argument("--trace", action="store_true", help="also write per-sample trace CSVs")

    p = sub.add_parser("verify", help="check stability constraints of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    return ap


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "config", None) is not None and args.command in ("eval", "measure", "verify"):
        load_config(args.config)  # validated for consistency, the checkpoint carries its own
    if args.command == "synth-data":
        exp = load_config(args.config).override(seed=args.seed)
        return cmd_synth_data(exp, Path(args.out or exp.data.dir), args.force)
    if args.command == "train":
        exp = load_config(args.config).override(
            **{"seed": args.seed, "out": args.out, "model.stable": args.stable,
               "model.cell": args.cell, "runs": args.runs, "data.dir": args.data}
        )
        return cmd_train(exp, Path(exp.out))
    out = Path(args.out) if args.out else None
    if args.command == "eval":
        return cmd_eval(args.checkpoint, args.manifest, out)
    if args.command == "measure":
        return cmd_measure(args.checkpoint, args.scenario, args.trace, out or Path(args.checkpoint).parent, args.seed)
    return cmd_verify(args.checkpoint, out)


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except (UsageError, DatasetError, WavError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DivergedError, InstabilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
