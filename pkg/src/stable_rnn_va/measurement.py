"""Control schedules, the silent-input noise protocol and loss/energy metrics."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .cells import Model, run_sequence
from .numerics import SeededRng
from .training import TrainSample, evaluate_mae

SCENARIOS = ("smooth", "random")


class InstabilityError(RuntimeError):
    """The model produced a non-finite output."""

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


# ---------------------------------------------------------------------- schedules


def lowpass_coefficient(cutoff: float, sr: float) -> float:
    return math.exp(-2.0 * math.pi * cutoff / sr)


def one_pole_lowpass(u: np.ndarray, cutoff: float, sr: float) -> np.ndarray:
    """``y[t] = a*y[t-1] + (1-a)*u[t]`` along the first axis, zero initial state."""
    a = lowpass_coefficient(cutoff, sr)
    y = np.empty_like(u, dtype=np.float64)
    acc = np.zeros(u.shape[1:])
    for t in range(len(u)):
        acc = a * acc + (1.0 - a) * u[t]
        y[t] = acc
    return y


def _ramps(length: int) -> np.ndarray:
    # three equal-duration linear ramps through 0 -> 1 -> -1 -> 0
    pos = np.linspace(0.0, 3.0, length) if length > 1 else np.zeros(1)
    return np.interp(pos, [0.0, 1.0, 2.0, 3.0], [0.0, 1.0, -1.0, 0.0])


def smooth_schedule(length: int, p: int, sr: float = 48000, cutoff: float = 10.0) -> np.ndarray:
    """(length, p) trajectory shared by all controls: ramps, then a one-pole lowpass."""
    if length < 1:
        raise ValueError("schedule length must be >= 1")
    y = one_pole_lowpass(_ramps(length), cutoff, sr)
    return np.repeat(y[:, None], p, axis=1)


def random_schedule(length: int, p: int, seed: int = 0) -> np.ndarray:
    """(length, p) i.i.d. uniform(-1, 1) values, unsmoothed."""
    if length < 1:
        raise ValueError("schedule length must be >= 1")
    return SeededRng(seed).uniform(-1.0, 1.0, (length, p))


def constant_schedule(length: int, p: int, value: float = 0.0) -> np.ndarray:
    if length < 1:
        raise ValueError("schedule length must be >= 1")
    return np.full((length, p), float(value))


@dataclass(frozen=True)
class ConditioningSchedule:
    kind: str  # "smooth", "random" or "constant"
    length: int
    n_controls: int
    seed: int = 0
    cutoff: float = 10.0
    value: float = 0.0
    sample_rate: int = 48000

    def generate(self) -> np.ndarray:
        if self.kind == "smooth":
            return smooth_schedule(self.length, self.n_controls, self.sample_rate, self.cutoff)
        if self.kind == "random":
            return random_schedule(self.length, self.n_controls, self.seed)
        if self.kind == "constant":
            return constant_schedule(self.length, self.n_controls, self.value)
        raise ValueError(f"unknown schedule kind {self.kind!r}")


# ---------------------------------------------------------------------- noise protocol


@dataclass(frozen=True)
class NoiseProtocolConfig:
    sample_rate: int = 48000
    init_seconds: float = 0.2
    settle_seconds: float = 1.0
    measure_seconds: float = 1.0
    init_amplitude: float = 1.0
    init_control: float = 0.0
    smooth_cutoff: float = 10.0

    def __post_init__(self) -> None:
        if min(self.init_seconds, self.settle_seconds, self.measure_seconds) <= 0:
            raise ValueError("protocol durations must be positive")
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")

    def samples(self, seconds: float) -> int:
        return max(1, int(round(seconds * self.sample_rate)))

    def to_dict(self) -> dict:
        return {
            "sample_rate": self.sample_rate,
            "init_seconds": self.init_seconds,
            "settle_seconds": self.settle_seconds,
            "measure_seconds": self.measure_seconds,
            "init_amplitude": self.init_amplitude,
            "init_control": self.init_control,
            "smooth_cutoff": self.smooth_cutoff,
        }


def variance_dbfs(y: np.ndarray) -> float:
    """``10*log10(var(y))``; exactly -inf when every sample is identical."""
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise ValueError("cannot measure an empty signal")
    if np.all(y == y.flat[0]):
        return -math.inf
    var = float(np.var(y))
    return 10.0 * math.log10(var) if var > 0 else -math.inf


@dataclass
class EnergyReport:
    scenario: str
    energy_dbfs: float
    output: np.ndarray | None = None
    controls: np.ndarray | None = None
    sample_rate: int = 48000

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "energy_dbfs": self.energy_dbfs}


def _checked(y: np.ndarray, offset: int, phase: str) -> None:
    bad = np.flatnonzero(~np.isfinite(y))
    if bad.size:
        idx = offset + int(bad[0])
        raise InstabilityError(f"non-finite model output at sample {idx} ({phase} phase)", idx)


def measure_noise(
    model: Model,
    scenario: str,
    protocol: NoiseProtocolConfig = NoiseProtocolConfig(),
    seed: int = 0,
    keep_trace: bool = False,
) -> EnergyReport:
    """White-noise init, silent settle with controls held, then silent input while
    the controls follow ``scenario``; the energy is the variance of the last phase."""
    if scenario not in SCENARIOS:
        raise ValueError(f"scenario must be one of {SCENARIOS}, got {scenario!r}")
    rng = SeededRng(seed)
    p = model.params.n_controls
    n_init = protocol.samples(protocol.init_seconds)
    n_settle = protocol.samples(protocol.settle_seconds)
    n_meas = protocol.samples(protocol.measure_seconds)

    noise = rng.spawn(0).uniform(-protocol.init_amplitude, protocol.init_amplitude, n_init)
    hold = np.full(p, protocol.init_control)
    state = model.zero_state()
    y, state = run_sequence(model, state, noise, hold)
    _checked(y, 0, "init")
    y, state = run_sequence(model, state, np.zeros(n_settle), hold)
    _checked(y, n_init, "settle")
    if scenario == "smooth":
        sched = smooth_schedule(n_meas, p, protocol.sample_rate, protocol.smooth_cutoff)
    else:
        sched = random_schedule(n_meas, p, int(rng.spawn(1).generator.integers(2**63)))
    y, state = run_sequence(model, state, np.zeros(n_meas), sched)
    _checked(y, n_init + n_settle, "measurement")
    return EnergyReport(
        scenario,
        variance_dbfs(y),
        y if keep_trace else None,
        sched if keep_trace else None,
        protocol.sample_rate,
    )


# ---------------------------------------------------------------------- losses


def mae_db(value: float) -> float:
    """Amplitude convention: ``20*log10(MAE)``."""
    if value < 0 or not math.isfinite(value):
        raise ValueError("MAE must be finite and non-negative")
    return 20.0 * math.log10(value) if value > 0 else -math.inf


def evaluate_mae_db(model: Model, dataset: Sequence[TrainSample]) -> float:
    if len(dataset) == 0:
        raise ValueError("empty evaluation dataset")
    return mae_db(evaluate_mae(model, dataset))


@dataclass(frozen=True)
class RunAggregate:
    n: int
    mean: float  # linear
    ci_low: float  # linear interval bounds
    ci_high: float
    confidence: float = 0.95

    @property
    def mean_db(self) -> float:
        return mae_db(self.mean)

    @property
    def low_offset_db(self) -> float:
        # a linear bound at or below zero sits at -inf on the dB scale
        if self.ci_low <= 0:
            return -math.inf
        return mae_db(self.ci_low) - self.mean_db if self.ci_low != self.mean else 0.0

    @property
    def high_offset_db(self) -> float:
        return mae_db(self.ci_high) - self.mean_db if self.ci_high != self.mean else 0.0

    def format(self) -> str:
        return f"{self.mean_db:.2f} ({self.low_offset_db:+.2f}, {self.high_offset_db:+.2f})"

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "confidence": self.confidence,
            "mean": self.mean,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "mean_db": self.mean_db,
            "low_offset_db": self.low_offset_db,
            "high_offset_db": self.high_offset_db,
            "formatted": self.format(),
        }


def aggregate_runs(losses: Sequence[float], confidence: float = 0.95) -> RunAggregate:
    """Mean and two-sided Student-t interval on linear losses.

    The linear bounds are reported unclipped. A lower bound at or below zero
    (few runs, wide spread) shows up as a ``-inf`` dB offset.
    """
    x = np.asarray(losses, dtype=np.float64)
    n = x.size
    if n < 2:
        raise ValueError("need at least two runs")
    if not 0 < confidence < 1:
        raise ValueError("confidence must lie in (0, 1)")
    if np.any(x <= 0) or not np.all(np.isfinite(x)):
        raise ValueError("losses must be positive and finite")
    mean = float(np.mean(x))
    if np.all(x == x[0]):
        return RunAggregate(n, float(x[0]), float(x[0]), float(x[0]), confidence)
    half = float(stats.t.ppf(0.5 + confidence / 2.0, n - 1) * np.std(x, ddof=1) / math.sqrt(n))
    return RunAggregate(n, mean, mean - half, mean + half, confidence)


# ---------------------------------------------------------------------- export


def _g17(v: float) -> str:
    return "%.17g" % v


def trace_csv(report: EnergyReport) -> str:
    if report.output is None or report.controls is None:
        raise ValueError("report carries no trace; measure with keep_trace=True")
    y = report.output
    ctl = report.controls
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time_s"] + [f"control_{k}" for k in range(ctl.shape[1])] + ["output", "output_dbfs"])
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(np.abs(y))
    for t in range(len(y)):
        row = [_g17(t / report.sample_rate)] + [_g17(v) for v in ctl[t]] + [_g17(y[t])]
        row.append("" if np.isneginf(db[t]) else _g17(db[t]))
        w.writerow(row)
    return buf.getvalue()


def export_trace(report: EnergyReport, path: str | os.PathLike) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(trace_csv(report))
    os.replace(tmp, path)
