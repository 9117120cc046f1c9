"""Datasets: mono WAV I/O, JSON manifests, max-abs normalization and a
synthetic two-knob distortion device used in place of hardware recordings."""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import lfilter

from .numerics import SeededRng
from .training import TrainSample

SAMPLE_RATE = 48000

# ---------------------------------------------------------------------- WAV


class WavError(ValueError):
    """Malformed or unsupported WAV data; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


_PCM = 1
_FLOAT = 3
_EXTENSIBLE = 0xFFFE


def wav_read(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    """Read a mono WAV file into float64 samples; returns (samples, sample_rate).

    Integer PCM is scaled by 2**(bits-1), so 16-bit data lands in [-1, 1).
    """
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise WavError("file too short for a RIFF header", len(data))
    riff, _, wave = struct.unpack_from("<4sI4s", data, 0)
    if riff != b"RIFF" or wave != b"WAVE":
        raise WavError("not a RIFF/WAVE file", 0)
    pos = 12
    fmt = None
    payload = None
    while pos < len(data):
        if pos + 8 > len(data):
            raise WavError("truncated chunk header", pos)
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = pos + 8
        if body + size > len(data):
            raise WavError(f"chunk {cid!r} declares {size} bytes but the file ends early", body)
        if cid == b"fmt ":
            if size < 16:
                raise WavError("fmt chunk too small", body)
            tag, channels, rate, _, block, bits = struct.unpack_from("<HHIIHH", data, body)
            if tag == _EXTENSIBLE:
                if size < 40:
                    raise WavError("extensible fmt chunk too small", body)
                tag = struct.unpack_from("<H", data, body + 24)[0]
            fmt = (tag, channels, rate, block, bits, body)
        elif cid == b"data":
            payload = (body, size)
        pos = body + size + (size & 1)
    if fmt is None:
        raise WavError("missing fmt chunk", 12)
    if payload is None:
        raise WavError("missing data chunk", 12)
    tag, channels, rate, block, bits, fmt_at = fmt
    if channels != 1:
        raise WavError(f"only mono files are supported, got {channels} channels", fmt_at + 2)
    start, size = payload
    raw = data[start : start + size - size % block]
    if tag == _FLOAT and bits in (32, 64):
        x = np.frombuffer(raw, dtype="<f4" if bits == 32 else "<f8").astype(np.float64)
    elif tag == _PCM and bits == 16:
        x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif tag == _PCM and bits == 24:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        x = v.astype(np.float64) / float(1 << 23)
    elif tag == _PCM and bits == 32:
        x = np.frombuffer(raw, dtype="<i4").astype(np.float64) / float(1 << 31)
    else:
        raise WavError(f"unsupported sample format (tag {tag}, {bits} bits)", fmt_at)
    return x, rate


def wav_write(path: str | os.PathLike, buffer, sr: int = SAMPLE_RATE, bits: int = 32) -> None:
    """Write mono audio as 32-bit float (default) or 16/24-bit PCM."""
    x = np.asarray(buffer, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("only mono (1-D) buffers can be written")
    if bits == 32:
        raw = x.astype("<f4").tobytes()
        fmt = struct.pack("<HHIIHHH", _FLOAT, 1, sr, sr * 4, 4, 32, 0)
        extra = b"fact" + struct.pack("<II", 4, len(x))
    elif bits in (16, 24):
        full = float(1 << (bits - 1))
        q = np.clip(np.round(x * full), -full, full - 1).astype(np.int64)
        if bits == 16:
            raw = q.astype("<i2").tobytes()
        else:
            u = (q & 0xFFFFFF).astype(np.uint32)
            raw = np.stack([u & 0xFF, (u >> 8) & 0xFF, (u >> 16) & 0xFF], axis=1).astype(np.uint8).tobytes()
        width = bits // 8
        fmt = struct.pack("<HHIIHH", _PCM, 1, sr, sr * width, width, bits)
        extra = b""
    else:
        raise ValueError("bits must be 16, 24 or 32")
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + extra
    body += b"data" + struct.pack("<I", len(raw)) + raw + (b"\0" if len(raw) & 1 else b"")
    _atomic_write(Path(path), b"RIFF" + struct.pack("<I", len(body)) + body)


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------- synthetic device


@dataclass(frozen=True)
class SyntheticDeviceConfig:
    """Drive knob: gain 0..+30 dB before tanh. Tone knob: one-pole lowpass
    cutoff swept exponentially from 500 Hz to 20 kHz. Fixed output level."""

    max_gain_db: float = 30.0
    min_cutoff_hz: float = 500.0
    max_cutoff_hz: float = 20000.0
    level: float = 0.5
    control_names: tuple[str, ...] = ("drive", "tone")

    def gain(self, drive: float) -> float:
        return 10.0 ** (drive * self.max_gain_db / 20.0)

    def cutoff(self, tone: float) -> float:
        return self.min_cutoff_hz * (self.max_cutoff_hz / self.min_cutoff_hz) ** tone


def one_pole_coefficient(cutoff_hz: float, sr: float) -> float:
    """Pole of ``y = a*y[-1] + (1-a)*u`` whose -3 dB point is exactly ``cutoff_hz``.

    Solves ``|H(e^jw)|^2 = 1/2`` at the cutoff; valid up to Nyquist, unlike
    ``exp(-2*pi*fc/sr)`` which never reaches -3 dB for cutoffs near sr/2.
    """
    if not 0.0 < cutoff_hz < sr / 2.0:
        raise ValueError("cutoff must lie strictly between 0 and Nyquist")
    beta = 2.0 - math.cos(2.0 * math.pi * cutoff_hz / sr)
    return beta - math.sqrt(beta * beta - 1.0)


def synth_device_render(
    x, controls, sr: int = SAMPLE_RATE, cfg: SyntheticDeviceConfig = SyntheticDeviceConfig()
) -> np.ndarray:
    """``level * lowpass(tanh(gain(drive) * x), cutoff(tone))`` with zero initial filter state."""
    x = np.asarray(x, dtype=np.float64)
    controls = np.asarray(controls, dtype=np.float64)
    if controls.shape != (2,):
        raise ValueError("the synthetic device takes exactly two controls (drive, tone)")
    if np.any(controls < 0.0) or np.any(controls > 1.0):
        raise ValueError(f"controls must lie in [0, 1], got {controls.tolist()}")
    if sr != SAMPLE_RATE:
        raise ValueError(f"the synthetic device runs at {SAMPLE_RATE} Hz")
    a = one_pole_coefficient(cfg.cutoff(controls[1]), sr)
    shaped = np.tanh(cfg.gain(controls[0]) * x)
    return cfg.level * lfilter([1.0 - a], [1.0, -a], shaped)


# ---------------------------------------------------------------------- source audio


def _one_pole(x: np.ndarray, cutoff_hz: float, sr: int) -> np.ndarray:
    a = one_pole_coefficient(cutoff_hz, sr)
    return lfilter([1.0 - a], [1.0, -a], x)


def source_audio(rng: SeededRng, n: int, sr: int = SAMPLE_RATE, silence: float = 0.0) -> np.ndarray:
    """Guitar-like test signal: plucked tone sweeps and band-limited noise bursts.

    ``silence`` seconds of leading and trailing silence are added around ``n``
    samples of material.
    """
    t = np.arange(n) / sr
    out = np.zeros(n)
    n_events = int(rng.generator.integers(3, 9))
    for _ in range(n_events):
        start = rng.uniform(0.0, 0.8) * n / sr
        tau = rng.uniform(0.05, 0.5)
        amp = rng.uniform(0.1, 1.0)
        env = np.where(t >= start, np.exp(-(t - start) / tau), 0.0)
        if rng.uniform() < 0.5:
            f0 = 80.0 * 2.0 ** rng.uniform(0.0, 4.0)
            f1 = f0 * 2.0 ** rng.uniform(-1.0, 1.0)
            dur = n / sr
            # exponential chirp f0 -> f1 over the buffer
            k = math.log(f1 / f0) / dur
            phase = 2 * math.pi * f0 * (np.expm1(k * t) / k if abs(k) > 1e-12 else t)
            sig = np.sin(phase + rng.uniform(0.0, 2 * math.pi))
            sig += 0.3 * np.sin(2.0 * phase)  # one overtone
        else:
            lo = rng.uniform(60.0, 400.0)
            hi = lo * 2.0 ** rng.uniform(1.0, 5.0)
            noise = rng.uniform(-1.0, 1.0, n)
            sig = _one_pole(noise, min(hi, 0.45 * sr), sr) - _one_pole(noise, lo, sr)
            sig /= max(np.max(np.abs(sig)), 1e-12)
        out += amp * env * sig
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= rng.uniform(0.3, 1.0) / peak
    pad = np.zeros(int(round(silence * sr)))
    return np.concatenate([pad, out, pad])


def control_grid(n: int, rng: SeededRng, jitter: float = 0.5) -> np.ndarray:
    """``n`` control pairs from a k x k grid (k = ceil(sqrt(n)), at least 2).

    The four corners come first; interior grid coordinates get uniform jitter
    of up to ``jitter`` half-cells, edge coordinates stay on the edge.
    """
    if n < 1:
        raise ValueError("need at least one control combination")
    k = max(2, math.ceil(math.sqrt(n)))
    axis = np.linspace(0.0, 1.0, k)
    pts = [(i, j) for i in range(k) for j in range(k)]
    corners = [(0, 0), (0, k - 1), (k - 1, 0), (k - 1, k - 1)]
    rest = [pt for pt in pts if pt not in corners]
    order = rng.permutation(len(rest))
    chosen = (corners + [rest[i] for i in order])[:n]
    half = 0.5 / (k - 1)
    out = np.empty((n, 2))
    for row, (i, j) in enumerate(chosen):
        for col, idx in enumerate((i, j)):
            v = axis[idx]
            if 0 < idx < k - 1:
                v += rng.uniform(-jitter, jitter) * half
            out[row, col] = v
    return out


# ---------------------------------------------------------------------- manifests


class DatasetError(ValueError):
    """Invalid manifest or dataset contents."""


@dataclass
class ManifestEntry:
    input: str
    target: str
    controls: list[float]


@dataclass
class DatasetManifest:
    sample_rate: int
    controls: list[str]
    samples: list[ManifestEntry]
    split: str = "train"
    root: Path = field(default=Path("."), compare=False)

    def to_dict(self) -> dict:
        return {
            "sample_rate": self.sample_rate,
            "split": self.split,
            "controls": list(self.controls),
            "samples": [{"input": e.input, "target": e.target, "controls": list(e.controls)} for e in self.samples],
        }

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        _atomic_write(path, text.encode())
        self.root = path.parent

    @classmethod
    def load(cls, path: str | os.PathLike) -> DatasetManifest:
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
        allowed = {"sample_rate", "split", "controls", "samples"}
        if not isinstance(d, dict) or not {"sample_rate", "controls", "samples"} <= set(d) or set(d) - allowed:
            raise DatasetError(f"manifest {path} must have keys sample_rate, controls, samples (optional split)")
        if d["sample_rate"] != SAMPLE_RATE:
            raise DatasetError(f"manifest sample rate must be {SAMPLE_RATE}, got {d['sample_rate']}")
        entries = []
        for i, s in enumerate(d["samples"]):
            if set(s) != {"input", "target", "controls"}:
                raise DatasetError(f"sample {i} must have exactly input, target and controls")
            if len(s["controls"]) != len(d["controls"]):
                raise DatasetError(f"sample {i} has {len(s['controls'])} controls, expected {len(d['controls'])}")
            entries.append(ManifestEntry(s["input"], s["target"], [float(v) for v in s["controls"]]))
        split = d.get("split", "train")
        if split not in ("train", "eval"):
            raise DatasetError(f"split must be 'train' or 'eval', got {split!r}")
        return cls(d["sample_rate"], list(d["controls"]), entries, split, path.parent)


@dataclass(frozen=True)
class NormalizationStats:
    max_abs: float

    def __post_init__(self) -> None:
        if not (self.max_abs > 0 and math.isfinite(self.max_abs)):
            raise DatasetError("normalization peak must be positive and finite (is the dataset silent?)")

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x / self.max_abs


def load_raw(manifest: DatasetManifest) -> list[TrainSample]:
    samples = []
    for e in manifest.samples:
        pair = []
        for rel in (e.input, e.target):
            x, rate = wav_read(manifest.root / rel)
            if rate != manifest.sample_rate:
                raise DatasetError(f"{rel}: sample rate {rate} differs from manifest ({manifest.sample_rate})")
            pair.append(x)
        if len(pair[0]) != len(pair[1]):
            raise DatasetError(f"{e.input} and {e.target} differ in length")
        samples.append(TrainSample(pair[0], pair[1], np.asarray(e.controls, dtype=np.float64)))
    return samples


def load_and_normalize(
    manifest: DatasetManifest, stats: NormalizationStats | None = None
) -> tuple[list[TrainSample], NormalizationStats]:
    """Load a split and divide inputs and targets by one shared peak.

    Without ``stats`` the peak is computed over this split's inputs and targets
    jointly (use for the training split); eval splits reuse the training stats.
    """
    if not manifest.samples:
        raise DatasetError("manifest lists no samples")
    raw = load_raw(manifest)
    if stats is None:
        peak = max(max(np.max(np.abs(s.input)), np.max(np.abs(s.target))) for s in raw)
        stats = NormalizationStats(float(peak))
    return [TrainSample(stats.apply(s.input), stats.apply(s.target), s.controls) for s in raw], stats


# ---------------------------------------------------------------------- generation


@dataclass(frozen=True)
class SyntheticDatasetConfig:
    n_train: int = 64
    n_eval: int = 16
    seconds: float = 1.0
    silence: float = 0.0
    seed: int = 0
    device: SyntheticDeviceConfig = SyntheticDeviceConfig()

    def __post_init__(self) -> None:
        if self.n_train < 1 or self.n_eval < 1:
            raise ValueError("sample counts must be >= 1")
        if not self.seconds > 0 or self.silence < 0:
            raise ValueError("sample length must be positive and silence non-negative")

    def to_dict(self) -> dict:
        return {
            "n_train": self.n_train,
            "n_eval": self.n_eval,
            "seconds": self.seconds,
            "silence": self.silence,
            "seed": self.seed,
        }


def generate_synthetic_dataset(cfg: SyntheticDatasetConfig, out_dir: str | os.PathLike) -> tuple[DatasetManifest, DatasetManifest]:
    """Render train/eval WAV pairs and write ``train.json`` / ``eval.json`` manifests.

    Train and eval audio come from disjoint RNG streams. Inputs are stored as
    float32 and the targets are rendered from the stored (quantized) inputs,
    so re-rendering a loaded input reproduces the stored target exactly.
    """
    out = Path(out_dir)
    rng = SeededRng(cfg.seed)
    n = int(round(cfg.seconds * SAMPLE_RATE))
    manifests = []
    for split, count, key in (("train", cfg.n_train, 0), ("eval", cfg.n_eval, 1)):
        audio_rng = rng.spawn(key)
        ctl_rng = rng.spawn(10 + key)
        (out / split).mkdir(parents=True, exist_ok=True)
        controls = control_grid(count, ctl_rng)
        entries = []
        for i in range(count):
            x = source_audio(audio_rng, n, SAMPLE_RATE, cfg.silence).astype(np.float32).astype(np.float64)
            y = synth_device_render(x, controls[i], SAMPLE_RATE, cfg.device)
            inp = f"{split}/input_{i:04d}.wav"
            tgt = f"{split}/target_{i:04d}.wav"
            wav_write(out / inp, x, SAMPLE_RATE)
            wav_write(out / tgt, y, SAMPLE_RATE)
            entries.append(ManifestEntry(inp, tgt, [float(v) for v in controls[i]]))
        m = DatasetManifest(SAMPLE_RATE, list(cfg.device.control_names), entries, split)
        m.save(out / f"{split}.json")
        manifests.append(m)
    return manifests[0], manifests[1]


def summarize(samples: Sequence[TrainSample]) -> dict:
    lengths = [len(s.input) for s in samples]
    return {
        "n_samples": len(samples),
        "total_seconds": sum(lengths) / SAMPLE_RATE,
        "peak_input": float(max(np.max(np.abs(s.input)) for s in samples)),
        "peak_target": float(max(np.max(np.abs(s.target)) for s in samples)),
    }
