import hashlib
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stable_rnn_va.datasets import (
    DatasetError,
    DatasetManifest,
    ManifestEntry,
    NormalizationStats,
    SyntheticDatasetConfig,
    SyntheticDeviceConfig,
    WavError,
    control_grid,
    generate_synthetic_dataset,
    load_and_normalize,
    load_raw,
    one_pole_coefficient,
    synth_device_render,
    wav_read,
    wav_write,
)
from stable_rnn_va.numerics import SeededRng

from oracles import one_pole_scalar

SR = 48000


class TestWav:
    def test_float_round_trip(self, tmp_path):
        x = np.random.default_rng(0).uniform(-1, 1, 1000).astype(np.float32).astype(np.float64)
        wav_write(tmp_path / "a.wav", x, SR)
        y, sr = wav_read(tmp_path / "a.wav")
        assert sr == SR
        np.testing.assert_array_equal(x, y)

    def test_rewrite_is_byte_identical(self, tmp_path):
        x = np.random.default_rng(1).uniform(-1, 1, 333)
        wav_write(tmp_path / "a.wav", x, 44100)
        y, sr = wav_read(tmp_path / "a.wav")
        wav_write(tmp_path / "b.wav", y, sr)
        assert (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()

    def test_pcm16_scaling(self, tmp_path):
        raw = np.array([-32768, -16384, 0, 1, 32767], dtype="<i2").tobytes()
        fmt = struct.pack("<HHIIHH", 1, 1, SR, SR * 2, 2, 16)
        body = b"WAVEfmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", len(raw)) + raw
        (tmp_path / "p.wav").write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
        y, _ = wav_read(tmp_path / "p.wav")
        np.testing.assert_array_equal(y, np.array([-32768, -16384, 0, 1, 32767]) / 32768.0)
        assert y.min() >= -1.0 and y.max() < 1.0

    @pytest.mark.parametrize("bits", [16, 24])
    def test_pcm_write_read(self, tmp_path, bits):
        full = 2.0 ** (bits - 1)
        x = np.round(np.random.default_rng(2).uniform(-1, 1, 500) * full) / full
        x = np.clip(x, -1, (full - 1) / full)
        wav_write(tmp_path / "p.wav", x, SR, bits=bits)
        y, _ = wav_read(tmp_path / "p.wav")
        np.testing.assert_array_equal(x, y)

    def test_truncated_names_offset(self, tmp_path):
        wav_write(tmp_path / "a.wav", np.zeros(100), SR)
        data = (tmp_path / "a.wav").read_bytes()
        (tmp_path / "t.wav").write_bytes(data[:-10])
        with pytest.raises(WavError) as exc:
            wav_read(tmp_path / "t.wav")
        assert exc.value.offset is not None
        assert f"offset {exc.value.offset}" in str(exc.value)

    def test_truncated_header(self, tmp_path):
        (tmp_path / "t.wav").write_bytes(b"RIFF\x00\x00")
        with pytest.raises(WavError) as exc:
            wav_read(tmp_path / "t.wav")
        assert exc.value.offset == 6

    def test_not_riff(self, tmp_path):
        (tmp_path / "t.wav").write_bytes(b"OggS" + b"\0" * 40)
        with pytest.raises(WavError):
            wav_read(tmp_path / "t.wav")

    def test_stereo_rejected(self, tmp_path):
        fmt = struct.pack("<HHIIHH", 3, 2, SR, SR * 8, 8, 32)
        raw = np.zeros(4, dtype="<f4").tobytes()
        body = b"WAVEfmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", len(raw)) + raw
        (tmp_path / "s.wav").write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
        with pytest.raises(WavError, match="mono"):
            wav_read(tmp_path / "s.wav")

    def test_bad_bits(self, tmp_path):
        with pytest.raises(ValueError):
            wav_write(tmp_path / "x.wav", np.zeros(3), SR, bits=8)


class TestDevice:
    def test_zero_in_zero_out(self):
        y = synth_device_render(np.zeros(1000), [0.7, 0.3])
        np.testing.assert_array_equal(y, 0.0)

    def test_small_signal_linear(self):
        x = 1e-4 * np.random.default_rng(0).uniform(-1, 1, 2000)
        cfg = SyntheticDeviceConfig()
        a = one_pole_coefficient(cfg.cutoff(0.4), SR)
        expect = 0.5 * np.array(one_pole_scalar(x.tolist(), a))
        np.testing.assert_allclose(synth_device_render(x, [0.0, 0.4]), expect, rtol=0, atol=1e-9)

    @pytest.mark.parametrize("tone", [0.0, 0.5, 1.0])
    def test_cutoff_from_impulse_spectrum(self, tone):
        x = np.zeros(1 << 16)
        x[0] = 1e-4
        y = synth_device_render(x, [0.0, tone])
        mag = np.abs(np.fft.rfft(y))
        mag /= mag[0]
        freqs = np.fft.rfftfreq(len(y), 1 / SR)
        f3 = freqs[np.argmax(mag < 10 ** (-3 / 20))]
        fc = 500.0 * 40.0**tone
        assert abs(f3 / fc - 1) < 0.05

    def test_output_bounded(self):
        rng = np.random.default_rng(3)
        for c in ([1.0, 1.0], [1.0, 0.0], [0.5, 0.9]):
            x = rng.choice([-1.0, 1.0], 5000) * rng.uniform(0.5, 3.0, 5000)
            assert np.max(np.abs(synth_device_render(x, c))) <= 0.5

    def test_repeatable(self):
        x = np.random.default_rng(4).normal(size=1000)
        np.testing.assert_array_equal(synth_device_render(x, [0.3, 0.6]), synth_device_render(x, [0.3, 0.6]))

    @pytest.mark.parametrize("bad", [[-0.1, 0.5], [0.5, 1.01], [0.5]])
    def test_controls_validated(self, bad):
        with pytest.raises(ValueError):
            synth_device_render(np.zeros(4), bad)

    def test_rate_validated(self):
        with pytest.raises(ValueError):
            synth_device_render(np.zeros(4), [0.5, 0.5], sr=44100)

    def test_gain_mapping(self):
        cfg = SyntheticDeviceConfig()
        assert cfg.gain(0.0) == 1.0
        assert 20 * np.log10(cfg.gain(1.0)) == pytest.approx(30.0)
        assert cfg.cutoff(0.0) == 500.0 and cfg.cutoff(1.0) == pytest.approx(20000.0)

    def test_coefficient_matches_exponential_at_low_cutoff(self):
        # for cutoffs far below Nyquist the exact solution approaches exp(-2 pi fc / sr)
        a = one_pole_coefficient(100.0, SR)
        assert a == pytest.approx(np.exp(-2 * np.pi * 100.0 / SR), rel=1e-5)


class TestControlGrid:
    def test_corners_first(self):
        g = control_grid(64, SeededRng(0))
        corners = {tuple(r) for r in g[:4]}
        assert corners == {(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)}
        assert np.all((g >= 0) & (g <= 1))

    def test_distinct(self):
        g = control_grid(64, SeededRng(1))
        assert len({tuple(r) for r in g}) == 64

    def test_small(self):
        assert control_grid(1, SeededRng(0)).shape == (1, 2)
        with pytest.raises(ValueError):
            control_grid(0, SeededRng(0))


def tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


SMALL = SyntheticDatasetConfig(n_train=6, n_eval=3, seconds=0.05, seed=11)


class TestGenerate:
    def test_manifests(self, tmp_path):
        tr, ev = generate_synthetic_dataset(SMALL, tmp_path)
        assert len(tr.samples) == 6 and len(ev.samples) == 3
        assert tr.split == "train" and ev.split == "eval"
        d = json.loads((tmp_path / "train.json").read_text())
        assert set(d) == {"sample_rate", "split", "controls", "samples"}
        assert d["controls"] == ["drive", "tone"] and d["sample_rate"] == SR
        assert DatasetManifest.load(tmp_path / "eval.json") == ev

    def test_64_covers_corners(self, tmp_path):
        cfg = SyntheticDatasetConfig(n_train=64, n_eval=1, seconds=0.01)
        tr, _ = generate_synthetic_dataset(cfg, tmp_path)
        ctl = {tuple(e.controls) for e in tr.samples}
        assert len(tr.samples) == 64
        assert {(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)} <= ctl

    def test_byte_identical(self, tmp_path):
        generate_synthetic_dataset(SMALL, tmp_path / "a")
        generate_synthetic_dataset(SMALL, tmp_path / "b")
        assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")

    def test_seed_changes_data(self, tmp_path):
        generate_synthetic_dataset(SMALL, tmp_path / "a")
        other = SyntheticDatasetConfig(n_train=6, n_eval=3, seconds=0.05, seed=12)
        generate_synthetic_dataset(other, tmp_path / "b")
        assert tree_hash(tmp_path / "a") != tree_hash(tmp_path / "b")

    def test_train_eval_audio_disjoint(self, tmp_path):
        tr, ev = generate_synthetic_dataset(SMALL, tmp_path)
        train_inputs = [s.input for s in load_raw(tr)]
        for s in load_raw(ev):
            assert not any(np.array_equal(s.input, t) for t in train_inputs)

    def test_targets_reproduce_from_inputs(self, tmp_path):
        tr, ev = generate_synthetic_dataset(SMALL, tmp_path)
        for m in (tr, ev):
            for s in load_raw(m):
                again = synth_device_render(s.input, s.controls).astype(np.float32).astype(np.float64)
                np.testing.assert_array_equal(again, s.target)

    def test_silence_padding(self, tmp_path):
        cfg = SyntheticDatasetConfig(n_train=1, n_eval=1, seconds=0.05, silence=0.01)
        tr, _ = generate_synthetic_dataset(cfg, tmp_path)
        s = load_raw(tr)[0]
        assert len(s.input) == int(0.07 * SR)
        assert np.all(s.input[:480] == 0) and np.all(s.input[-480:] == 0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SyntheticDatasetConfig(n_train=0)
        with pytest.raises(ValueError):
            SyntheticDatasetConfig(seconds=0)


def write_split(root, name, pairs, split="train"):
    entries = []
    for i, (x, y) in enumerate(pairs):
        wav_write(root / f"{name}_in{i}.wav", x, SR)
        wav_write(root / f"{name}_tg{i}.wav", y, SR)
        entries.append(ManifestEntry(f"{name}_in{i}.wav", f"{name}_tg{i}.wav", [0.5, 0.5]))
    m = DatasetManifest(SR, ["drive", "tone"], entries, split)
    m.save(root / f"{name}.json")
    return DatasetManifest.load(root / f"{name}.json")


class TestNormalize:
    def test_train_peak_two(self, tmp_path):
        m = write_split(tmp_path, "tr", [(np.array([0.5, -2.0, 1.0]), np.array([0.25, 0.5, -1.5]))])
        samples, stats = load_and_normalize(m)
        assert stats.max_abs == 2.0
        np.testing.assert_array_equal(samples[0].input, [0.25, -1.0, 0.5])
        np.testing.assert_array_equal(samples[0].target, [0.125, 0.25, -0.75])

    def test_peak_pooled_over_targets(self, tmp_path):
        m = write_split(tmp_path, "tr", [(np.array([0.5, -1.0]), np.array([0.25, 1.5]))])
        _, stats = load_and_normalize(m)
        assert stats.max_abs == 1.5

    def test_eval_uses_train_stats(self, tmp_path):
        m = write_split(tmp_path, "ev", [(np.array([3.0, -1.0]), np.array([0.5, 0.5]))], "eval")
        samples, stats = load_and_normalize(m, NormalizationStats(2.0))
        assert stats.max_abs == 2.0
        np.testing.assert_array_equal(samples[0].input, [1.5, -0.5])

    def test_silent_rejected(self, tmp_path):
        m = write_split(tmp_path, "tr", [(np.zeros(10), np.zeros(10))])
        with pytest.raises(DatasetError):
            load_and_normalize(m)

    def test_idempotent_within_ulp(self, tmp_path):
        rng = np.random.default_rng(0)
        m = write_split(tmp_path, "tr", [(rng.uniform(-3, 3, 200), rng.uniform(-2, 2, 200)) for _ in range(3)])
        samples, stats = load_and_normalize(m)
        peak = max(max(np.max(np.abs(s.input)), np.max(np.abs(s.target))) for s in samples)
        assert peak == 1.0
        again = NormalizationStats(peak)
        for s in samples:
            np.testing.assert_array_max_ulp(again.apply(s.input), s.input, maxulp=1)
            assert np.all(np.abs(s.input) <= 1) and np.all(np.abs(s.target) <= 1)

    def test_rate_mismatch(self, tmp_path):
        wav_write(tmp_path / "a.wav", np.ones(4), 44100)
        wav_write(tmp_path / "b.wav", np.ones(4), 44100)
        m = DatasetManifest(SR, ["drive", "tone"], [ManifestEntry("a.wav", "b.wav", [0.1, 0.2])], "train", tmp_path)
        with pytest.raises(DatasetError):
            load_and_normalize(m)

    def test_length_mismatch(self, tmp_path):
        m = write_split(tmp_path, "tr", [(np.ones(4), np.ones(5))])
        with pytest.raises(DatasetError):
            load_and_normalize(m)

    def test_manifest_validation(self, tmp_path):
        (tmp_path / "m.json").write_text(json.dumps({"sample_rate": SR, "controls": ["a"], "samples": [], "x": 1}))
        with pytest.raises(DatasetError):
            DatasetManifest.load(tmp_path / "m.json")
        (tmp_path / "m.json").write_text(json.dumps({"sample_rate": 44100, "controls": [], "samples": []}))
        with pytest.raises(DatasetError):
            DatasetManifest.load(tmp_path / "m.json")
        bad = {"sample_rate": SR, "controls": ["a"], "samples": [{"input": "i", "target": "t", "controls": [1, 2]}]}
        (tmp_path / "m.json").write_text(json.dumps(bad))
        with pytest.raises(DatasetError):
            DatasetManifest.load(tmp_path / "m.json")

    @settings(max_examples=30)
    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=50).filter(lambda v: any(v)))
    def test_stats_property(self, values):
        v = np.array(values)
        stats = NormalizationStats(float(np.max(np.abs(v))))
        assert np.all(np.abs(stats.apply(v)) <= 1.0)
