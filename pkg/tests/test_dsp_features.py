"""
Tests for the MFCC front-end and WAV I/O.
"""

from pathlib import Path

import numpy as np
import pytest

from src.dsp_features import (
    DEFAULT_MFCC,
    MfccConfig,
    Waveform,
    fit_time,
    frame_and_window,
    hz_to_mel,
    log_mel_energies,
    mel_center_frequencies,
    mel_energies,
    mel_filterbank,
    mel_to_hz,
    mfcc,
    read_wav,
    write_features_csv,
    write_wav,
)
from src.error_handler import ArtifactIOError, InsufficientAudioError
from src.tensor import DType

RAW = MfccConfig(cmvn=False)


def tone(freq: float, seconds: float, amplitude: float = 0.5) -> Waveform:
    t = np.arange(int(seconds * 16000)) / 16000
    return Waveform(amplitude * np.sin(2 * np.pi * freq * t))


def brute_force_mfcc(samples: np.ndarray) -> np.ndarray:
    """Straight-line DFT, triangular mel bank and DCT-II without library transforms."""
    x = samples.astype(np.float64)
    window, hop, n_fft, n_mels, n_ceps = 400, 160, 512, 26, 20
    n_frames = (len(x) - window) // hop + 1
    n = np.arange(window)
    hamming = 0.54 - 0.46 * np.cos(2 * np.pi * n / (window - 1))
    k = np.arange(n_fft // 2 + 1)
    basis = np.exp(-2j * np.pi * np.outer(k, n) / n_fft)

    mel_max = 2595.0 * np.log10(1.0 + 8000.0 / 700.0)
    edges_hz = [700.0 * (10 ** (mel_max * i / (n_mels + 1) / 2595.0) - 1.0) for i in range(n_mels + 2)]
    edges = [min(int(np.floor((n_fft + 1) * f / 16000)), n_fft // 2) for f in edges_hz]
    bank = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        for j in range(lo, mid):
            bank[m, j] = (j - lo) / (mid - lo)
        for j in range(mid, hi):
            bank[m, j] = (hi - j) / (hi - mid)
        bank[m, mid] = 1.0

    out = np.zeros((n_frames, n_ceps))
    for t in range(n_frames):
        frame = x[t * hop : t * hop + window] * hamming
        power = np.abs(basis @ frame) ** 2 / n_fft
        logmel = np.log(np.maximum(bank @ power, 1e-10))
        for c in range(n_ceps):
            scale = np.sqrt(1.0 / n_mels) if c == 0 else np.sqrt(2.0 / n_mels)
            out[t, c] = scale * sum(
                logmel[m] * np.cos(np.pi * c * (2 * m + 1) / (2 * n_mels)) for m in range(n_mels)
            )
    return out


class TestFraming:
    """Frame counts and windowing."""

    def test_six_seconds_gives_598_frames(self) -> None:
        frames = frame_and_window(Waveform(np.zeros(96000)))
        assert frames.shape == (598, 400)

    def test_single_window(self) -> None:
        assert frame_and_window(Waveform(np.zeros(400))).shape[0] == 1

    def test_too_short(self) -> None:
        with pytest.raises(InsufficientAudioError):
            frame_and_window(Waveform(np.zeros(399)))

    @pytest.mark.parametrize("n_samples", [400, 559, 560, 1234, 16000])
    def test_frame_count_formula(self, n_samples: int) -> None:
        assert frame_and_window(Waveform(np.zeros(n_samples))).shape[0] == (n_samples - 400) // 160 + 1

    def test_constant_signal_frames_identical(self) -> None:
        frames = frame_and_window(Waveform(np.full(2000, 0.25)))
        np.testing.assert_array_equal(frames, np.broadcast_to(frames[0], frames.shape))


class TestMelFilterbank:
    """Triangular mel filters over the FFT bins."""

    def test_rows_non_negative_and_peak_at_one(self) -> None:
        bank = mel_filterbank()
        assert bank.shape == (26, 257)
        assert bank.min() >= 0.0
        np.testing.assert_array_equal(bank.max(axis=1), 1.0)

    def test_mel_scale_round_trip(self) -> None:
        hz = np.array([0.0, 440.0, 1000.0, 8000.0])
        np.testing.assert_allclose(mel_to_hz(hz_to_mel(hz)), hz, atol=1e-9)

    def test_tone_energy_peaks_in_bracketing_filter(self) -> None:
        energies = mel_energies(tone(1000.0, 1.0), RAW).mean(axis=0)
        centers = mel_center_frequencies()
        upper = int(np.searchsorted(centers, 1000.0))
        assert int(np.argmax(energies)) in (upper - 1, upper)


class TestMfcc:
    """Cepstra, normalization and the brute-force oracle."""

    def test_default_shape_and_dtype(self, rng: np.random.Generator) -> None:
        out = mfcc(Waveform(rng.uniform(-0.5, 0.5, 96000)))
        assert out.frames.shape == (598, 20)
        assert out.frames.dtype == np.float32
        assert out.frame_shift_ms == 10.0
        assert out.window_ms == 25.0

    def test_matches_brute_force_oracle(self, rng: np.random.Generator) -> None:
        samples = Waveform(rng.uniform(-0.8, 0.8, 2400)).samples
        fast = mfcc(Waveform(samples), RAW, DType.F64).frames
        np.testing.assert_allclose(fast, brute_force_mfcc(samples), atol=1e-8, rtol=0)

    def test_silence_has_flat_cepstrum(self) -> None:
        out = mfcc(Waveform(np.zeros(4000)), RAW, DType.F64).frames
        np.testing.assert_allclose(out[:, 1:], 0.0, atol=1e-9)
        assert out[0, 0] == pytest.approx(np.sqrt(26) * np.log(1e-10))

    def test_scaling_shifts_log_energies(self, rng: np.random.Generator) -> None:
        w = Waveform(rng.uniform(-0.3, 0.3, 3200))
        doubled = Waveform(w.samples * 2.0)
        shift = log_mel_energies(doubled, RAW) - log_mel_energies(w, RAW)
        np.testing.assert_allclose(shift, 2 * np.log(2.0), atol=1e-9)

    def test_cmvn_normalizes_columns(self, rng: np.random.Generator) -> None:
        out = mfcc(Waveform(rng.uniform(-0.5, 0.5, 16000)), DEFAULT_MFCC, DType.F64).frames
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.std(axis=0), 1.0, atol=1e-9)

    def test_fit_time_crops_center_and_pads(self) -> None:
        features = np.arange(10, dtype=float).reshape(5, 2)
        np.testing.assert_array_equal(fit_time(features, 3), features[1:4])
        padded = fit_time(features, 7)
        assert padded.shape == (7, 2)
        np.testing.assert_array_equal(padded[5:], 0.0)


class TestWavIO:
    """16-bit PCM read and write."""

    def test_round_trip_within_one_step(self, tmp_path: Path, rng: np.random.Generator) -> None:
        w = Waveform(rng.uniform(-0.9, 0.9, 1600))
        path = tmp_path / "a" / "clip.wav"
        write_wav(path, w)
        back = read_wav(path)
        assert back.sample_rate == 16000
        assert len(back) == 1600
        np.testing.assert_allclose(back.samples, w.samples, atol=2.0 / 32767)

    def test_missing_file(self, tmp_path: Path) -> None:
        with pytest.raises(ArtifactIOError):
            read_wav(tmp_path / "nope.wav")

    def test_features_csv_header(self, tmp_path: Path) -> None:
        path = tmp_path / "f.csv"
        write_features_csv(path, np.array([[0.5, 1.0], [2.0, -1.0]]))
        lines = path.read_text().splitlines()
        assert lines[0] == "c0,c1"
        assert lines[1] == "0.5,1.0"
