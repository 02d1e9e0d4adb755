"""
MFCC front-end for the baseline classifiers, plus 16-bit PCM WAV I/O.

Pipeline per frame: Hamming window (25 ms / 10 ms at 16 kHz), power
spectrum of a 512-point DFT, 26 triangular mel filters over 0-8000 Hz,
natural log floored at 1e-10, orthonormal DCT-II, coefficients 0..19, then
per-utterance mean/variance normalization of every coefficient.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field
from scipy.fft import dct
from scipy.io import wavfile

from .error_handler import ArtifactIOError, InsufficientAudioError
from .tensor import DType

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class Waveform:
    """Mono samples in [-1, 1] and their sample rate."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(
            self, "samples", np.ascontiguousarray(self.samples, dtype=np.float32).reshape(-1)
        )

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration_seconds(self) -> float:
        return len(self) / self.sample_rate


class MfccConfig(BaseModel):
    """Front-end knobs; defaults give the 20-dim, 25 ms / 10 ms MFCC stream."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    window_ms: float = Field(default=25.0, gt=0)
    shift_ms: float = Field(default=10.0, gt=0)
    n_fft: int = Field(default=512, ge=16)
    n_mels: int = Field(default=26, ge=1)
    n_ceps: int = Field(default=20, ge=1)
    f_min: float = Field(default=0.0, ge=0)
    f_max: float | None = None
    log_floor: float = Field(default=1e-10, gt=0)
    cmvn: bool = True

    def window_samples(self, sample_rate: int) -> int:
        return int(round(self.window_ms * sample_rate / 1000.0))

    def shift_samples(self, sample_rate: int) -> int:
        return int(round(self.shift_ms * sample_rate / 1000.0))


DEFAULT_MFCC = MfccConfig()


@dataclass(frozen=True)
class MfccMatrix:
    """Per-frame cepstra, shape (T, n_ceps)."""

    frames: np.ndarray
    frame_shift_ms: float = 10.0
    window_ms: float = 25.0

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])


def frame_count(n_samples: int, window: int, shift: int) -> int:
    return (n_samples - window) // shift + 1


def frame_and_window(w: Waveform, config: MfccConfig = DEFAULT_MFCC) -> np.ndarray:
    """Hamming-windowed frames, shape (T, window); computed in f64."""
    window = config.window_samples(w.sample_rate)
    shift = config.shift_samples(w.sample_rate)
    if len(w) < window:
        raise InsufficientAudioError(
            f"need at least {window} samples for one frame, got {len(w)}", len(w), window
        )
    n_frames = frame_count(len(w), window, shift)
    frames = sliding_window_view(w.samples.astype(np.float64), window)[::shift][:n_frames]
    return frames * np.hamming(window)


def hz_to_mel(hz: np.ndarray | float) -> np.ndarray:
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel: np.ndarray | float) -> np.ndarray:
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_points_hz(config: MfccConfig, sample_rate: int) -> np.ndarray:
    """The n_mels + 2 band edges in Hz, equally spaced on the mel scale."""
    f_max = config.f_max if config.f_max is not None else sample_rate / 2
    mels = np.linspace(hz_to_mel(config.f_min), hz_to_mel(f_max), config.n_mels + 2)
    return mel_to_hz(mels)


def mel_center_frequencies(
    config: MfccConfig = DEFAULT_MFCC, sample_rate: int = SAMPLE_RATE
) -> np.ndarray:
    return mel_points_hz(config, sample_rate)[1:-1]


def mel_filterbank(
    config: MfccConfig = DEFAULT_MFCC, sample_rate: int = SAMPLE_RATE
) -> np.ndarray:
    """Triangular filters on FFT bins, shape (n_mels, n_fft // 2 + 1); each peaks at 1."""
    n_bins = config.n_fft // 2 + 1
    bins = np.floor((config.n_fft + 1) * mel_points_hz(config, sample_rate) / sample_rate)
    bins = np.minimum(bins.astype(int), n_bins - 1)
    bank = np.zeros((config.n_mels, n_bins))
    for m in range(config.n_mels):
        left, center, right = bins[m], bins[m + 1], bins[m + 2]
        if center > left:
            j = np.arange(left, center)
            bank[m, j] = (j - left) / (center - left)
        if right > center:
            j = np.arange(center, right)
            bank[m, j] = (right - j) / (right - center)
        bank[m, center] = 1.0
    return bank


def power_spectrum(frames: np.ndarray, n_fft: int) -> np.ndarray:
    return np.abs(np.fft.rfft(frames, n=n_fft, axis=-1)) ** 2 / n_fft


def mel_energies(w: Waveform, config: MfccConfig = DEFAULT_MFCC) -> np.ndarray:
    """Filterbank energies before the log, shape (T, n_mels)."""
    frames = frame_and_window(w, config)
    return power_spectrum(frames, config.n_fft) @ mel_filterbank(config, w.sample_rate).T


def log_mel_energies(w: Waveform, config: MfccConfig = DEFAULT_MFCC) -> np.ndarray:
    return np.log(np.maximum(mel_energies(w, config), config.log_floor))


def cmvn(features: np.ndarray) -> np.ndarray:
    """Per-column mean/variance normalization; constant columns only get centered."""
    mean = features.mean(axis=0, keepdims=True)
    std = features.std(axis=0, keepdims=True)
    return (features - mean) / np.where(std > 0, std, 1.0)


def mfcc(
    w: Waveform, config: MfccConfig = DEFAULT_MFCC, dtype: DType = DType.F32
) -> MfccMatrix:
    cepstra = dct(log_mel_energies(w, config), type=2, axis=-1, norm="ortho")[
        :, : config.n_ceps
    ]
    if config.cmvn:
        cepstra = cmvn(cepstra)
    return MfccMatrix(
        frames=cepstra.astype(dtype.numpy),
        frame_shift_ms=config.shift_ms,
        window_ms=config.window_ms,
    )


def fit_time(features: np.ndarray, length: int) -> np.ndarray:
    """Center-crop or right-zero-pad the leading (time) axis to ``length``."""
    n = features.shape[0]
    if n == length:
        return features
    if n > length:
        start = (n - length) // 2
        return features[start : start + length]
    pad = [(0, length - n)] + [(0, 0)] * (features.ndim - 1)
    return np.pad(features, pad)


# -- WAV I/O -----------------------------------------------------------


def read_wav(path: Path) -> Waveform:
    """Read a mono 16-bit PCM WAV file."""
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as e:
        raise ArtifactIOError(f"cannot read WAV {path}: {e}", str(path)) from e
    if data.ndim != 1:
        raise ArtifactIOError(f"{path} is not mono ({data.shape[1]} channels)", str(path))
    if data.dtype != np.int16:
        raise ArtifactIOError(f"{path} is {data.dtype}, expected 16-bit PCM", str(path))
    return Waveform(data.astype(np.float32) / 32768.0, int(rate))


def write_wav(path: Path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples.astype(np.float64) * 32767.0), -32768, 32767)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        wavfile.write(path, w.sample_rate, pcm.astype(np.int16))
    except OSError as e:
        raise ArtifactIOError(f"cannot write WAV {path}: {e}", str(path)) from e


def write_features_csv(path: Path, features: np.ndarray) -> None:
    """One row per frame, columns c0..c{n-1}, floats written with repr precision."""
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"c{i}" for i in range(features.shape[1])])
            for row in features:
                writer.writerow([repr(float(v)) for v in row])
    except OSError as e:
        raise ArtifactIOError(f"cannot write features {path}: {e}", str(path)) from e
