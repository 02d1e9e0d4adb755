"""
Synthetic stand-in for a clinical speech corpus.

Each class differs along three axes: fluency (pause rate), prosody (pitch
variability) and rhythm (syllable rate). A ``separability`` scalar pulls
the class means towards their grand mean, down to identical classes at 0.

Voiced speech is a harmonic stack at the speaker's F0 with an AR-smoothed
pitch walk, shaped by three formant resonances, amplitude-modulated at the
syllable rate. Pauses arrive as a Poisson process. White noise is added at
a fixed SNR and the result is peak-normalized.
"""

from __future__ import annotations

import json
import math
import zlib
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Literal, Self

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .classifiers import Label
from .dsp_features import SAMPLE_RATE, Waveform, write_wav
from .error_handler import ArtifactIOError, ConfigError, InsufficientAudioError
from .logging_config import get_logger
from .settings import settings

logger = get_logger(__name__)

CLIP_SECONDS = 6.0
FORMANTS_HZ = (500.0, 1500.0, 2500.0)
FORMANT_BANDWIDTH_HZ = 200.0
PITCH_CONTROL_RATE = 100
# Pauses sit below 1% of voiced RMS from 40 dB up
NOISE_SNR_DB = 45.0


class Sex(str, Enum):
    M = "M"
    F = "F"


F0_RANGES = {Sex.M: (85.0, 155.0), Sex.F: (165.0, 255.0)}


@dataclass(frozen=True)
class Distribution:
    mean: float
    sd: float

    def draw(self, rng: np.random.Generator, floor: float = 0.0) -> float:
        return max(floor, float(rng.normal(self.mean, self.sd)))


@dataclass(frozen=True)
class ClassProfile:
    """Per-class distributions of the three speech axes."""

    label: Label
    pause_rate: Distribution
    pitch_var: Distribution
    syllable_rate: Distribution


DEFAULT_PROFILES = {
    Label.HC: ClassProfile(
        Label.HC, Distribution(0.3, 0.08), Distribution(3.0, 0.3), Distribution(5.0, 0.3)
    ),
    Label.MCI: ClassProfile(
        Label.MCI, Distribution(0.7, 0.1), Distribution(2.0, 0.3), Distribution(4.0, 0.3)
    ),
    Label.AD: ClassProfile(
        Label.AD, Distribution(1.2, 0.12), Distribution(1.2, 0.3), Distribution(3.0, 0.3)
    ),
}


def class_profiles(separability: float) -> dict[Label, ClassProfile]:
    """Default profiles with means interpolated between the grand mean (0) and the defaults (1)."""
    if not 0.0 <= separability <= 1.0:
        raise ConfigError("separability must be in [0, 1]", separability=separability)

    def blend(axis: str) -> dict[Label, Distribution]:
        dists = {label: getattr(p, axis) for label, p in DEFAULT_PROFILES.items()}
        grand = sum(d.mean for d in dists.values()) / len(dists)
        return {
            label: Distribution(grand + separability * (d.mean - grand), d.sd)
            for label, d in dists.items()
        }

    pause, pitch, syllable = blend("pause_rate"), blend("pitch_var"), blend("syllable_rate")
    return {
        label: ClassProfile(label, pause[label], pitch[label], syllable[label]) for label in Label
    }


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    sex: Sex
    base_f0: float
    formant_shift: float
    label: Label


@dataclass(frozen=True)
class UtteranceParams:
    """The values actually drawn for one recording."""

    pause_rate: float
    pitch_var: float
    syllable_rate: float


@dataclass(frozen=True)
class SynthesizedUtterance:
    waveform: Waveform
    voiced_mask: np.ndarray
    params: UtteranceParams


def derive_rng(seed: int, key: str) -> np.random.Generator:
    """Independent stream per (master seed, id); thread scheduling never changes it."""
    return np.random.default_rng([seed, zlib.crc32(key.encode("utf-8"))])


def _pause_mask(
    n: int, rate: float, rng: np.random.Generator, sample_rate: int
) -> np.ndarray:
    mask = np.ones(n, dtype=bool)
    if rate <= 0:
        return mask
    t = float(rng.exponential(1.0 / rate))
    duration = n / sample_rate
    while t < duration:
        length = float(rng.uniform(0.25, 0.6))
        mask[int(t * sample_rate) : int(min(t + length, duration) * sample_rate)] = False
        t += length + float(rng.exponential(1.0 / rate))
    return mask


def _pitch_contour(
    n: int, base_f0: float, pitch_var: float, rng: np.random.Generator, sample_rate: int
) -> np.ndarray:
    n_ctrl = int(math.ceil(n * PITCH_CONTROL_RATE / sample_rate)) + 1
    semitones = np.zeros(n_ctrl)
    if pitch_var > 0:
        a = 0.98
        innovations = rng.normal(0.0, pitch_var * math.sqrt(1 - a * a), size=n_ctrl)
        semitones[0] = rng.normal(0.0, pitch_var)
        for i in range(1, n_ctrl):
            semitones[i] = a * semitones[i - 1] + innovations[i]
    ctrl_t = np.arange(n_ctrl) / PITCH_CONTROL_RATE
    sample_t = np.arange(n) / sample_rate
    return base_f0 * 2.0 ** (np.interp(sample_t, ctrl_t, semitones) / 12.0)


def _harmonic_gains(base_f0: float, formant_shift: float, sample_rate: int) -> np.ndarray:
    n_harmonics = max(1, int((0.45 * sample_rate) // (base_f0 * 1.3)))
    freqs = base_f0 * np.arange(1, n_harmonics + 1)
    gains = np.full(n_harmonics, 0.05)
    for formant in FORMANTS_HZ:
        gains += np.exp(-(((freqs - formant * formant_shift) / FORMANT_BANDWIDTH_HZ) ** 2))
    return gains / np.arange(1, n_harmonics + 1)


def render_utterance(
    speaker: SpeakerProfile,
    profile: ClassProfile,
    duration_s: float,
    rng: np.random.Generator,
    noise_snr_db: float = NOISE_SNR_DB,
    sample_rate: int = SAMPLE_RATE,
) -> SynthesizedUtterance:
    """Synthesize one recording and return it with its voiced mask and drawn parameters."""
    if duration_s < CLIP_SECONDS:
        raise InsufficientAudioError(
            f"utterances must last at least {CLIP_SECONDS} s, asked for {duration_s}",
            int(duration_s * sample_rate),
            int(CLIP_SECONDS * sample_rate),
        )
    params = UtteranceParams(
        pause_rate=profile.pause_rate.draw(rng),
        pitch_var=profile.pitch_var.draw(rng),
        syllable_rate=profile.syllable_rate.draw(rng, floor=0.5),
    )
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate

    f0 = _pitch_contour(n, speaker.base_f0, params.pitch_var, rng, sample_rate)
    phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate
    gains = _harmonic_gains(speaker.base_f0, speaker.formant_shift, sample_rate)
    voiced = np.zeros(n)
    for h, gain in enumerate(gains, start=1):
        voiced += gain * np.sin(h * phase)

    syllable_phase = float(rng.uniform(0.0, np.pi))
    envelope = 0.3 + 0.7 * np.sin(np.pi * params.syllable_rate * t + syllable_phase) ** 2
    mask = _pause_mask(n, params.pause_rate, rng, sample_rate)
    speech = voiced * envelope * mask

    voiced_rms = float(np.sqrt(np.mean(speech[mask] ** 2))) if mask.any() else 1.0
    noise_rms = voiced_rms / 10.0 ** (noise_snr_db / 20.0)
    signal = speech + rng.normal(0.0, noise_rms, size=n)
    signal *= 0.9 / float(np.max(np.abs(signal)))
    return SynthesizedUtterance(Waveform(signal, sample_rate), mask, params)


def synth_utterance(
    speaker: SpeakerProfile,
    profile: ClassProfile,
    duration_s: float,
    rng: np.random.Generator,
    noise_snr_db: float = NOISE_SNR_DB,
) -> Waveform:
    return render_utterance(speaker, profile, duration_s, rng, noise_snr_db).waveform


def segment_6s(long_wave: Waveform, clip_seconds: float = CLIP_SECONDS) -> list[Waveform]:
    """Consecutive non-overlapping clips; the trailing remainder is dropped."""
    clip = int(round(clip_seconds * long_wave.sample_rate))
    if len(long_wave) < clip:
        raise InsufficientAudioError(
            f"need at least {clip_seconds} s to cut a clip, got {long_wave.duration_seconds:.3f} s",
            len(long_wave),
            clip,
        )
    return [
        Waveform(long_wave.samples[i * clip : (i + 1) * clip], long_wave.sample_rate)
        for i in range(len(long_wave) // clip)
    ]


# -- prosody measurement -----------------------------------------------


@dataclass(frozen=True)
class Prosody:
    pause_fraction: float
    syllable_rate: float


def measure_prosody(w: Waveform, threshold: float = 0.12) -> Prosody:
    """
    Pause fraction and syllable rate from the 10 ms frame-energy envelope.

    Frames quieter than ``threshold`` times the 95th-percentile frame RMS
    count as pauses; the syllable rate is the strongest envelope
    modulation between 1 and 10 Hz over the voiced frames.
    """
    hop, win = w.sample_rate // 100, int(0.025 * w.sample_rate)
    n_frames = max(1, (len(w) - win) // hop + 1)
    samples = w.samples.astype(np.float64)
    rms = np.array(
        [np.sqrt(np.mean(samples[i * hop : i * hop + win] ** 2)) for i in range(n_frames)]
    )
    voiced = rms >= threshold * np.percentile(rms, 95)
    pause_fraction = 1.0 - float(voiced.mean())

    envelope = np.where(voiced, rms, 0.0)
    if voiced.any():
        envelope = np.where(voiced, envelope - envelope[voiced].mean(), 0.0)
    n_fft = 8192
    spectrum = np.abs(np.fft.rfft(envelope, n=n_fft))
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / 100)
    band = (freqs >= 1.0) & (freqs <= 10.0)
    syllable_rate = float(freqs[band][np.argmax(spectrum[band])])
    return Prosody(pause_fraction, syllable_rate)


# -- corpus ------------------------------------------------------------

Split = Literal["train", "dev", "test"]


class ManifestEntry(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    utterance_id: str
    wav_path: str
    label: Label
    speaker_id: str
    split: Split
    client_id: str | None = None


class CorpusManifest(BaseModel):
    """All utterances with their labels, speakers, split and client assignment."""

    model_config = ConfigDict(frozen=True)

    entries: list[ManifestEntry]

    def speakers(self, split: Split | None = None) -> list[str]:
        return sorted({e.speaker_id for e in self.entries if split is None or e.split == split})

    def by_split(self, split: Split) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def by_client(self, client_id: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.client_id == client_id]

    def client_ids(self) -> list[str]:
        return sorted({e.client_id for e in self.entries if e.client_id is not None})

    def check_disjoint(self) -> None:
        """Every speaker sits in exactly one split and at most one client."""
        splits: dict[str, set[str]] = defaultdict(set)
        clients: dict[str, set[str]] = defaultdict(set)
        labels: dict[str, set[Label]] = defaultdict(set)
        for e in self.entries:
            splits[e.speaker_id].add(e.split)
            labels[e.speaker_id].add(e.label)
            if e.client_id is not None:
                clients[e.speaker_id].add(e.client_id)
        for speaker, found in splits.items():
            if len(found) > 1:
                raise ConfigError(f"speaker {speaker} appears in splits {sorted(found)}")
            if len(labels[speaker]) > 1:
                raise ConfigError(f"speaker {speaker} carries several labels")
            if len(clients[speaker]) > 1:
                raise ConfigError(f"speaker {speaker} appears in clients {sorted(clients[speaker])}")

    def save(self, path: Path) -> None:
        """JSON Lines, one entry per line."""
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("w", encoding="utf-8") as fh:
                for entry in self.entries:
                    fh.write(entry.model_dump_json() + "\n")
        except OSError as e:
            raise ArtifactIOError(f"cannot write manifest {path}: {e}", str(path)) from e

    @classmethod
    def load(cls, path: Path) -> CorpusManifest:
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise ArtifactIOError(f"cannot read manifest {path}: {e}", str(path)) from e
        try:
            entries = [ManifestEntry.model_validate(json.loads(line)) for line in lines if line.strip()]
        except (ValueError, ValidationError) as e:
            raise ConfigError(f"malformed manifest {path}: {e}") from e
        return cls(entries=entries)


class CorpusSpec(BaseModel):
    """Corpus shape; defaults give about 36 minutes from 30 speakers."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_speakers: int = Field(default=30, ge=3)
    utterances_per_speaker: int = Field(default=12, ge=1)
    class_ratio: tuple[float, float, float] = (0.40, 0.32, 0.28)
    female_fraction: float = Field(default=0.5, ge=0.0, le=1.0)
    separability: float = Field(default=0.7, ge=0.0, le=1.0)
    noise_snr_db: float = NOISE_SNR_DB
    dev_speakers_per_class: int = Field(default=1, ge=1)
    test_speakers_per_class: int = Field(default=1, ge=1)
    clip_seconds: float = Field(default=CLIP_SECONDS, ge=CLIP_SECONDS)

    @model_validator(mode="after")
    def _check_ratio(self) -> Self:
        if any(r <= 0 for r in self.class_ratio) or abs(sum(self.class_ratio) - 1.0) > 1e-6:
            raise ValueError("class_ratio must be three positive shares summing to 1")
        return self

    def speakers_per_class(self) -> list[int]:
        base, extra = divmod(self.n_speakers, len(Label))
        return [base + (1 if i < extra else 0) for i in range(len(Label))]

    def utterances_per_class(self) -> list[int]:
        total = self.n_speakers * self.utterances_per_speaker
        return [int(round(total * r)) for r in self.class_ratio]


def _make_speakers(spec: CorpusSpec, seed: int) -> list[SpeakerProfile]:
    rng = np.random.default_rng([seed, 0x5EA4])
    speakers = []
    for label, count in zip(Label, spec.speakers_per_class(), strict=True):
        n_female = int(round(count * spec.female_fraction))
        sexes = [Sex.F] * n_female + [Sex.M] * (count - n_female)
        for i, sex in enumerate(sexes):
            low, high = F0_RANGES[sex]
            shift_low, shift_high = (1.05, 1.15) if sex is Sex.F else (0.9, 1.0)
            speakers.append(
                SpeakerProfile(
                    speaker_id=f"{label.name.lower()}-{sex.value.lower()}{i:02d}",
                    sex=sex,
                    base_f0=float(rng.uniform(low, high)),
                    formant_shift=float(rng.uniform(shift_low, shift_high)),
                    label=label,
                )
            )
    return speakers


def _assign_splits(
    speakers: list[SpeakerProfile], spec: CorpusSpec, n_clients: int, seed: int
) -> dict[str, Split]:
    rng = np.random.default_rng([seed, 0x5B17])
    splits: dict[str, Split] = {}
    for label in Label:
        ids = sorted(s.speaker_id for s in speakers if s.label is label)
        needed = n_clients + spec.dev_speakers_per_class + spec.test_speakers_per_class
        if len(ids) < needed:
            raise ConfigError(
                f"class {label.name} has {len(ids)} speakers, needs at least {needed} "
                f"({n_clients} clients + dev + test)",
                label=label.name,
                speakers=len(ids),
            )
        order = [ids[i] for i in rng.permutation(len(ids))]
        n_dev, n_test = spec.dev_speakers_per_class, spec.test_speakers_per_class
        for sid in order[:n_dev]:
            splits[sid] = "dev"
        for sid in order[n_dev : n_dev + n_test]:
            splits[sid] = "test"
        for sid in order[n_dev + n_test :]:
            splits[sid] = "train"
    return splits


def _utterance_counts(speakers: list[SpeakerProfile], spec: CorpusSpec) -> dict[str, int]:
    counts: dict[str, int] = {}
    for label, total in zip(Label, spec.utterances_per_class(), strict=True):
        ids = sorted(s.speaker_id for s in speakers if s.label is label)
        base, extra = divmod(total, len(ids))
        for i, sid in enumerate(ids):
            counts[sid] = max(1, base + (1 if i < extra else 0))
    return counts


def gen_corpus(
    spec: CorpusSpec,
    root: Path,
    seed: int,
    n_clients: int = 3,
    workers: int | None = None,
) -> CorpusManifest:
    """
    Synthesize every speaker's recording, cut it into clips and write WAVs
    plus ``manifest.jsonl`` under ``root``.

    Training speakers are dealt to ``n_clients`` clients; dev and test stay
    central.
    """
    speakers = _make_speakers(spec, seed)
    splits = _assign_splits(speakers, spec, n_clients, seed)
    counts = _utterance_counts(speakers, spec)
    profiles = class_profiles(spec.separability)

    def build(speaker: SpeakerProfile) -> list[ManifestEntry]:
        n_utts = counts[speaker.speaker_id]
        rng = derive_rng(seed, speaker.speaker_id)
        # a partial clip's worth of extra audio exercises the remainder drop
        duration = n_utts * spec.clip_seconds + spec.clip_seconds / 2
        recording = synth_utterance(
            speaker, profiles[speaker.label], duration, rng, spec.noise_snr_db
        )
        entries = []
        for i, clip in enumerate(segment_6s(recording, spec.clip_seconds)[:n_utts]):
            utterance_id = f"{speaker.speaker_id}-{i:03d}"
            rel = f"wav/{speaker.speaker_id}/{utterance_id}.wav"
            write_wav(root / rel, clip)
            entries.append(
                ManifestEntry(
                    utterance_id=utterance_id,
                    wav_path=rel,
                    label=speaker.label,
                    speaker_id=speaker.speaker_id,
                    split=splits[speaker.speaker_id],
                )
            )
        return entries

    with ThreadPoolExecutor(max_workers=workers or settings.FEDCPC_WORKERS) as pool:
        per_speaker = list(pool.map(build, speakers))
    entries = [e for group in per_speaker for e in group]
    manifest = partition_clients(
        CorpusManifest(entries=entries), n_clients, np.random.default_rng([seed, 0xC11E])
    )
    manifest.check_disjoint()
    manifest.save(root / "manifest.jsonl")
    logger.info(
        "corpus_generated",
        root=str(root),
        utterances=len(entries),
        speakers=len(speakers),
        minutes=round(len(entries) * spec.clip_seconds / 60, 2),
    )
    return manifest


def partition_clients(
    manifest: CorpusManifest, n_clients: int, rng: np.random.Generator
) -> CorpusManifest:
    """
    Deal training speakers to ``client-0..client-{M-1}``.

    Within each class the speakers are shuffled and dealt round-robin; the
    dealer position carries over between classes so client sizes differ by
    at most one. Dev and test entries keep no client.
    """
    if n_clients < 1:
        raise ConfigError("need at least one client", n_clients=n_clients)
    train = manifest.by_split("train")
    assignment: dict[str, str] = {}
    position = 0
    for label in Label:
        ids = sorted({e.speaker_id for e in train if e.label is label})
        if len(ids) < n_clients:
            raise ConfigError(
                f"class {label.name} has {len(ids)} training speakers for {n_clients} clients",
                label=label.name,
            )
        for i in rng.permutation(len(ids)):
            assignment[ids[i]] = f"client-{position % n_clients}"
            position += 1
    entries = [
        e.model_copy(update={"client_id": assignment.get(e.speaker_id) if e.split == "train" else None})
        for e in manifest.entries
    ]
    return CorpusManifest(entries=entries)
