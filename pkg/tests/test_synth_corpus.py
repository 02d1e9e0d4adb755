"""
Tests for the synthetic three-class speech corpus.
"""

from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.signal import butter, sosfiltfilt

from src.classifiers import Label
from src.dsp_features import SAMPLE_RATE, Waveform, read_wav
from src.error_handler import ArtifactIOError, ConfigError, InsufficientAudioError
from src.synth_corpus import (
    DEFAULT_PROFILES,
    NOISE_SNR_DB,
    ClassProfile,
    CorpusManifest,
    CorpusSpec,
    Distribution,
    ManifestEntry,
    Sex,
    SpeakerProfile,
    class_profiles,
    derive_rng,
    gen_corpus,
    measure_prosody,
    partition_clients,
    render_utterance,
    segment_6s,
    synth_utterance,
)


def speaker(label: Label = Label.HC, base_f0: float = 120.0, sex: Sex = Sex.M) -> SpeakerProfile:
    return SpeakerProfile(f"{label.name.lower()}-x", sex, base_f0, 1.0, label)


def monotone(syllable_rate: float = 4.0) -> ClassProfile:
    return ClassProfile(Label.HC, Distribution(0.0, 0.0), Distribution(0.0, 0.0), Distribution(syllable_rate, 0.0))


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x.astype(np.float64) ** 2)))


def train_manifest(per_class: int) -> CorpusManifest:
    entries = [
        ManifestEntry(
            utterance_id=f"{label.name}-{i}-0",
            wav_path=f"wav/{label.name}-{i}.wav",
            label=label,
            speaker_id=f"{label.name}-{i}",
            split="train",
        )
        for label in Label
        for i in range(per_class)
    ]
    entries.append(
        ManifestEntry(utterance_id="dev-0", wav_path="wav/dev.wav", label=Label.AD, speaker_id="dev", split="dev")
    )
    return CorpusManifest(entries=entries)


class TestClassProfiles:
    """Class axes and the separability knob."""

    def test_default_ordering(self) -> None:
        hc, mci, ad = (DEFAULT_PROFILES[label] for label in Label)
        assert hc.pause_rate.mean < mci.pause_rate.mean < ad.pause_rate.mean
        assert ad.syllable_rate.mean < mci.syllable_rate.mean < hc.syllable_rate.mean
        assert ad.pitch_var.mean < mci.pitch_var.mean < hc.pitch_var.mean

    def test_full_separability_keeps_defaults(self) -> None:
        profiles = class_profiles(1.0)
        for label in Label:
            assert profiles[label].pause_rate.mean == pytest.approx(DEFAULT_PROFILES[label].pause_rate.mean)
            assert profiles[label].syllable_rate.mean == pytest.approx(DEFAULT_PROFILES[label].syllable_rate.mean)

    def test_zero_separability_merges_class_means(self) -> None:
        profiles = class_profiles(0.0)
        for axis in ("pause_rate", "pitch_var", "syllable_rate"):
            means = {getattr(profiles[label], axis).mean for label in Label}
            assert len(means) == 1

    def test_separability_out_of_range(self) -> None:
        with pytest.raises(ConfigError):
            class_profiles(1.5)


class TestSynthUtterance:
    """Rendering a single recording."""

    @pytest.mark.parametrize("sex,base_f0", [(Sex.M, 120.0), (Sex.F, 210.0)])
    def test_monotone_pitch_from_zero_crossings(self, sex: Sex, base_f0: float) -> None:
        wave = synth_utterance(
            speaker(base_f0=base_f0, sex=sex), monotone(), 6.0, np.random.default_rng(0), noise_snr_db=60.0
        )
        sos = butter(4, [0.7 * base_f0, 1.3 * base_f0], btype="bandpass", fs=SAMPLE_RATE, output="sos")
        fundamental = sosfiltfilt(sos, wave.samples.astype(np.float64))[SAMPLE_RATE // 2 : -SAMPLE_RATE // 2]
        negative = np.signbit(fundamental)
        crossings = int(np.count_nonzero(negative[1:] != negative[:-1]))
        estimate = crossings / 2 / (len(fundamental) / SAMPLE_RATE)
        assert abs(estimate - base_f0) / base_f0 < 0.02

    def test_pauses_are_near_silent_by_default(self) -> None:
        ad_like = ClassProfile(Label.AD, Distribution(1.2, 0.0), Distribution(1.0, 0.0), Distribution(3.0, 0.0))
        rendered = render_utterance(speaker(Label.AD), ad_like, 12.0, np.random.default_rng(5))
        samples, voiced = rendered.waveform.samples, rendered.voiced_mask
        assert (~voiced).any()
        assert rms(samples[~voiced]) < 0.01 * rms(samples[voiced])

    def test_noise_floor_follows_snr(self) -> None:
        ad_like = ClassProfile(Label.AD, Distribution(1.2, 0.0), Distribution(1.0, 0.0), Distribution(3.0, 0.0))
        rendered = render_utterance(speaker(Label.AD), ad_like, 12.0, np.random.default_rng(5), noise_snr_db=30.0)
        samples, voiced = rendered.waveform.samples, rendered.voiced_mask
        ratio = rms(samples[~voiced]) / rms(samples[voiced])
        assert ratio == pytest.approx(10.0 ** (-30.0 / 20.0), rel=0.1)

    def test_corpus_spec_defaults_to_quiet_pauses(self) -> None:
        assert CorpusSpec().noise_snr_db == NOISE_SNR_DB == 45.0

    def test_zero_pause_rate_is_fully_voiced(self) -> None:
        rendered = render_utterance(speaker(), monotone(), 6.0, np.random.default_rng(1))
        assert rendered.voiced_mask.all()
        assert rendered.params.pause_rate == 0.0

    def test_same_seed_is_bit_identical(self) -> None:
        profile = DEFAULT_PROFILES[Label.MCI]
        a = synth_utterance(speaker(Label.MCI), profile, 6.0, derive_rng(3, "mci-x"))
        b = synth_utterance(speaker(Label.MCI), profile, 6.0, derive_rng(3, "mci-x"))
        c = synth_utterance(speaker(Label.MCI), profile, 6.0, derive_rng(4, "mci-x"))
        assert a.samples.tobytes() == b.samples.tobytes()
        assert a.samples.tobytes() != c.samples.tobytes()

    def test_audio_is_finite_bounded_and_peak_normalized(self) -> None:
        wave = synth_utterance(speaker(), DEFAULT_PROFILES[Label.HC], 6.0, np.random.default_rng(2))
        assert wave.sample_rate == SAMPLE_RATE
        assert len(wave) == 6 * SAMPLE_RATE
        assert np.all(np.isfinite(wave.samples))
        assert float(np.max(np.abs(wave.samples))) == pytest.approx(0.9, abs=1e-6)

    def test_shorter_than_a_clip(self) -> None:
        with pytest.raises(InsufficientAudioError):
            synth_utterance(speaker(), monotone(), 5.0, np.random.default_rng(0))


class TestSegment:
    """Cutting long recordings into six-second clips."""

    def test_remainder_is_dropped(self) -> None:
        clips = segment_6s(Waveform(np.linspace(-0.5, 0.5, 20 * SAMPLE_RATE)))
        assert len(clips) == 3
        assert all(len(c) == 6 * SAMPLE_RATE for c in clips)
        assert clips[1].samples[0] == np.float32(np.linspace(-0.5, 0.5, 20 * SAMPLE_RATE)[6 * SAMPLE_RATE])

    def test_exact_clip_is_returned_unchanged(self, rng: np.random.Generator) -> None:
        wave = Waveform(rng.uniform(-1, 1, 6 * SAMPLE_RATE))
        (clip,) = segment_6s(wave)
        assert clip.samples.tobytes() == wave.samples.tobytes()

    def test_short_input(self) -> None:
        with pytest.raises(InsufficientAudioError):
            segment_6s(Waveform(np.zeros(int(5.9 * SAMPLE_RATE))))


class TestPartitionClients:
    """Dealing training speakers to clients."""

    def test_thirty_speakers_over_three_clients(self) -> None:
        manifest = partition_clients(train_manifest(10), 3, np.random.default_rng(0))
        assert manifest.client_ids() == ["client-0", "client-1", "client-2"]
        for cid in manifest.client_ids():
            entries = manifest.by_client(cid)
            assert len({e.speaker_id for e in entries}) == 10
            for label in Label:
                assert len({e.speaker_id for e in entries if e.label is label}) in (3, 4)
        manifest.check_disjoint()

    def test_dev_and_test_stay_central(self) -> None:
        manifest = partition_clients(train_manifest(3), 3, np.random.default_rng(0))
        assert [e.client_id for e in manifest.by_split("dev")] == [None]
        assert all(e.client_id is not None for e in manifest.by_split("train"))

    def test_single_client(self) -> None:
        manifest = partition_clients(train_manifest(4), 1, np.random.default_rng(0))
        assert manifest.client_ids() == ["client-0"]
        assert len(manifest.by_client("client-0")) == 12

    def test_same_seed_same_assignment(self) -> None:
        a = partition_clients(train_manifest(6), 3, np.random.default_rng(9))
        b = partition_clients(train_manifest(6), 3, np.random.default_rng(9))
        assert a == b

    def test_too_few_speakers(self) -> None:
        with pytest.raises(ConfigError):
            partition_clients(train_manifest(2), 3, np.random.default_rng(0))

    def test_speaker_in_two_clients_is_rejected(self) -> None:
        manifest = train_manifest(1)
        entry = manifest.entries[0]
        broken = CorpusManifest(
            entries=[
                entry.model_copy(update={"client_id": "client-0"}),
                entry.model_copy(update={"utterance_id": "dup", "client_id": "client-1"}),
            ]
        )
        with pytest.raises(ConfigError):
            broken.check_disjoint()


class TestCorpusSpec:
    """Corpus shape arithmetic."""

    def test_desk_default_size(self) -> None:
        spec = CorpusSpec()
        assert spec.speakers_per_class() == [10, 10, 10]
        assert spec.n_speakers * spec.utterances_per_speaker * 6 / 60 == 36

    def test_utterance_ratio_mirrors_class_shares(self) -> None:
        counts = CorpusSpec().utterances_per_class()
        total = sum(counts)
        for count, share in zip(counts, (0.40, 0.32, 0.28), strict=True):
            assert abs(count / total - share) < 0.05 * share

    def test_ratio_must_sum_to_one(self) -> None:
        with pytest.raises(ValidationError):
            CorpusSpec(class_ratio=(0.5, 0.5, 0.5))


@pytest.fixture(scope="module")
def corpus(tmp_path_factory: pytest.TempPathFactory) -> tuple[Path, CorpusManifest]:
    root = tmp_path_factory.mktemp("corpus")
    spec = CorpusSpec(n_speakers=15, utterances_per_speaker=1)
    return root, gen_corpus(spec, root, seed=7, n_clients=3, workers=2)


class TestGenCorpus:
    """Writing the corpus to disk."""

    def test_every_clip_is_six_seconds_of_bounded_audio(self, corpus: tuple[Path, CorpusManifest]) -> None:
        root, manifest = corpus
        assert manifest.entries
        for entry in manifest.entries:
            wave = read_wav(root / entry.wav_path)
            assert wave.sample_rate == SAMPLE_RATE
            assert len(wave) == 6 * SAMPLE_RATE
            assert np.all(np.abs(wave.samples) <= 1.0)

    def test_splits_and_clients_are_speaker_disjoint(self, corpus: tuple[Path, CorpusManifest]) -> None:
        _, manifest = corpus
        train, dev, test = (set(manifest.speakers(s)) for s in ("train", "dev", "test"))
        assert train & dev == set()
        assert train & test == set()
        assert dev & test == set()
        assert len(dev) == len(test) == 3
        per_client = [{e.speaker_id for e in manifest.by_client(cid)} for cid in manifest.client_ids()]
        assert len(per_client) == 3
        for i, a in enumerate(per_client):
            for b in per_client[i + 1 :]:
                assert a & b == set()
        assert all(e.client_id is None for e in manifest.by_split("dev") + manifest.by_split("test"))

    def test_manifest_file_round_trips(self, corpus: tuple[Path, CorpusManifest]) -> None:
        root, manifest = corpus
        assert CorpusManifest.load(root / "manifest.jsonl") == manifest

    def test_worker_count_does_not_change_output(
        self, corpus: tuple[Path, CorpusManifest], tmp_path: Path
    ) -> None:
        root, manifest = corpus
        again = gen_corpus(CorpusSpec(n_speakers=15, utterances_per_speaker=1), tmp_path, seed=7, n_clients=3, workers=1)
        assert again == manifest
        for entry in manifest.entries[:4]:
            assert (tmp_path / entry.wav_path).read_bytes() == (root / entry.wav_path).read_bytes()

    def test_insufficient_speakers(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigError):
            gen_corpus(CorpusSpec(n_speakers=12, utterances_per_speaker=1), tmp_path, seed=0, n_clients=3)

    def test_manifest_errors(self, tmp_path: Path) -> None:
        with pytest.raises(ArtifactIOError):
            CorpusManifest.load(tmp_path / "missing.jsonl")
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"utterance_id": 1}\n', encoding="utf-8")
        with pytest.raises(ConfigError):
            CorpusManifest.load(bad)


@pytest.mark.slow
class TestLearnability:
    """Measured prosody separates the classes."""

    def test_two_feature_nearest_centroid(self) -> None:
        profiles = class_profiles(1.0)
        features: dict[Label, list[tuple[float, float]]] = {label: [] for label in Label}
        for label in Label:
            for i in range(30):
                rng = derive_rng(11, f"{label.name}-{i}")
                who = speaker(label, base_f0=float(rng.uniform(90, 150)))
                wave = synth_utterance(who, profiles[label], 6.0, rng)
                prosody = measure_prosody(wave)
                features[label].append((prosody.pause_fraction, prosody.syllable_rate))

        train = {label: np.array(rows[:15]) for label, rows in features.items()}
        scale = np.concatenate(list(train.values())).std(axis=0)
        centroids = {label: rows.mean(axis=0) / scale for label, rows in train.items()}
        correct = 0
        for label, rows in features.items():
            for row in rows[15:]:
                guess = min(Label, key=lambda c: float(np.sum((np.asarray(row) / scale - centroids[c]) ** 2)))
                correct += int(guess is label)
        assert correct / 45 > 0.8
