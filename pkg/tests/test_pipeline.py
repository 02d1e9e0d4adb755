"""
Tests for stage orchestration on a tiny synthetic corpus.
"""

import json
import socket
import threading
from pathlib import Path

import numpy as np
import pytest
from returns.result import Failure, Success

from src.classifiers import FeatureKind, HeadKind
from src.error_handler import ArtifactIOError, ConfigError, WeightsDecodeError
from src.monitoring import metrics
from src.params import ParameterSet
from src.pipeline import (
    CLASSIFIER_CHECKPOINT,
    CPC_CHECKPOINT,
    Role,
    build_downstream,
    client_seed,
    infer_model_kind,
    init_cpc,
    load_checkpoint,
    load_manifest,
    run_context,
    stage_client,
    stage_evaluate,
    stage_featurize,
    stage_gen_data,
    stage_pretrain,
    stage_serve,
    stage_train,
)
from src.protocol import Stage
from src.run_config import RESOLVED_NAME, RunConfig
from src.synth_corpus import CorpusManifest, partition_clients
from src.tensor import DType, Tensor
from src.weights_format import load_weights, save_weights


def tiny_config(root: Path) -> RunConfig:
    return RunConfig().with_overrides(
        {
            "run": {"seed": 7, "output_dir": str(root / "run"), "corpus_dir": str(root / "corpus")},
            "corpus": {"n_speakers": 15, "utterances_per_speaker": 1},
            "mfcc": {"n_ceps": 6},
            "cpc": {
                "conv_channels": 4,
                "context_dim": 3,
                "prediction_steps": 2,
                "crop_length": 1600,
                "n_negatives": 3,
                "batch_size": 2,
                "epochs": 2,
                "dtype": "f64",
            },
            "classifier": {
                "input_time": 8,
                "conv_filters": [2, 2, 2, 2, 2],
                "fc_width": 4,
                "lstm_hidden": 3,
                "batch_size": 2,
                "epochs": 2,
                "dtype": "f64",
            },
            "federation": {"n_clients": 3, "rounds": 2, "local_epochs": 1},
        }
    )


def at(config: RunConfig, directory: Path, **sections: dict) -> RunConfig:
    return config.with_overrides({"run": {"output_dir": str(directory)}, **sections})


@pytest.fixture(scope="module")
def lab(tmp_path_factory: pytest.TempPathFactory) -> tuple[RunConfig, CorpusManifest]:
    config = tiny_config(tmp_path_factory.mktemp("lab"))
    return config, stage_gen_data(config)


@pytest.fixture(scope="module")
def cpc_checkpoint(lab: tuple[RunConfig, CorpusManifest], tmp_path_factory: pytest.TempPathFactory) -> Path:
    config, manifest = lab
    config = at(config, tmp_path_factory.mktemp("pretrain"))
    stage_pretrain(config, manifest, "central")
    return config.output_dir / CPC_CHECKPOINT


class TestRunContext:
    """Run directory bookkeeping."""

    def test_successful_run(self, tmp_path: Path) -> None:
        config = at(RunConfig(), tmp_path / "run")
        with run_context(config, "unit-test", Role.SERVER) as ctx:
            assert ctx.directory == tmp_path / "run"
        info = json.loads((tmp_path / "run" / "run_info.json").read_text())
        assert info["status"] == "ok"
        assert info["role"] == "server"
        assert info["run_id"] == ctx.run_id
        assert (tmp_path / "run" / RESOLVED_NAME).exists()
        events = [json.loads(line)["event"] for line in (tmp_path / "run" / "run.log").read_text().splitlines()]
        assert "run_started" in events
        assert "run_finished" in events

    def test_run_info_summarizes_only_this_run(self, tmp_path: Path) -> None:
        metrics.counter("left_over_from_earlier")
        with run_context(at(RunConfig(), tmp_path / "run"), "unit-test"):
            metrics.gauge("round_clients", 2, round=0)
        summary = json.loads((tmp_path / "run" / "run_info.json").read_text())["metrics"]
        assert summary["round_clients"]["latest"] == 2
        assert "left_over_from_earlier" not in summary

    def test_failed_run_is_recorded(self, tmp_path: Path) -> None:
        config = at(RunConfig(), tmp_path / "run")
        with pytest.raises(ConfigError), run_context(config, "unit-test"):
            raise ConfigError("boom")
        info = json.loads((tmp_path / "run" / "run_info.json").read_text())
        assert info["status"] == "failed"


class TestLoads:
    """Fallible manifest and checkpoint loading."""

    def test_missing_manifest(self, tmp_path: Path) -> None:
        result = load_manifest(tmp_path)
        assert isinstance(result, Failure)
        assert isinstance(result.failure(), ArtifactIOError)

    def test_manifest_loads(self, lab: tuple[RunConfig, CorpusManifest]) -> None:
        config, manifest = lab
        assert load_manifest(config.corpus_dir) == Success(manifest)

    def test_missing_checkpoint(self, tmp_path: Path) -> None:
        assert isinstance(load_checkpoint(tmp_path / "none.fcw").failure(), ArtifactIOError)

    def test_corrupt_checkpoint_is_an_io_failure(self, tmp_path: Path) -> None:
        path = tmp_path / "w.fcw"
        save_weights(path, ParameterSet([("a", Tensor(np.ones(4), DType.F64))]))
        blob = bytearray(path.read_bytes())
        blob[-6] ^= 0xFF
        path.write_bytes(bytes(blob))
        error = load_checkpoint(path).failure()
        assert isinstance(error, ArtifactIOError)
        assert isinstance(error.__cause__, WeightsDecodeError)


class TestFeaturize:
    """MFCC tensors per utterance."""

    @pytest.mark.parametrize("fmt", ["fcw", "csv"])
    def test_one_file_per_utterance(
        self, lab: tuple[RunConfig, CorpusManifest], tmp_path: Path, fmt: str
    ) -> None:
        config, manifest = lab
        config = at(config, tmp_path)
        assert stage_featurize(config, manifest, fmt) == len(manifest.entries)  # type: ignore[arg-type]
        files = sorted((tmp_path / "features").glob(f"*.{fmt}"))
        assert len(files) == len(manifest.entries)
        if fmt == "fcw":
            assert load_weights(files[0])["mfcc"].shape == (598, 6)
        else:
            assert files[0].read_text().splitlines()[0] == "c0,c1,c2,c3,c4,c5"


class TestPretrain:
    """CPC pre-training stage."""

    def test_central_artifacts(self, lab: tuple[RunConfig, CorpusManifest], cpc_checkpoint: Path) -> None:
        config, _ = lab
        directory = cpc_checkpoint.parent
        weights = load_weights(cpc_checkpoint)
        assert weights.names() == init_cpc(config).params.names()
        curve = (directory / "cpc_curve.csv").read_text().splitlines()
        assert len(curve) == 1 + config.cpc.epochs
        ranking = json.loads((directory / "cpc_ranking.json").read_text())
        assert ranking["chance"] == pytest.approx(0.25)
        assert set(ranking["before"]) == {"1", "2"}

    def test_federated_pretraining(self, lab: tuple[RunConfig, CorpusManifest], tmp_path: Path) -> None:
        config, manifest = lab
        config = at(config, tmp_path, federation={"rounds": 2})
        model = stage_pretrain(config, manifest, "federated")
        assert load_weights(tmp_path / CPC_CHECKPOINT).bitwise_equal(model.params)
        assert not model.params.bitwise_equal(init_cpc(config).params)

        rows = (tmp_path / "cpc_rounds.csv").read_text().splitlines()
        assert rows[0] == "round,loss,ranking_accuracy_k1"
        assert [r.split(",")[0] for r in rows[1:]] == ["1", "2"]
        for row in rows[1:]:
            _, loss, accuracy = row.split(",")
            assert np.isfinite(float(loss))
            assert 0.0 <= float(accuracy) <= 1.0


class TestTrainAndEvaluate:
    """Downstream training and held-out scoring."""

    def test_central_mfcc_cnn(self, lab: tuple[RunConfig, CorpusManifest], tmp_path: Path) -> None:
        config, manifest = lab
        config = at(config, tmp_path)
        stage_train(config, manifest, "central", FeatureKind.MFCC, HeadKind.CNN)
        checkpoint = load_weights(tmp_path / CLASSIFIER_CHECKPOINT)
        assert infer_model_kind(checkpoint) == (FeatureKind.MFCC, HeadKind.CNN)

        report = stage_evaluate(config, manifest, checkpoint)
        assert report.n_examples == len(manifest.by_split("test"))
        for name in ("metrics.csv", "confusion.svg", "predictions.csv", "metrics_table.md"):
            assert (tmp_path / name).exists()
        assert "| mfcc-cnn |" in (tmp_path / "metrics_table.md").read_text()

    def test_federated_writes_round_metrics(self, lab: tuple[RunConfig, CorpusManifest], tmp_path: Path) -> None:
        config, manifest = lab
        config = at(config, tmp_path)
        stage_train(config, manifest, "federated", FeatureKind.MFCC, HeadKind.CNN_LSTM)
        rows = (tmp_path / "rounds.csv").read_text().splitlines()
        assert rows[0] == "round,loss,precision,recall,macro_f1"
        assert [r.split(",")[0] for r in rows[1:]] == ["1", "2"]
        checkpoint = load_weights(tmp_path / CLASSIFIER_CHECKPOINT)
        assert infer_model_kind(checkpoint) == (FeatureKind.MFCC, HeadKind.CNN_LSTM)
        report = stage_evaluate(config, manifest, checkpoint, split="dev", average="weighted")
        assert report.average == "weighted"

    def test_cpc_features(
        self, lab: tuple[RunConfig, CorpusManifest], cpc_checkpoint: Path, tmp_path: Path
    ) -> None:
        config, manifest = lab
        config = at(config, tmp_path)
        stage_train(config, manifest, "central", FeatureKind.CPC, HeadKind.CNN, load_weights(cpc_checkpoint))
        checkpoint = load_weights(tmp_path / CLASSIFIER_CHECKPOINT)
        assert any(n.startswith("encoder.") for n in checkpoint)
        assert not any(n.startswith("heads.") for n in checkpoint)
        assert infer_model_kind(checkpoint) == (FeatureKind.CPC, HeadKind.CNN)
        assert stage_evaluate(config, manifest, checkpoint).n_examples == len(manifest.by_split("test"))

    def test_cpc_features_need_a_checkpoint(self, lab: tuple[RunConfig, CorpusManifest]) -> None:
        config, _ = lab
        with pytest.raises(ConfigError):
            build_downstream(config, FeatureKind.CPC, HeadKind.CNN)

    def test_checkpoint_without_classifier(self, lab: tuple[RunConfig, CorpusManifest]) -> None:
        config, _ = lab
        with pytest.raises(ConfigError):
            infer_model_kind(init_cpc(config).params)


class TestDeterminism:
    """Equivalences between run modes."""

    def test_single_client_federation_equals_central(
        self, lab: tuple[RunConfig, CorpusManifest], tmp_path: Path
    ) -> None:
        config, manifest = lab
        one_client = partition_clients(manifest, 1, np.random.default_rng(0))
        central = at(config, tmp_path / "central", classifier={"epochs": 4})
        federated = at(
            config, tmp_path / "federated", federation={"n_clients": 1, "rounds": 2, "local_epochs": 2}
        )
        a = stage_train(central, one_client, "central", FeatureKind.MFCC, HeadKind.CNN)
        b = stage_train(federated, one_client, "federated", FeatureKind.MFCC, HeadKind.CNN)
        assert a.checkpoint_params().bitwise_equal(b.checkpoint_params())
        assert (tmp_path / "central" / CLASSIFIER_CHECKPOINT).read_bytes() == (
            tmp_path / "federated" / CLASSIFIER_CHECKPOINT
        ).read_bytes()

    def test_client_seeds(self, lab: tuple[RunConfig, CorpusManifest]) -> None:
        config, _ = lab
        assert [client_seed(config, i) for i in range(3)] == [7, 8, 9]

    @pytest.mark.integration
    def test_tcp_matches_inprocess(self, lab: tuple[RunConfig, CorpusManifest], tmp_path: Path) -> None:
        config, manifest = lab
        runs = {}
        for kind in ("inprocess", "tcp"):
            run = at(config, tmp_path / kind, transport={"kind": kind})
            stage_train(run, manifest, "federated", FeatureKind.MFCC, HeadKind.CNN)
            runs[kind] = (tmp_path / kind / CLASSIFIER_CHECKPOINT).read_bytes()
        assert runs["inprocess"] == runs["tcp"]

    @staticmethod
    def _run_roles(config: RunConfig, manifest: CorpusManifest, directory: Path, stage: Stage) -> RunConfig:
        """Server and every client in threads of this process, over TCP on a free port."""
        with socket.socket() as free:
            free.bind(("127.0.0.1", 0))
            port = free.getsockname()[1]
        roles = at(config, directory, transport={"kind": "tcp", "host": "127.0.0.1", "port": port})
        errors: list[BaseException] = []

        def guarded(fn, *args) -> None:  # type: ignore[no-untyped-def]
            try:
                fn(*args)
            except BaseException as e:  # surfaced below
                errors.append(e)

        model = (FeatureKind.MFCC, HeadKind.CNN)
        threads = [
            threading.Thread(target=guarded, args=(stage_serve, roles, stage, *model, None, manifest))
        ]
        threads += [
            threading.Thread(target=guarded, args=(stage_client, roles, manifest, cid, stage, *model))
            for cid in manifest.client_ids()
        ]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join(timeout=300)
        assert errors == []
        return roles

    @pytest.mark.integration
    def test_separate_roles_match_inprocess(self, lab: tuple[RunConfig, CorpusManifest], tmp_path: Path) -> None:
        config, manifest = lab
        self._run_roles(config, manifest, tmp_path / "roles", Stage.DOWNSTREAM)

        reference = at(config, tmp_path / "reference")
        stage_train(reference, manifest, "federated", FeatureKind.MFCC, HeadKind.CNN)
        for name in (CLASSIFIER_CHECKPOINT, "rounds.csv"):
            assert (tmp_path / "roles" / name).read_bytes() == (tmp_path / "reference" / name).read_bytes()
        assert len((tmp_path / "roles" / "rounds.csv").read_text().splitlines()) == 1 + config.federation.rounds

    @pytest.mark.integration
    def test_pretraining_roles_score_every_round(
        self, lab: tuple[RunConfig, CorpusManifest], tmp_path: Path
    ) -> None:
        config, manifest = lab
        self._run_roles(config, manifest, tmp_path / "roles", Stage.PRETRAIN)

        reference = at(config, tmp_path / "reference")
        stage_pretrain(reference, manifest, "federated")
        for name in (CPC_CHECKPOINT, "cpc_rounds.csv"):
            assert (tmp_path / "roles" / name).read_bytes() == (tmp_path / "reference" / name).read_bytes()
        rows = (tmp_path / "roles" / "cpc_rounds.csv").read_text().splitlines()
        assert len(rows) == 1 + config.federation.rounds

    def test_unknown_client_role(self, lab: tuple[RunConfig, CorpusManifest]) -> None:
        config, manifest = lab
        with pytest.raises(ConfigError):
            stage_client(config, manifest, "client-9", Stage.PRETRAIN)
