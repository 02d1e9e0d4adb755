"""
Stage orchestration behind the CLI.

Every stage runs inside a run directory holding the resolved config,
``run_info.json`` and a JSON-lines ``run.log`` next to its artifacts:

    gen-data   corpus WAVs + manifest.jsonl
    featurize  one MFCC tensor per utterance (.fcw or .csv)
    pretrain   cpc.fcw + cpc_curve.csv (cpc_rounds.csv when federated)
    train      classifier.fcw (+ rounds.csv when federated)
    evaluate   metrics.csv, confusion.svg, predictions.csv, metrics_table.md
    serve      global model after S rounds, one process per role
    client
"""

from __future__ import annotations

import json
from collections.abc import Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Literal

import numpy as np
from nanoid import generate
from returns.result import Failure, Result, Success

from .classifiers import (
    ClassifierConfig,
    ClassifierTrainer,
    DownstreamModel,
    FeatureKind,
    HeadKind,
    LabeledExample,
    predict_logits,
    train_local,
)
from .cpc import (
    CpcModel,
    CpcTrainer,
    PretrainSchedule,
    evaluate_contrastive,
    evaluate_ranking,
    pretrain,
    write_curve_csv,
)
from .datetime_utils import elapsed_seconds, utc_now
from .dsp_features import mfcc, read_wav, write_features_csv
from .error_handler import (
    ArtifactIOError,
    ConfigError,
    FedCPCError,
    WeightsDecodeError,
    with_error_handling,
)
from .eval_metrics import (
    MetricsReport,
    confusion,
    emit_report,
    macro_metrics,
    write_predictions_csv,
    write_table,
)
from .federation import (
    FederatedClient,
    Evaluator,
    FederationServer,
    GlobalModelState,
    RoundMetrics,
    federated_view,
    run_federation,
    write_round_metrics_csv,
)
from .logging_config import (
    add_global_context,
    add_run_log_file,
    clear_global_context,
    get_logger,
    remove_handler,
)
from .monitoring import get_system_metrics, metrics
from .nn_ops import cross_entropy
from .optim import OptimizerState
from .params import ParameterSet
from .protocol import Stage
from .run_config import RunConfig, write_resolved_config
from .synth_corpus import CorpusManifest, ManifestEntry, Split, gen_corpus
from .tensor import Tensor, no_grad
from .transport import TcpListener, connect_tcp
from .weights_format import load_weights, save_weights

logger = get_logger(__name__)

MANIFEST_NAME = "manifest.jsonl"
CPC_CHECKPOINT = "cpc.fcw"
CLASSIFIER_CHECKPOINT = "classifier.fcw"
ROUND_METRICS_NAMES = {Stage.PRETRAIN: "cpc_rounds.csv", Stage.DOWNSTREAM: "rounds.csv"}

Mode = Literal["central", "federated"]

# Sub-stream tags mixed into the run seed; each consumer gets its own stream.
_INIT_CPC = 1
_INIT_CLASSIFIER = 2


class Role(str, Enum):
    SERVER = "server"
    CLIENT = "client"
    LOCAL = "local"


# -- run directory -----------------------------------------------------


@dataclass
class RunContext:
    config: RunConfig
    directory: Path
    run_id: str


@contextmanager
def run_context(config: RunConfig, command: str, role: Role = Role.LOCAL) -> Iterator[RunContext]:
    """
    Create the run directory, attach run.log and write run_info.json on exit.

    The metrics collector starts empty, so run_info.json summarizes this run only.
    """
    directory = config.output_dir
    directory.mkdir(parents=True, exist_ok=True)
    write_resolved_config(config, directory)
    run_id = generate(size=12)
    started = utc_now()
    metrics.reset()
    handler = add_run_log_file(directory / "run.log")
    add_global_context(run_id=run_id, command=command, role=role.value)
    info: dict[str, Any] = {
        "run_id": run_id,
        "command": command,
        "role": role.value,
        "seed": config.seed,
        "started_at": started.format_common_iso(),
        "system": get_system_metrics(),
    }
    logger.info("run_started", output_dir=str(directory), seed=config.seed)
    status = "failed"
    try:
        yield RunContext(config, directory, run_id)
        status = "ok"
    finally:
        info["status"] = status
        info["finished_at"] = utc_now().format_common_iso()
        info["elapsed_seconds"] = elapsed_seconds(started)
        info["metrics"] = metrics.get_metric_summary()["metric_stats"]
        try:
            (directory / "run_info.json").write_text(
                json.dumps(info, indent=2, default=str), encoding="utf-8"
            )
        except OSError as e:
            logger.error("run_info_not_written", error=str(e))
        logger.info("run_finished", status=status)
        clear_global_context()
        remove_handler(handler)


# -- fallible loads ----------------------------------------------------


def load_manifest(corpus_dir: Path) -> Result[CorpusManifest, FedCPCError]:
    path = corpus_dir / MANIFEST_NAME
    if not path.exists():
        return Failure(
            ArtifactIOError(f"no manifest at {path}; run gen-data first", str(path))
        )
    try:
        manifest = CorpusManifest.load(path)
        manifest.check_disjoint()
    except FedCPCError as e:
        return Failure(e)
    return Success(manifest)


def load_checkpoint(path: Path) -> Result[ParameterSet, FedCPCError]:
    if not path.exists():
        return Failure(ArtifactIOError(f"checkpoint {path} does not exist", str(path)))
    try:
        return Success(load_weights(path))
    except WeightsDecodeError as e:
        corrupt = ArtifactIOError(f"checkpoint {path} is corrupt: {e}", str(path))
        corrupt.__cause__ = e
        return Failure(corrupt)
    except FedCPCError as e:
        return Failure(e)


# -- data --------------------------------------------------------------


def _entries(manifest: CorpusManifest, split: Split, client_id: str | None = None) -> list[ManifestEntry]:
    entries = manifest.by_split(split)
    if client_id is not None:
        entries = [e for e in entries if e.client_id == client_id]
    if not entries:
        where = f"{split} split" + (f" of {client_id}" if client_id else "")
        raise ConfigError(f"the {where} is empty", split=split)
    return entries


def load_waves(corpus_dir: Path, entries: Sequence[ManifestEntry]) -> list[np.ndarray]:
    return [read_wav(corpus_dir / e.wav_path).samples for e in entries]


def load_examples(
    config: RunConfig, entries: Sequence[ManifestEntry], features: FeatureKind
) -> list[LabeledExample]:
    """MFCC matrices for MFCC models, raw samples for CPC-fed models."""
    examples = []
    for entry in entries:
        wave = read_wav(config.corpus_dir / entry.wav_path)
        if features is FeatureKind.MFCC:
            values = mfcc(wave, config.mfcc, config.classifier.dtype).frames
        else:
            values = wave.samples
        examples.append(LabeledExample(values, entry.label, entry.speaker_id, entry.utterance_id))
    return examples


def client_seed(config: RunConfig, client_index: int) -> int:
    """Client 0 shares the central run's data seed."""
    return config.seed + client_index


# -- gen-data / featurize ----------------------------------------------


@with_error_handling
def stage_gen_data(config: RunConfig) -> CorpusManifest:
    return gen_corpus(
        config.corpus,
        config.corpus_dir,
        config.seed,
        n_clients=config.federation.n_clients,
    )


@with_error_handling
def stage_featurize(config: RunConfig, manifest: CorpusManifest, fmt: Literal["fcw", "csv"] = "fcw") -> int:
    out = config.output_dir / "features"
    for entry in manifest.entries:
        wave = read_wav(config.corpus_dir / entry.wav_path)
        frames = mfcc(wave, config.mfcc, config.classifier.dtype).frames
        if fmt == "csv":
            out.mkdir(parents=True, exist_ok=True)
            write_features_csv(out / f"{entry.utterance_id}.csv", frames)
        else:
            save_weights(out / f"{entry.utterance_id}.fcw", ParameterSet([("mfcc", Tensor(frames))]))
    logger.info("features_written", utterances=len(manifest.entries), format=fmt, directory=str(out))
    return len(manifest.entries)


# -- pretrain ----------------------------------------------------------


def init_cpc(config: RunConfig) -> CpcModel:
    return CpcModel.init(config.cpc, np.random.default_rng([config.seed, _INIT_CPC]))


def _cpc_trainers(config: RunConfig, manifest: CorpusManifest, initial: CpcModel) -> dict[str, CpcTrainer]:
    trainers = {}
    for index, cid in enumerate(manifest.client_ids()):
        waves = load_waves(config.corpus_dir, _entries(manifest, "train", cid))
        model = CpcModel(config.cpc, initial.params.copy())
        trainers[cid] = CpcTrainer(
            model, waves, OptimizerState.adam(config.cpc.lr), seed=client_seed(config, index)
        )
    return trainers


@with_error_handling
def stage_pretrain(config: RunConfig, manifest: CorpusManifest, mode: Mode) -> CpcModel:
    """Step 1: CPC on the unlabeled training audio, centrally or with FedAvg."""
    model = init_cpc(config)
    dev = load_waves(config.corpus_dir, manifest.by_split("dev")) if manifest.by_split("dev") else []
    before = evaluate_ranking(dev, model, config.seed) if dev else None
    curve_path = config.output_dir / "cpc_curve.csv"
    curve_path.unlink(missing_ok=True)

    if mode == "central":
        waves = load_waves(config.corpus_dir, _entries(manifest, "train"))
        schedule = PretrainSchedule(
            epochs=config.cpc.epochs, batch_size=config.cpc.batch_size, seed=client_seed(config, 0)
        )
        result = pretrain(waves, model, OptimizerState.adam(config.cpc.lr), schedule)
        write_curve_csv(curve_path, result.curve, config.cpc.prediction_steps)
    else:
        trainers = _cpc_trainers(config, manifest, model)
        outcome = run_federation(
            config.federation,
            Stage.PRETRAIN,
            model.params,
            trainers,
            transport=config.transport.kind,
            evaluator=make_cpc_dev_evaluator(model, dev, config.seed) if dev else None,
            host="127.0.0.1",
        )
        model.params.load(outcome.state.weights)
        write_round_metrics(config, Stage.PRETRAIN, outcome.round_metrics)

    if dev and before is not None:
        after = evaluate_ranking(dev, model, config.seed)
        chance = 1.0 / config.cpc.n_candidates
        logger.info(
            "cpc_ranking_evaluated",
            ranking_accuracy_k1_before=before[1],
            ranking_accuracy_k1_after=after[1],
            chance=chance,
        )
        (config.output_dir / "cpc_ranking.json").write_text(
            json.dumps({"before": before, "after": after, "chance": chance}, indent=2),
            encoding="utf-8",
        )
    save_weights(config.output_dir / CPC_CHECKPOINT, model.params)
    return model


# -- train -------------------------------------------------------------


def classifier_config(config: RunConfig, features: FeatureKind, head: HeadKind) -> ClassifierConfig:
    input_dim = config.cpc.context_dim if features is FeatureKind.CPC else config.mfcc.n_ceps
    return config.classifier.with_head(head, input_dim)


def build_downstream(
    config: RunConfig,
    features: FeatureKind,
    head: HeadKind,
    cpc_checkpoint: ParameterSet | None = None,
) -> DownstreamModel:
    cls_config = classifier_config(config, features, head)
    cpc = None
    if features is FeatureKind.CPC:
        if cpc_checkpoint is None:
            raise ConfigError("CPC features need a pre-trained CPC checkpoint (--cpc)")
        cpc = init_cpc(config)
        cpc.params.load(cpc_checkpoint)
    return DownstreamModel.init(
        cls_config,
        np.random.default_rng([config.seed, _INIT_CLASSIFIER]),
        cpc,
        finetune=config.run.finetune,
    )


def _clone(model: DownstreamModel) -> DownstreamModel:
    cpc = None if model.cpc is None else CpcModel(model.cpc.config, model.cpc.params.copy())
    return DownstreamModel(model.config, model.classifier.copy(), cpc, model.finetune)


def make_dev_evaluator(model: DownstreamModel, dev: Sequence[LabeledExample]) -> Evaluator:
    """Round evaluator: load the aggregated weights into a copy and score the dev split."""
    scorer = _clone(model)
    view = federated_view(scorer.params, Stage.DOWNSTREAM)

    def evaluate(state: GlobalModelState) -> RoundMetrics:
        view.load(state.weights)
        logits = predict_logits(dev, scorer)
        with no_grad():
            losses = [
                cross_entropy(Tensor(row), int(example.label)).item()
                for row, example in zip(logits, dev, strict=True)
            ]
        report = macro_metrics(
            confusion([int(e.label) for e in dev], [int(np.argmax(row)) for row in logits])
        )
        return RoundMetrics(
            round=state.round,
            loss=float(np.mean(losses)),
            precision=report.macro.precision,
            recall=report.macro.recall,
            macro_f1=report.macro.f1,
        )

    return evaluate


def make_cpc_dev_evaluator(model: CpcModel, dev: Sequence[np.ndarray], seed: int) -> Evaluator:
    """Round evaluator for pre-training: dev InfoNCE and k=1 ranking accuracy of the aggregated model."""
    scorer = CpcModel(model.config, model.params.copy())

    def evaluate(state: GlobalModelState) -> RoundMetrics:
        scorer.params.load(state.weights)
        loss, accuracy = evaluate_contrastive(dev, scorer, seed)
        return RoundMetrics(round=state.round, loss=loss, ranking_accuracy_k1=accuracy[1])

    return evaluate


def round_evaluator(
    config: RunConfig, manifest: CorpusManifest, model: CpcModel | DownstreamModel
) -> Evaluator | None:
    """Dev-split scoring after every round, or None when the corpus has no dev speakers."""
    entries = manifest.by_split("dev")
    if not entries:
        return None
    if isinstance(model, CpcModel):
        return make_cpc_dev_evaluator(model, load_waves(config.corpus_dir, entries), config.seed)
    return make_dev_evaluator(model, load_examples(config, entries, model.feature_kind))


def write_round_metrics(config: RunConfig, stage: Stage, rows: Sequence[RoundMetrics]) -> Path:
    path = config.output_dir / ROUND_METRICS_NAMES[stage]
    write_round_metrics_csv(path, rows, stage)
    return path


@with_error_handling
def stage_train(
    config: RunConfig,
    manifest: CorpusManifest,
    mode: Mode,
    features: FeatureKind,
    head: HeadKind,
    cpc_checkpoint: ParameterSet | None = None,
) -> DownstreamModel:
    """Step 2: the downstream classifier, centrally or with FedAvg."""
    model = build_downstream(config, features, head, cpc_checkpoint)
    if mode == "central":
        train = load_examples(config, _entries(manifest, "train"), features)
        history = train_local(
            train,
            model,
            OptimizerState.adam(model.config.lr),
            model.config.epochs,
            seed=client_seed(config, 0),
        )
        logger.info("central_training_finished", final_loss=history.loss[-1] if history.loss else None)
    else:
        trainers: dict[str, ClassifierTrainer] = {}
        for index, cid in enumerate(manifest.client_ids()):
            local = _clone(model)
            data = load_examples(config, _entries(manifest, "train", cid), features)
            trainers[cid] = ClassifierTrainer(
                local, data, OptimizerState.adam(model.config.lr), seed=client_seed(config, index)
            )
        outcome = run_federation(
            config.federation,
            Stage.DOWNSTREAM,
            model.params,
            trainers,
            transport=config.transport.kind,
            evaluator=round_evaluator(config, manifest, model),
            host="127.0.0.1",
        )
        federated_view(model.params, Stage.DOWNSTREAM).load(outcome.state.weights)
        write_round_metrics(config, Stage.DOWNSTREAM, outcome.round_metrics)
    save_weights(config.output_dir / CLASSIFIER_CHECKPOINT, model.checkpoint_params())
    return model


# -- evaluate ----------------------------------------------------------


def infer_model_kind(checkpoint: ParameterSet) -> tuple[FeatureKind, HeadKind]:
    """CPC-fed checkpoints carry ``encoder.*``; CNN-LSTM ones carry ``classifier.lstm.*``."""
    names = checkpoint.names()
    if not any(n.startswith("classifier.") for n in names):
        raise ConfigError("checkpoint holds no classifier.* tensors")
    features = FeatureKind.CPC if any(n.startswith("encoder.") for n in names) else FeatureKind.MFCC
    head = HeadKind.CNN_LSTM if any(n.startswith("classifier.lstm.") for n in names) else HeadKind.CNN
    return features, head


def restore_downstream(config: RunConfig, checkpoint: ParameterSet) -> DownstreamModel:
    features, head = infer_model_kind(checkpoint)
    cls_config = classifier_config(config, features, head)
    if head is HeadKind.CNN_LSTM:
        layers = len({n.split(".")[3] for n in checkpoint.names() if n.startswith("classifier.lstm.layers.")})
        cls_config = cls_config.model_copy(update={"lstm_layers": layers})
    cpc = init_cpc(config) if features is FeatureKind.CPC else None
    model = DownstreamModel.init(
        cls_config, np.random.default_rng([config.seed, _INIT_CLASSIFIER]), cpc, finetune=False
    )
    model.load(checkpoint)
    return model


@with_error_handling
def stage_evaluate(
    config: RunConfig,
    manifest: CorpusManifest,
    checkpoint: ParameterSet,
    split: Split = "test",
    system_name: str | None = None,
    average: Literal["macro", "weighted"] = "macro",
) -> MetricsReport:
    model = restore_downstream(config, checkpoint)
    entries = _entries(manifest, split)
    examples = load_examples(config, entries, model.feature_kind)
    logits = predict_logits(examples, model)
    true = [int(e.label) for e in examples]
    cm = confusion(true, [int(np.argmax(row)) for row in logits])
    report = macro_metrics(cm, average)
    emit_report(report, cm, config.output_dir)
    write_predictions_csv(
        config.output_dir / "predictions.csv", [e.utterance_id for e in entries], true, logits
    )
    name = system_name or f"{model.feature_kind.value}-{model.config.head.value}"
    write_table(config.output_dir / "metrics_table.md", [(name, report)])
    return report


# -- separate-process roles --------------------------------------------


def _role_initial(
    config: RunConfig,
    stage: Stage,
    features: FeatureKind,
    head: HeadKind,
    cpc_checkpoint: ParameterSet | None,
) -> CpcModel | DownstreamModel:
    if stage is Stage.PRETRAIN:
        return init_cpc(config)
    return build_downstream(config, features, head, cpc_checkpoint)


@with_error_handling
def stage_serve(
    config: RunConfig,
    stage: Stage,
    features: FeatureKind = FeatureKind.MFCC,
    head: HeadKind = HeadKind.CNN_LSTM,
    cpc_checkpoint: ParameterSet | None = None,
    manifest: CorpusManifest | None = None,
) -> ParameterSet:
    """
    Server role: accept M clients on the configured address and run S rounds.

    With a manifest the global model is scored on the dev split after every
    round and the rows are written next to the checkpoint.
    """
    model = _role_initial(config, stage, features, head, cpc_checkpoint)
    transport = config.transport
    listener = TcpListener(transport.host, transport.port)
    try:
        channels = listener.accept(config.federation.n_clients, transport.connect_timeout_s)
    finally:
        listener.close()
    server = FederationServer(
        config.federation, stage, list(channels), round_timeout=transport.round_timeout_s
    )
    evaluator = round_evaluator(config, manifest, model) if manifest is not None else None
    result = server.run(model.params, evaluator)
    federated_view(model.params, stage).load(result.state.weights)
    if manifest is not None:
        write_round_metrics(config, stage, result.round_metrics)
    if isinstance(model, CpcModel):
        save_weights(config.output_dir / CPC_CHECKPOINT, model.params)
    else:
        save_weights(config.output_dir / CLASSIFIER_CHECKPOINT, model.checkpoint_params())
    logger.info("server_finished", rounds=result.state.round)
    return result.state.weights


@with_error_handling
def stage_client(
    config: RunConfig,
    manifest: CorpusManifest,
    client_id: str,
    stage: Stage,
    features: FeatureKind = FeatureKind.MFCC,
    head: HeadKind = HeadKind.CNN_LSTM,
    cpc_checkpoint: ParameterSet | None = None,
) -> int:
    """Client role: connect, then train on this client's speakers until SHUTDOWN."""
    client_ids = manifest.client_ids()
    if client_id not in client_ids:
        raise ConfigError(f"unknown client {client_id}; manifest has {client_ids}", client_id=client_id)
    index = client_ids.index(client_id)
    entries = _entries(manifest, "train", client_id)
    model = _role_initial(config, stage, features, head, cpc_checkpoint)
    trainer: CpcTrainer | ClassifierTrainer
    if isinstance(model, CpcModel):
        trainer = CpcTrainer(
            model,
            load_waves(config.corpus_dir, entries),
            OptimizerState.adam(config.cpc.lr),
            seed=client_seed(config, index),
        )
    else:
        trainer = ClassifierTrainer(
            model,
            load_examples(config, entries, features),
            OptimizerState.adam(model.config.lr),
            seed=client_seed(config, index),
        )
    transport = config.transport
    channel = connect_tcp(transport.host, transport.port, transport.connect_timeout_s)
    return FederatedClient(client_id, trainer, stage, config.federation.local_epochs).serve(channel)
