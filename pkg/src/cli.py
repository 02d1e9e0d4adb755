"""
FedCPC command-line interface.

Usage:
    fedcpc gen-data                                   # synthetic corpus + manifest
    fedcpc featurize [--format fcw|csv]               # MFCC per utterance
    fedcpc pretrain --mode federated --clients 3 --rounds 50 --local-epochs 4
    fedcpc train --mode federated --features cpc --head cnn-lstm --cpc runs/x/cpc.fcw
    fedcpc evaluate --checkpoint runs/x/classifier.fcw
    fedcpc serve --stage pretrain                     # server process
    fedcpc client --id client-0 --stage pretrain      # one per client process
    fedcpc inspect-weights runs/x/cpc.fcw

Exit codes: 0 ok, 2 configuration error, 3 protocol error, 4 I/O error.
"""

import sys
from collections.abc import Callable
from pathlib import Path
from typing import Any, NoReturn, TypeVar

import click
from returns.result import Failure, Result, Success

from .classifiers import FeatureKind, HeadKind
from .error_handler import ConfigError, FedCPCError, exit_code_for, log_error
from .logging_config import configure_structlog, get_logger
from .params import ParameterSet
from .pipeline import (
    Role,
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
from .protocol import Stage
from .run_config import RunConfig, load_run_config
from .settings import settings
from .synth_corpus import CorpusManifest
from .weights_format import describe_weights

logger = get_logger(__name__)

T = TypeVar("T")

MODES = click.Choice(["central", "federated"])
FEATURES = click.Choice([k.value for k in FeatureKind])
HEADS = click.Choice([k.value for k in HeadKind])
STAGES = click.Choice([s.value for s in Stage])
TRANSPORTS = click.Choice(["inprocess", "tcp"])


def _fail(error: BaseException) -> NoReturn:
    if isinstance(error, FedCPCError):
        log_error(error, level="WARNING")
    click.echo(f"fedcpc: {error}", err=True)
    sys.exit(int(exit_code_for(error)))


def _execute(action: Callable[[], T]) -> T:
    try:
        return action()
    except (FedCPCError, OSError) as e:
        _fail(e)


def _unwrap(result: Result[T, FedCPCError]) -> T:
    match result:
        case Success(value):
            return value
        case Failure(error):
            _fail(error)
    raise AssertionError("unreachable")


def _config(ctx: click.Context, **sections: dict[str, Any]) -> RunConfig:
    """Base config from --config with global flags, then per-command flag overrides."""
    base: RunConfig = _unwrap(ctx.obj["config"])
    overrides = {"run": ctx.obj["run_overrides"], **sections}
    return _execute(lambda: base.with_overrides(overrides))


def _manifest(config: RunConfig) -> CorpusManifest:
    return _unwrap(load_manifest(config.corpus_dir))


def _cpc_checkpoint(features: str, cpc_path: Path | None) -> ParameterSet | None:
    if FeatureKind(features) is FeatureKind.MFCC:
        if cpc_path is not None:
            _fail(ConfigError("--cpc conflicts with --features mfcc"))
        return None
    if cpc_path is None:
        _fail(ConfigError("--features cpc needs --cpc CHECKPOINT"))
    return _unwrap(load_checkpoint(cpc_path))


def _federation_flags(clients: int | None, rounds: int | None, local_epochs: int | None) -> dict[str, Any]:
    return {"n_clients": clients, "rounds": rounds, "local_epochs": local_epochs}


# CLI Commands
@click.group()
@click.option("--config", "config_path", type=click.Path(path_type=Path), help="Run config INI file")
@click.option("--seed", type=int, help="Override [run] seed")
@click.option("--output-dir", type=click.Path(path_type=Path), help="Override [run] output_dir")
@click.option("--corpus-dir", type=click.Path(path_type=Path), help="Override [run] corpus_dir")
@click.option("--verbose", "-v", is_flag=True, help="Enable debug logging")
@click.pass_context
def cli(
    ctx: click.Context,
    config_path: Path | None,
    seed: int | None,
    output_dir: Path | None,
    corpus_dir: Path | None,
    verbose: bool,
) -> None:
    """FedCPC laboratory: federated CPC pre-training and speech classification."""
    if verbose:
        configure_structlog(log_level="DEBUG", json_logs=settings.LOG_JSON)
    try:
        settings.validate()
    except ValueError as e:
        _fail(ConfigError(str(e)))
    ctx.ensure_object(dict)
    ctx.obj["config"] = load_run_config(config_path)
    ctx.obj["run_overrides"] = {
        "seed": seed,
        "output_dir": str(output_dir) if output_dir is not None else None,
        "corpus_dir": str(corpus_dir) if corpus_dir is not None else None,
    }


@cli.command("gen-data")
@click.option("--speakers", type=int, help="Total number of speakers")
@click.option("--utterances-per-speaker", type=int, help="Average six-second clips per speaker")
@click.option("--separability", type=float, help="0 = identical classes, 1 = default profiles")
@click.option("--clients", type=int, help="Clients to deal training speakers to")
@click.pass_context
def gen_data(
    ctx: click.Context,
    speakers: int | None,
    utterances_per_speaker: int | None,
    separability: float | None,
    clients: int | None,
) -> None:
    """Synthesize the corpus and write manifest.jsonl."""
    config = _config(
        ctx,
        corpus={
            "n_speakers": speakers,
            "utterances_per_speaker": utterances_per_speaker,
            "separability": separability,
        },
        federation={"n_clients": clients},
    )

    def action() -> CorpusManifest:
        with run_context(config, "gen-data"):
            return stage_gen_data(config)

    manifest = _execute(action)
    click.echo(
        f"Wrote {len(manifest.entries)} utterances from {len(manifest.speakers())} speakers "
        f"to {config.corpus_dir}"
    )


@cli.command()
@click.option("--format", "fmt", type=click.Choice(["fcw", "csv"]), default="fcw", show_default=True)
@click.pass_context
def featurize(ctx: click.Context, fmt: str) -> None:
    """Compute MFCC matrices for every utterance."""
    config = _config(ctx)
    manifest = _manifest(config)

    def action() -> int:
        with run_context(config, "featurize"):
            return stage_featurize(config, manifest, fmt)  # type: ignore[arg-type]

    count = _execute(action)
    click.echo(f"Featurized {count} utterances into {config.output_dir / 'features'}")


@cli.command()
@click.option("--mode", type=MODES, default="federated", show_default=True)
@click.option("--clients", type=int, help="Number of clients M")
@click.option("--rounds", type=int, help="Federated rounds S")
@click.option("--local-epochs", type=int, help="Local epochs E per round")
@click.option("--epochs", type=int, help="Epochs for central training")
@click.option("--transport", type=TRANSPORTS, help="inprocess or tcp (loopback)")
@click.pass_context
def pretrain(
    ctx: click.Context,
    mode: str,
    clients: int | None,
    rounds: int | None,
    local_epochs: int | None,
    epochs: int | None,
    transport: str | None,
) -> None:
    """Step 1: CPC pre-training on unlabeled training audio."""
    if mode == "central" and any(v is not None for v in (clients, rounds, local_epochs)):
        _fail(ConfigError("--clients/--rounds/--local-epochs conflict with --mode central"))
    config = _config(
        ctx,
        cpc={"epochs": epochs},
        federation=_federation_flags(clients, rounds, local_epochs),
        transport={"kind": transport},
    )
    manifest = _manifest(config)

    def action() -> None:
        with run_context(config, f"pretrain-{mode}"):
            stage_pretrain(config, manifest, mode)  # type: ignore[arg-type]

    _execute(action)
    click.echo(f"CPC checkpoint written to {config.output_dir / 'cpc.fcw'}")


@cli.command()
@click.option("--mode", type=MODES, default="federated", show_default=True)
@click.option("--features", type=FEATURES, default="mfcc", show_default=True)
@click.option("--head", type=HEADS, default="cnn-lstm", show_default=True)
@click.option("--cpc", "cpc_path", type=click.Path(path_type=Path), help="Pre-trained CPC checkpoint")
@click.option("--finetune/--no-finetune", default=None, help="Train the CPC encoder with the classifier")
@click.option("--clients", type=int, help="Number of clients M")
@click.option("--rounds", type=int, help="Federated rounds S")
@click.option("--local-epochs", type=int, help="Local epochs E per round")
@click.option("--epochs", type=int, help="Epochs for central training")
@click.option("--transport", type=TRANSPORTS, help="inprocess or tcp (loopback)")
@click.pass_context
def train(
    ctx: click.Context,
    mode: str,
    features: str,
    head: str,
    cpc_path: Path | None,
    finetune: bool | None,
    clients: int | None,
    rounds: int | None,
    local_epochs: int | None,
    epochs: int | None,
    transport: str | None,
) -> None:
    """Step 2: downstream HC/MCI/AD classifier."""
    if mode == "central" and any(v is not None for v in (clients, rounds, local_epochs)):
        _fail(ConfigError("--clients/--rounds/--local-epochs conflict with --mode central"))
    if finetune is not None and FeatureKind(features) is FeatureKind.MFCC:
        _fail(ConfigError("--finetune/--no-finetune only apply to --features cpc"))
    config = _config(
        ctx,
        run={**ctx.obj["run_overrides"], "finetune": finetune},
        classifier={"epochs": epochs},
        federation=_federation_flags(clients, rounds, local_epochs),
        transport={"kind": transport},
    )
    cpc = _cpc_checkpoint(features, cpc_path)
    manifest = _manifest(config)

    def action() -> None:
        with run_context(config, f"train-{mode}-{features}-{head}"):
            stage_train(config, manifest, mode, FeatureKind(features), HeadKind(head), cpc)  # type: ignore[arg-type]

    _execute(action)
    click.echo(f"Classifier checkpoint written to {config.output_dir / 'classifier.fcw'}")


@cli.command()
@click.option("--checkpoint", type=click.Path(path_type=Path), required=True)
@click.option("--split", type=click.Choice(["dev", "test"]), default="test", show_default=True)
@click.option("--name", "system_name", help="System name in metrics_table.md")
@click.option("--average", type=click.Choice(["macro", "weighted"]), default="macro", show_default=True)
@click.pass_context
def evaluate(
    ctx: click.Context, checkpoint: Path, split: str, system_name: str | None, average: str
) -> None:
    """Score a classifier checkpoint on held-out speakers."""
    config = _config(ctx)
    params = _unwrap(load_checkpoint(checkpoint))
    manifest = _manifest(config)

    def action() -> Any:
        with run_context(config, "evaluate"):
            return stage_evaluate(config, manifest, params, split, system_name, average)  # type: ignore[arg-type]

    report = _execute(action)
    click.echo(f"{'class':<8}{'precision':>10}{'recall':>10}{'f1':>10}")
    for label, m in report.per_class.items():
        click.echo(f"{label.name:<8}{m.precision:>10.3f}{m.recall:>10.3f}{m.f1:>10.3f}")
    m = report.macro
    click.echo(f"{report.average:<8}{m.precision:>10.3f}{m.recall:>10.3f}{m.f1:>10.3f}")


def _role_options(func: Callable[..., Any]) -> Callable[..., Any]:
    options = [
        click.option("--stage", type=STAGES, default="pretrain", show_default=True),
        click.option("--features", type=FEATURES, default="mfcc", show_default=True),
        click.option("--head", type=HEADS, default="cnn-lstm", show_default=True),
        click.option("--cpc", "cpc_path", type=click.Path(path_type=Path)),
        click.option("--host", help="Server address"),
        click.option("--port", type=int, help="Server port"),
        click.option("--clients", type=int, help="Number of clients M"),
        click.option("--rounds", type=int, help="Federated rounds S"),
        click.option("--local-epochs", type=int, help="Local epochs E per round"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _role_config(ctx: click.Context, host: str | None, port: int | None, **plan: int | None) -> RunConfig:
    return _config(
        ctx,
        federation=_federation_flags(plan["clients"], plan["rounds"], plan["local_epochs"]),
        transport={"kind": "tcp", "host": host, "port": port},
    )


def _role_cpc(stage: str, features: str, cpc_path: Path | None) -> ParameterSet | None:
    if Stage(stage) is Stage.PRETRAIN:
        if cpc_path is not None:
            _fail(ConfigError("--cpc conflicts with --stage pretrain"))
        return None
    return _cpc_checkpoint(features, cpc_path)


@cli.command()
@_role_options
@click.pass_context
def serve(
    ctx: click.Context,
    stage: str,
    features: str,
    head: str,
    cpc_path: Path | None,
    host: str | None,
    port: int | None,
    clients: int | None,
    rounds: int | None,
    local_epochs: int | None,
) -> None:
    """Run the federation server over TCP, scoring the dev split after every round."""
    config = _role_config(ctx, host, port, clients=clients, rounds=rounds, local_epochs=local_epochs)
    cpc = _role_cpc(stage, features, cpc_path)
    manifest = _manifest(config)

    def action() -> None:
        with run_context(config, f"serve-{stage}", Role.SERVER):
            stage_serve(config, Stage(stage), FeatureKind(features), HeadKind(head), cpc, manifest)

    _execute(action)
    click.echo(f"Global model written to {config.output_dir}")


@cli.command()
@click.option("--id", "client_id", required=True, help="Client id from the manifest, e.g. client-0")
@_role_options
@click.pass_context
def client(
    ctx: click.Context,
    client_id: str,
    stage: str,
    features: str,
    head: str,
    cpc_path: Path | None,
    host: str | None,
    port: int | None,
    clients: int | None,
    rounds: int | None,
    local_epochs: int | None,
) -> None:
    """Run one federation client over TCP."""
    config = _role_config(ctx, host, port, clients=clients, rounds=rounds, local_epochs=local_epochs)
    cpc = _role_cpc(stage, features, cpc_path)
    manifest = _manifest(config)

    def action() -> int:
        with run_context(config, f"client-{stage}", Role.CLIENT):
            return stage_client(
                config, manifest, client_id, Stage(stage), FeatureKind(features), HeadKind(head), cpc
            )

    served = _execute(action)
    click.echo(f"{client_id} served {served} rounds")


@cli.command("inspect-weights")
@click.argument("path", type=click.Path(path_type=Path))
def inspect_weights(path: Path) -> None:
    """Print the tensors of a checkpoint."""
    params = _unwrap(load_checkpoint(path))
    rows = describe_weights(params)
    width = max([len("name"), *(len(str(r["name"])) for r in rows)])
    click.echo(f"{'name':<{width}}  {'dtype':<5}  {'shape':<16}  {'numel':>10}  {'mean':>12}  {'std':>12}")
    for r in rows:
        click.echo(
            f"{r['name']!s:<{width}}  {r['dtype']!s:<5}  {r['shape']!s:<16}  {r['numel']:>10}  "
            f"{r['mean']:>12.6g}  {r['std']:>12.6g}"
        )
    click.echo(f"{len(params)} tensors, {params.num_parameters()} values")


if __name__ == "__main__":
    cli()
