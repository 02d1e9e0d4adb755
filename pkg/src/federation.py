"""
FedAvg orchestration.

The server broadcasts the global weights, every client trains E local
epochs from them, and the server replaces the global model with the
sample-count-weighted mean of the returned weights. Only the parameters of
the active stage cross the wire: the whole CPC model during pre-training,
``encoder.*`` and ``classifier.*`` during downstream training.
"""

from __future__ import annotations

import csv
import threading
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Literal, Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .error_handler import ArtifactIOError, ConfigError, ProtocolError
from .logging_config import get_logger, with_context
from .monitoring import metrics
from .params import ParameterSet
from .protocol import ClientUpdateMessage, GlobalWeights, Hello, Shutdown, Stage
from .settings import settings
from .tensor import Tensor
from .transport import (
    FrameChannel,
    FrameRecorder,
    QueueChannel,
    ServerSession,
    TcpListener,
    connect_tcp,
)
from .weights_format import serialize_weights

logger = get_logger(__name__)

DOWNSTREAM_PREFIXES = ("encoder.", "classifier.")


def federated_view(params: ParameterSet, stage: Stage) -> ParameterSet:
    """The tensors that are exchanged in ``stage``; shares storage with ``params``."""
    if stage is Stage.PRETRAIN:
        return params.select([""])
    return params.select(DOWNSTREAM_PREFIXES)


@dataclass(frozen=True)
class GlobalModelState:
    round: int
    weights: ParameterSet
    stage: Stage


@dataclass(frozen=True)
class ClientUpdate:
    client_id: str
    round: int
    n_samples: int
    weights: ParameterSet


class FederationPlan(BaseModel):
    """Clients M, rounds S and local epochs E; every client joins every round."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_clients: int = Field(default=3, ge=1)
    rounds: int = Field(default=50, ge=0)
    local_epochs: int = Field(default=4, ge=1)
    weighting: Literal["fedavg"] = "fedavg"


# -- aggregation -------------------------------------------------------


def _check_updates(updates: Sequence[ClientUpdate]) -> list[ClientUpdate]:
    if not updates:
        raise ProtocolError("no client updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    seen: set[str] = set()
    for update in ordered:
        if update.client_id in seen:
            raise ProtocolError(
                f"duplicate update from {update.client_id}",
                client_id=update.client_id,
                round=update.round,
            )
        seen.add(update.client_id)
        if update.n_samples <= 0:
            raise ProtocolError(
                f"client {update.client_id} reports {update.n_samples} samples",
                client_id=update.client_id,
            )
    rounds = {u.round for u in ordered}
    if len(rounds) != 1:
        raise ProtocolError(f"updates from different rounds: {sorted(rounds)}")
    reference = ordered[0].weights
    for update in ordered[1:]:
        if not update.weights.is_compatible(reference):
            raise ProtocolError(
                f"update from {update.client_id} is not shape-compatible",
                client_id=update.client_id,
                round=update.round,
            )
    return ordered


def aggregation_weights(counts: Sequence[int]) -> list[float]:
    total = float(sum(counts))
    return [n / total for n in counts]


def fedavg_aggregate(updates: Sequence[ClientUpdate]) -> ParameterSet:
    """
    Sample-count-weighted mean of the client weights.

    Updates are summed in client-id order in float64 and cast back to each
    parameter's dtype, so the result does not depend on arrival order.
    """
    ordered = _check_updates(updates)
    coefficients = aggregation_weights([u.n_samples for u in ordered])
    result = ParameterSet()
    for name, reference in ordered[0].weights.items():
        acc = np.zeros(reference.shape, dtype=np.float64)
        for coef, update in zip(coefficients, ordered, strict=True):
            acc += coef * update.weights[name].data.astype(np.float64)
        result.add(name, Tensor(acc.astype(reference.dtype.numpy), reference.dtype))
    return result


def fedsgd_aggregate(
    weights: ParameterSet, gradients: Sequence[tuple[int, ParameterSet]], lr: float
) -> ParameterSet:
    """Gradient form: w - lr * sum_m (n_m / n) g_m, accumulated in float64."""
    if not gradients:
        raise ProtocolError("no client gradients to aggregate")
    for _, grads in gradients:
        if not grads.is_compatible(weights):
            raise ProtocolError("gradient set is not shape-compatible with the weights")
    coefficients = aggregation_weights([n for n, _ in gradients])
    result = ParameterSet()
    for name, tensor in weights.items():
        acc = np.zeros(tensor.shape, dtype=np.float64)
        for coef, (_, grads) in zip(coefficients, gradients, strict=True):
            acc += coef * grads[name].data.astype(np.float64)
        updated = tensor.data.astype(np.float64) - lr * acc
        result.add(name, Tensor(updated.astype(tensor.dtype.numpy), tensor.dtype))
    return result


# -- clients -----------------------------------------------------------


class LocalTrainer(Protocol):
    """What a federated client needs from its local model."""

    @property
    def params(self) -> ParameterSet: ...

    @property
    def num_samples(self) -> int: ...

    def train_epochs(self, epochs: int, epoch_offset: int) -> Any: ...


class FederatedClient:
    """
    Client role: say HELLO, then for each GLOBAL_WEIGHTS train and reply.

    The trainer (and its optimizer moments) lives across rounds; round s
    trains epochs s*E .. s*E+E-1 so the epoch-seeded data order continues.
    """

    def __init__(
        self, client_id: str, trainer: LocalTrainer, stage: Stage, local_epochs: int
    ) -> None:
        self.client_id = client_id
        self.trainer = trainer
        self.stage = stage
        self.local_epochs = local_epochs

    def serve(self, channel: FrameChannel) -> int:
        """Run until SHUTDOWN or disconnect; returns the number of rounds served."""
        view = federated_view(self.trainer.params, self.stage)
        channel.send(Hello(self.client_id, self.trainer.num_samples, self.stage))
        served = 0
        try:
            while True:
                message = channel.recv()
                if message is None or isinstance(message, Shutdown):
                    logger.info("client_stopping", client_id=self.client_id, rounds=served)
                    return served
                if not isinstance(message, GlobalWeights):
                    raise ProtocolError(
                        f"client expected GLOBAL_WEIGHTS, got {type(message).__name__}",
                        client_id=self.client_id,
                    )
                with with_context(logger, client_id=self.client_id, round=message.round) as log:
                    view.load(message.weights())
                    with metrics.timer("local_training", client_id=self.client_id):
                        self.trainer.train_epochs(
                            self.local_epochs, message.round * self.local_epochs
                        )
                    channel.send(
                        ClientUpdateMessage(
                            message.round,
                            self.client_id,
                            self.trainer.num_samples,
                            serialize_weights(view),
                        )
                    )
                    log.info("client_update_sent")
                served += 1
        finally:
            channel.close()


# -- server ------------------------------------------------------------


@dataclass(frozen=True)
class RoundMetrics:
    """Dev scores of the global model after a round: P/R/F1 downstream, ranking accuracy in pre-training."""

    round: int
    loss: float
    precision: float | None = None
    recall: float | None = None
    macro_f1: float | None = None
    ranking_accuracy_k1: float | None = None

    def logged(self) -> dict[str, float | int]:
        return {k: v for k, v in asdict(self).items() if v is not None}


ROUND_COLUMNS: dict[Stage, tuple[str, ...]] = {
    Stage.PRETRAIN: ("round", "loss", "ranking_accuracy_k1"),
    Stage.DOWNSTREAM: ("round", "loss", "precision", "recall", "macro_f1"),
}


Evaluator = Callable[[GlobalModelState], RoundMetrics | None]


def run_round(
    state: GlobalModelState, session: ServerSession, plan: FederationPlan
) -> GlobalModelState:
    """Broadcast w_s, collect all M updates, aggregate, and advance to round s+1."""
    if len(session.clients) != plan.n_clients:
        raise ConfigError(
            f"plan expects {plan.n_clients} clients, session has {len(session.clients)}"
        )
    with metrics.timer("federated_round", round=state.round):
        session.broadcast(GlobalWeights(state.round, serialize_weights(state.weights)))
        messages = session.collect_updates(state.round)
        updates = []
        for message in messages:
            announced = session.clients[message.client_id].n_samples
            if message.n_samples != announced:
                raise ProtocolError(
                    f"{message.client_id} trained on {message.n_samples} samples, announced {announced}",
                    client_id=message.client_id,
                    round=state.round,
                )
            weights = message.weights()
            if not weights.is_compatible(state.weights):
                raise ProtocolError(
                    f"update from {message.client_id} does not match the global model",
                    client_id=message.client_id,
                    round=state.round,
                )
            updates.append(ClientUpdate(message.client_id, message.round, message.n_samples, weights))
            metrics.counter("update_bytes", len(message.payload), client_id=message.client_id)
        aggregated = fedavg_aggregate(updates)
    metrics.gauge("round_clients", len(updates), round=state.round)
    logger.info("round_aggregated", round=state.round, clients=len(updates))
    return GlobalModelState(state.round + 1, aggregated, state.stage)


@dataclass
class FederationResult:
    state: GlobalModelState
    round_metrics: list[RoundMetrics] = field(default_factory=list)


class FederationServer:
    """Server role over an established set of connections."""

    def __init__(
        self,
        plan: FederationPlan,
        stage: Stage,
        channels: list[FrameChannel],
        round_timeout: float | None = None,
    ) -> None:
        self.plan = plan
        self.stage = stage
        self.session = ServerSession(channels, round_timeout)

    def run(self, initial: ParameterSet, evaluator: Evaluator | None = None) -> FederationResult:
        state = GlobalModelState(0, federated_view(initial, self.stage).copy(), self.stage)
        result = FederationResult(state)
        try:
            self.session.handshake(self.stage)
            for _ in range(self.plan.rounds):
                state = run_round(state, self.session, self.plan)
                result.state = state
                if evaluator is not None:
                    row = evaluator(state)
                    if row is not None:
                        result.round_metrics.append(row)
                        logger.info("round_evaluated", stage=self.stage.value, **row.logged())
        finally:
            self.session.shutdown()
        return result


def _run_clients(
    clients: Sequence[FederatedClient], channels: Sequence[FrameChannel | Callable[[], FrameChannel]]
) -> tuple[list[threading.Thread], list[BaseException]]:
    errors: list[BaseException] = []

    def target(client: FederatedClient, endpoint: FrameChannel | Callable[[], FrameChannel]) -> None:
        try:
            channel = endpoint if isinstance(endpoint, FrameChannel) else endpoint()
            client.serve(channel)
        except BaseException as e:  # re-raised on the caller's thread
            logger.error("client_failed", client_id=client.client_id, error=str(e))
            errors.append(e)

    threads = [
        threading.Thread(target=target, args=(c, ch), name=f"fedcpc-client-{c.client_id}", daemon=True)
        for c, ch in zip(clients, channels, strict=True)
    ]
    for thread in threads:
        thread.start()
    return threads, errors


def run_federation(
    plan: FederationPlan,
    stage: Stage,
    initial: ParameterSet,
    trainers: Mapping[str, LocalTrainer],
    transport: Literal["inprocess", "tcp"] = "inprocess",
    evaluator: Evaluator | None = None,
    recorder: FrameRecorder | None = None,
    host: str = "127.0.0.1",
    port: int = 0,
) -> FederationResult:
    """
    Run S rounds with every client in a thread of this process.

    The TCP transport binds ``host:port`` (port 0 picks a free port) and the
    clients connect over loopback, exercising the same framing as separate
    processes.
    """
    if len(trainers) != plan.n_clients:
        raise ConfigError(
            f"plan expects {plan.n_clients} clients, got {len(trainers)}",
            n_clients=plan.n_clients,
        )
    clients = [
        FederatedClient(cid, trainers[cid], stage, plan.local_epochs) for cid in sorted(trainers)
    ]
    logger.info(
        "federation_started",
        stage=stage.value,
        transport=transport,
        clients=plan.n_clients,
        rounds=plan.rounds,
        local_epochs=plan.local_epochs,
    )
    if transport == "inprocess":
        pairs = [QueueChannel.pair(f"inprocess-{i}", recorder) for i in range(len(clients))]
        threads, errors = _run_clients(clients, [client_end for _, client_end in pairs])
        server = FederationServer(plan, stage, [server_end for server_end, _ in pairs])
        result = _run_server(server, initial, evaluator, threads, errors)
    else:
        listener = TcpListener(host, port)
        bound_host, bound_port = listener.address
        try:
            connectors = [
                (lambda: connect_tcp(bound_host, bound_port)) for _ in clients
            ]
            threads, errors = _run_clients(clients, connectors)
            channels: list[FrameChannel] = list(
                listener.accept(len(clients), settings.FEDCPC_CONNECT_TIMEOUT_S, recorder)
            )
        finally:
            listener.close()
        server = FederationServer(plan, stage, channels)
        result = _run_server(server, initial, evaluator, threads, errors)
    logger.info("federation_completed", rounds=result.state.round)
    return result


def _run_server(
    server: FederationServer,
    initial: ParameterSet,
    evaluator: Evaluator | None,
    threads: list[threading.Thread],
    errors: list[BaseException],
) -> FederationResult:
    try:
        result = server.run(initial, evaluator)
    except ProtocolError:
        for thread in threads:
            thread.join(timeout=5.0)
        if errors:
            raise errors[0] from None
        raise
    for thread in threads:
        thread.join()
    if errors:
        raise errors[0]
    return result


def write_round_metrics_csv(
    path: Path, rows: Sequence[RoundMetrics], stage: Stage = Stage.DOWNSTREAM
) -> None:
    """One row per round with the ``ROUND_COLUMNS`` of ``stage``."""
    columns = ROUND_COLUMNS[stage]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(columns)
            for row in rows:
                values = [getattr(row, name) for name in columns[1:]]
                writer.writerow([row.round, *("" if v is None else repr(v) for v in values)])
    except OSError as e:
        raise ArtifactIOError(f"cannot write round metrics {path}: {e}", str(path)) from e
