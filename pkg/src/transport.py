"""
Message transports for federation: in-process queue pairs and TCP sockets.

Both carry identical frames (see protocol.py) and expose the same
FrameChannel interface, so the server session and the client loop never
know which transport they run on.
"""

from __future__ import annotations

import queue
import socket
import threading
import time
from abc import ABC, abstractmethod
from collections import defaultdict
from dataclasses import dataclass

from .error_handler import ConfigError, ProtocolError, StragglerError
from .logging_config import get_logger
from .protocol import (
    LENGTH_PREFIX,
    ClientUpdateMessage,
    GlobalWeights,
    Hello,
    Message,
    SessionStateMachine,
    Shutdown,
    Stage,
    check_frame_length,
    decode_message,
    encode_frame,
)
from .settings import settings

logger = get_logger(__name__)


class FrameRecorder:
    """Thread-safe log of every frame per connection, keyed by client id."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._frames: dict[str, list[tuple[str, bytes]]] = defaultdict(list)

    def record(self, connection: str, direction: str, frame: bytes) -> None:
        with self._lock:
            self._frames[connection].append((direction, frame))

    def by_connection(self) -> dict[str, list[tuple[str, bytes]]]:
        with self._lock:
            return {key: list(frames) for key, frames in sorted(self._frames.items())}


class FrameChannel(ABC):
    """One end of a connection: framed send/receive plus session tracking."""

    def __init__(self, peer: str, recorder: FrameRecorder | None = None) -> None:
        self.peer = peer
        self.session = SessionStateMachine(peer)
        self.recorder = recorder
        self.max_frame_bytes = settings.FEDCPC_MAX_FRAME_BYTES
        self._session_lock = threading.Lock()

    @property
    def label(self) -> str:
        return self.session.client_id or self.peer

    def send(self, message: Message) -> None:
        frame = encode_frame(message, self.max_frame_bytes)
        with self._session_lock:
            self.session.observe(message)
        if self.recorder is not None:
            self.recorder.record(self.label, "out", frame)
        self._send_frame(frame)

    def recv(self, timeout: float | None = None) -> Message | None:
        """Next message, or None once the peer has gone away."""
        frame = self._recv_frame(timeout)
        if frame is None:
            with self._session_lock:
                if not self.session.is_closed():
                    self.session.close()
            return None
        message = decode_message(frame[LENGTH_PREFIX.size :])
        with self._session_lock:
            self.session.observe(message)
        if self.recorder is not None:
            self.recorder.record(self.label, "in", frame)
        return message

    @abstractmethod
    def _send_frame(self, frame: bytes) -> None: ...

    @abstractmethod
    def _recv_frame(self, timeout: float | None) -> bytes | None: ...

    @abstractmethod
    def close(self) -> None: ...


_CLOSED = b""


class QueueChannel(FrameChannel):
    """In-process endpoint backed by a pair of queues of encoded frames."""

    def __init__(
        self,
        inbox: queue.Queue[bytes],
        outbox: queue.Queue[bytes],
        peer: str,
        recorder: FrameRecorder | None = None,
    ) -> None:
        super().__init__(peer, recorder)
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    @classmethod
    def pair(
        cls, label: str = "inprocess", recorder: FrameRecorder | None = None
    ) -> tuple[QueueChannel, QueueChannel]:
        """(server end, client end); only the server end records."""
        a_to_b: queue.Queue[bytes] = queue.Queue()
        b_to_a: queue.Queue[bytes] = queue.Queue()
        return cls(b_to_a, a_to_b, label, recorder), cls(a_to_b, b_to_a, label)

    def _send_frame(self, frame: bytes) -> None:
        if self._closed:
            raise ProtocolError("send on a closed channel", peer=self.peer)
        self._outbox.put(frame)

    def _recv_frame(self, timeout: float | None) -> bytes | None:
        try:
            frame = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TimeoutError(f"no frame from {self.peer} within {timeout}s") from None
        if frame == _CLOSED:
            return None
        (length,) = LENGTH_PREFIX.unpack_from(frame)
        check_frame_length(length, self.max_frame_bytes)
        return frame

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSED)


class SocketChannel(FrameChannel):
    """TCP endpoint; frames are read as a 4-byte length then the rest."""

    def __init__(
        self, sock: socket.socket, peer: str, recorder: FrameRecorder | None = None
    ) -> None:
        super().__init__(peer, recorder)
        self._sock = sock
        self._send_lock = threading.Lock()
        self._closed = False

    def _send_frame(self, frame: bytes) -> None:
        with self._send_lock:
            try:
                self._sock.sendall(frame)
            except OSError as e:
                raise ProtocolError(f"send to {self.peer} failed: {e}", peer=self.peer) from e

    def _recv_exact(self, n: int) -> bytes | None:
        chunks = bytearray()
        while len(chunks) < n:
            try:
                chunk = self._sock.recv(min(n - len(chunks), 1 << 20))
            except TimeoutError:
                raise
            except OSError:
                return None
            if not chunk:
                if chunks:
                    raise ProtocolError(
                        f"connection to {self.peer} closed mid-frame", peer=self.peer
                    )
                return None
            chunks += chunk
        return bytes(chunks)

    def _recv_frame(self, timeout: float | None) -> bytes | None:
        self._sock.settimeout(timeout)
        prefix = self._recv_exact(LENGTH_PREFIX.size)
        if prefix is None:
            return None
        (length,) = LENGTH_PREFIX.unpack(prefix)
        check_frame_length(length, self.max_frame_bytes)
        rest = self._recv_exact(length)
        if rest is None:
            raise ProtocolError(f"connection to {self.peer} closed mid-frame", peer=self.peer)
        return prefix + rest

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class TcpListener:
    """Server-side listening socket."""

    def __init__(self, host: str | None = None, port: int | None = None) -> None:
        host = host if host is not None else settings.FEDCPC_HOST
        port = port if port is not None else settings.FEDCPC_PORT
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._sock.bind((host, port))
        except OSError as e:
            self._sock.close()
            raise ConfigError(f"cannot listen on {host}:{port}: {e}", host=host, port=port) from e
        self._sock.listen()
        logger.info("tcp_listening", host=host, port=self.address[1])

    @property
    def address(self) -> tuple[str, int]:
        host, port = self._sock.getsockname()[:2]
        return str(host), int(port)

    def accept(
        self, count: int, timeout: float, recorder: FrameRecorder | None = None
    ) -> list[SocketChannel]:
        channels: list[SocketChannel] = []
        deadline = time.monotonic() + timeout
        while len(channels) < count:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                for ch in channels:
                    ch.close()
                raise ProtocolError(
                    f"only {len(channels)} of {count} clients connected within {timeout}s"
                )
            self._sock.settimeout(remaining)
            try:
                conn, addr = self._sock.accept()
            except TimeoutError:
                continue
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            peer = f"{addr[0]}:{addr[1]}"
            logger.info("client_connected", peer=peer)
            channels.append(SocketChannel(conn, peer, recorder))
        return channels

    def close(self) -> None:
        self._sock.close()


def connect_tcp(
    host: str | None = None,
    port: int | None = None,
    timeout: float | None = None,
    retry_interval: float = 0.2,
) -> SocketChannel:
    """Connect to a server, retrying until ``timeout`` so clients may start first."""
    host = host if host is not None else settings.FEDCPC_HOST
    port = port if port is not None else settings.FEDCPC_PORT
    timeout = timeout if timeout is not None else settings.FEDCPC_CONNECT_TIMEOUT_S
    deadline = time.monotonic() + timeout
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=max(retry_interval, 1.0))
        except OSError as e:
            if time.monotonic() >= deadline:
                raise ProtocolError(f"cannot connect to {host}:{port}: {e}") from e
            time.sleep(retry_interval)
            continue
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(None)
        return SocketChannel(sock, f"{host}:{port}")


# -- server session ----------------------------------------------------


@dataclass(frozen=True)
class ConnectedClient:
    client_id: str
    n_samples: int
    channel: FrameChannel


_GONE = object()


class ServerSession:
    """
    The server's view of M connections.

    One reader thread per connection pushes decoded messages into a shared
    inbox; the round logic consumes them on the caller's thread.
    """

    def __init__(self, channels: list[FrameChannel], round_timeout: float | None = None) -> None:
        if not channels:
            raise ConfigError("a federation needs at least one client connection")
        self.round_timeout = (
            round_timeout if round_timeout is not None else settings.FEDCPC_ROUND_TIMEOUT_S
        )
        self._channels = channels
        self._inbox: queue.Queue[tuple[int, object]] = queue.Queue()
        self._threads: list[threading.Thread] = []
        self.clients: dict[str, ConnectedClient] = {}
        self._gone: set[str] = set()
        for index, channel in enumerate(channels):
            thread = threading.Thread(
                target=self._reader, args=(index, channel), name=f"fedcpc-reader-{index}", daemon=True
            )
            thread.start()
            self._threads.append(thread)

    def _reader(self, index: int, channel: FrameChannel) -> None:
        while True:
            try:
                message = channel.recv()
            except Exception as e:  # surfaced on the session thread
                self._inbox.put((index, e))
                return
            if message is None:
                self._inbox.put((index, _GONE))
                return
            self._inbox.put((index, message))
            if isinstance(message, Shutdown):
                return

    def _next(self, deadline: float) -> tuple[int, object]:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise TimeoutError
        try:
            return self._inbox.get(timeout=remaining)
        except queue.Empty:
            raise TimeoutError from None

    def _client_at(self, index: int) -> str | None:
        channel = self._channels[index]
        return channel.session.client_id

    def handshake(self, stage: Stage, timeout: float | None = None) -> list[ConnectedClient]:
        """Wait for one HELLO per connection; returns the clients sorted by id."""
        deadline = time.monotonic() + (timeout if timeout is not None else self.round_timeout)
        pending = set(range(len(self._channels)))
        while pending:
            try:
                index, item = self._next(deadline)
            except TimeoutError:
                raise ProtocolError(f"{len(pending)} connection(s) never sent HELLO") from None
            if isinstance(item, Exception):
                raise item
            if item is _GONE or isinstance(item, Shutdown):
                raise ProtocolError(f"connection {self._channels[index].peer} closed before HELLO")
            if not isinstance(item, Hello):
                raise ProtocolError(f"expected HELLO, got {type(item).__name__}")
            if item.stage is not stage:
                raise ProtocolError(
                    f"client {item.client_id} is in stage {item.stage.value}, server in {stage.value}",
                    client_id=item.client_id,
                )
            if item.client_id in self.clients:
                raise ProtocolError(
                    f"duplicate client id {item.client_id}", client_id=item.client_id
                )
            if item.n_samples < 1:
                raise ProtocolError(
                    f"client {item.client_id} reports no samples", client_id=item.client_id
                )
            self.clients[item.client_id] = ConnectedClient(
                item.client_id, item.n_samples, self._channels[index]
            )
            pending.discard(index)
            logger.info("client_hello", client_id=item.client_id, n_samples=item.n_samples)
        return [self.clients[cid] for cid in sorted(self.clients)]

    def broadcast(self, message: GlobalWeights) -> None:
        for cid in sorted(self.clients):
            if cid not in self._gone:
                self.clients[cid].channel.send(message)

    def collect_updates(self, round: int, timeout: float | None = None) -> list[ClientUpdateMessage]:
        """
        Block until every client reported for ``round``.

        A client that disconnects or shuts down, or the timeout elapsing,
        aborts the round with StragglerError naming every missing client.
        """
        deadline = time.monotonic() + (timeout if timeout is not None else self.round_timeout)
        received: dict[str, ClientUpdateMessage] = {}
        expected = set(self.clients) - self._gone
        if self._gone:
            raise StragglerError(round, sorted(self._gone))
        while set(received) != expected:
            try:
                index, item = self._next(deadline)
            except TimeoutError:
                raise StragglerError(round, sorted(expected - set(received))) from None
            cid = self._client_at(index) or self._channels[index].peer
            if isinstance(item, Exception):
                raise item
            if item is _GONE or isinstance(item, Shutdown):
                self._gone.add(cid)
                logger.warning("client_left_mid_round", client_id=cid, round=round)
                raise StragglerError(round, sorted(expected - set(received)))
            if not isinstance(item, ClientUpdateMessage):
                raise ProtocolError(f"expected CLIENT_UPDATE, got {type(item).__name__}", client_id=cid)
            if item.round != round:
                raise ProtocolError(
                    f"update for round {item.round} during round {round}", client_id=cid, round=round
                )
            if item.client_id != cid:
                raise ProtocolError(
                    f"update names {item.client_id} on the connection of {cid}", client_id=cid
                )
            if cid in received:
                raise ProtocolError(f"duplicate update from {cid}", client_id=cid, round=round)
            received[cid] = item
        return [received[cid] for cid in sorted(received)]

    def shutdown(self) -> None:
        for cid in sorted(self.clients):
            channel = self.clients[cid].channel
            if cid not in self._gone and channel.session.is_active():
                try:
                    channel.send(Shutdown())
                except ProtocolError as e:
                    logger.warning("shutdown_send_failed", client_id=cid, error=str(e))
        for channel in self._channels:
            channel.close()
        for thread in self._threads:
            thread.join(timeout=5.0)
