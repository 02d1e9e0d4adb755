"""
Federation wire protocol: message types, frame codec and the per-connection
session state machine.

Frame: u32 big-endian length (type byte + body), u8 type, body.

    HELLO           u16 id_len, id, u32 n_samples, u8 stage
    GLOBAL_WEIGHTS  u32 round, weights buffer
    CLIENT_UPDATE   u32 round, u16 id_len, id, u32 n_samples, weights buffer
    SHUTDOWN        (empty)

Weights buffers are embedded verbatim in the weights format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum, IntEnum

from transitions import Machine, MachineError

from .error_handler import ErrorType, ProtocolError
from .logging_config import get_logger
from .params import ParameterSet
from .settings import settings
from .weights_format import deserialize_weights, serialize_weights

logger = get_logger(__name__)

LENGTH_PREFIX = struct.Struct(">I")


class MessageType(IntEnum):
    HELLO = 1
    GLOBAL_WEIGHTS = 2
    CLIENT_UPDATE = 3
    SHUTDOWN = 4


class Stage(str, Enum):
    """Which parameters a federation run exchanges."""

    PRETRAIN = "pretrain"
    DOWNSTREAM = "downstream"

    @property
    def code(self) -> int:
        return 0 if self is Stage.PRETRAIN else 1

    @classmethod
    def from_code(cls, code: int) -> Stage:
        if code == 0:
            return cls.PRETRAIN
        if code == 1:
            return cls.DOWNSTREAM
        raise ProtocolError(f"unknown stage code {code}", stage_code=code)


@dataclass(frozen=True)
class Hello:
    client_id: str
    n_samples: int
    stage: Stage

    type = MessageType.HELLO


@dataclass(frozen=True)
class GlobalWeights:
    round: int
    payload: bytes

    type = MessageType.GLOBAL_WEIGHTS

    @classmethod
    def of(cls, round: int, weights: ParameterSet) -> GlobalWeights:
        return cls(round, serialize_weights(weights))

    def weights(self) -> ParameterSet:
        return deserialize_weights(self.payload)


@dataclass(frozen=True)
class ClientUpdateMessage:
    round: int
    client_id: str
    n_samples: int
    payload: bytes

    type = MessageType.CLIENT_UPDATE

    def weights(self) -> ParameterSet:
        return deserialize_weights(self.payload)


@dataclass(frozen=True)
class Shutdown:
    type = MessageType.SHUTDOWN


Message = Hello | GlobalWeights | ClientUpdateMessage | Shutdown


def _encode_id(client_id: str) -> bytes:
    raw = client_id.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ProtocolError("client id too long", client_id=client_id[:40])
    return struct.pack(">H", len(raw)) + raw


def encode_body(message: Message) -> bytes:
    match message:
        case Hello(client_id=cid, n_samples=n, stage=stage):
            return _encode_id(cid) + struct.pack(">IB", n, stage.code)
        case GlobalWeights(round=r, payload=payload):
            return struct.pack(">I", r) + payload
        case ClientUpdateMessage(round=r, client_id=cid, n_samples=n, payload=payload):
            return struct.pack(">I", r) + _encode_id(cid) + struct.pack(">I", n) + payload
        case Shutdown():
            return b""
    raise ProtocolError(f"cannot encode {type(message).__name__}")


def encode_frame(message: Message, max_frame_bytes: int | None = None) -> bytes:
    limit = max_frame_bytes if max_frame_bytes is not None else settings.FEDCPC_MAX_FRAME_BYTES
    body = encode_body(message)
    length = 1 + len(body)
    if length > limit:
        raise ProtocolError(
            f"frame of {length} bytes exceeds the {limit}-byte limit", frame_bytes=length
        )
    return LENGTH_PREFIX.pack(length) + bytes([int(message.type)]) + body


def check_frame_length(length: int, max_frame_bytes: int | None = None) -> None:
    limit = max_frame_bytes if max_frame_bytes is not None else settings.FEDCPC_MAX_FRAME_BYTES
    if length < 1:
        raise ProtocolError("empty frame")
    if length > limit:
        raise ProtocolError(
            f"frame of {length} bytes exceeds the {limit}-byte limit", frame_bytes=length
        )


class _BodyReader:
    def __init__(self, body: bytes) -> None:
        self.body = body
        self.pos = 0

    def unpack(self, fmt: str) -> tuple[int, ...]:
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.body):
            raise ProtocolError("message body truncated")
        values = struct.unpack_from(fmt, self.body, self.pos)
        self.pos += size
        return values

    def client_id(self) -> str:
        (n,) = self.unpack(">H")
        if self.pos + n > len(self.body):
            raise ProtocolError("message body truncated inside client id")
        raw = self.body[self.pos : self.pos + n]
        self.pos += n
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ProtocolError("client id is not UTF-8") from e

    def rest(self) -> bytes:
        out = self.body[self.pos :]
        self.pos = len(self.body)
        return out

    def done(self) -> None:
        if self.pos != len(self.body):
            raise ProtocolError(f"{len(self.body) - self.pos} unexpected bytes in message body")


def decode_message(frame: bytes) -> Message:
    """Decode a frame without its length prefix (type byte + body)."""
    if not frame:
        raise ProtocolError("empty frame")
    try:
        kind = MessageType(frame[0])
    except ValueError:
        raise ProtocolError(f"unknown message type {frame[0]}", message_type=frame[0]) from None
    reader = _BodyReader(frame[1:])
    message: Message
    match kind:
        case MessageType.HELLO:
            cid = reader.client_id()
            n, stage = reader.unpack(">IB")
            message = Hello(cid, n, Stage.from_code(stage))
        case MessageType.GLOBAL_WEIGHTS:
            (r,) = reader.unpack(">I")
            message = GlobalWeights(r, reader.rest())
        case MessageType.CLIENT_UPDATE:
            (r,) = reader.unpack(">I")
            cid = reader.client_id()
            (n,) = reader.unpack(">I")
            message = ClientUpdateMessage(r, cid, n, reader.rest())
        case MessageType.SHUTDOWN:
            message = Shutdown()
    reader.done()
    return message


class SessionState(str, Enum):
    AWAITING_HELLO = "awaiting_hello"
    ACTIVE = "active"
    CLOSED = "closed"


_TRIGGERS = {
    MessageType.HELLO: "hello",
    MessageType.GLOBAL_WEIGHTS: "global_weights",
    MessageType.CLIENT_UPDATE: "client_update",
    MessageType.SHUTDOWN: "shutdown",
}


class SessionStateMachine:
    """
    Legal message order on one connection, tracked identically by both ends.

    HELLO opens the session; weights and updates flow only while active;
    SHUTDOWN (or a dropped connection) closes it. Anything else raises
    ProtocolError.
    """

    def __init__(self, peer: str = "") -> None:
        self.peer = peer
        self.client_id: str | None = None
        self.states = [state.value for state in SessionState]
        self.transitions = [
            {
                "trigger": "hello",
                "source": SessionState.AWAITING_HELLO.value,
                "dest": SessionState.ACTIVE.value,
            },
            {
                "trigger": "global_weights",
                "source": SessionState.ACTIVE.value,
                "dest": SessionState.ACTIVE.value,
            },
            {
                "trigger": "client_update",
                "source": SessionState.ACTIVE.value,
                "dest": SessionState.ACTIVE.value,
            },
            {
                "trigger": "shutdown",
                "source": [SessionState.AWAITING_HELLO.value, SessionState.ACTIVE.value],
                "dest": SessionState.CLOSED.value,
                "after": "on_closed",
            },
            {
                "trigger": "close",
                "source": "*",
                "dest": SessionState.CLOSED.value,
            },
        ]
        self.machine = Machine(
            model=self,
            states=self.states,
            transitions=self.transitions,
            initial=SessionState.AWAITING_HELLO.value,
            auto_transitions=False,
            ignore_invalid_triggers=False,
        )

    def on_closed(self) -> None:
        logger.debug("session_closed", peer=self.peer, client_id=self.client_id)

    def observe(self, message: Message) -> None:
        """Advance on a message sent or received on this connection."""
        trigger = _TRIGGERS[message.type]
        try:
            self.trigger(trigger)
        except MachineError as e:
            raise ProtocolError(
                f"{message.type.name} not allowed in state {self.state}",
                ErrorType.PROTOCOL_ERROR,
                client_id=self.client_id,
                state=self.state,
            ) from e
        if isinstance(message, Hello):
            self.client_id = message.client_id

    def is_active(self) -> bool:
        return self.state == SessionState.ACTIVE.value

    def is_closed(self) -> bool:
        return self.state == SessionState.CLOSED.value
